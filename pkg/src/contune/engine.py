"""Orchestration: continual training, task-free inference, baselines,
evaluation, checkpoints.

The continual method keeps the base model frozen and trains only the
pool keys (alignment loss), the increment factors (model loss through
the per-instance intrinsic increment) and the context weights (model
loss through the contextual increment). Sequential/rehearsal/joint
baselines fine-tune the whole model. Inference never consumes a task
identity: the instruction embedding alone routes pool selection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import pool as pool_mod
from .data import InstructionInstance, StreamTask, Vocabulary, canonicalize
from .encoder import SurrogateEncoder
from .errors import CheckpointError, ConfigError, ContractError
from .metrics import AccuracyMatrix, average_accuracy, average_forgetting
from .model import (
    AdaptedForwardSpec,
    ToyModel,
    TokenizedInstance,
    ar_loss,
    generate,
)
from .optim import LrSchedule, ParamRegistry, SgdOptimizer
from .pool import ContextWeights, LowRankPool, TaskTrace
from .util import pack_array, rng_for, unpack_array

STATE_FORMAT_VERSION = 1

METHODS = ("ours", "sequential", "rehearsal", "joint")


@dataclass(frozen=True)
class RunConfig:
    method: str = "ours"
    task_order: tuple[int, ...] | None = None
    pool_size: int = 32
    select_m: int = 4
    rank: int = 8
    key_dim: int | None = None
    batch_size: int = 32
    epochs: int = 2
    base_lr: float = 0.01
    momentum: float = 0.0
    warmup_ratio: float = 0.03
    seed: int = 0
    max_new_tokens: int = 8
    # ablation switches
    drop_intrinsic: bool = False
    drop_contextual: bool = False
    drop_align_loss: bool = False
    adapt_position: str = "output"
    similarity_source: str = "text"
    no_low_rank: bool = False
    # paper-gap knobs
    intrinsic_weighting: str = "eq3"
    context_include_current: bool = True
    trace_weighting: str = "uniform"
    pool_sharing: str = "per_layer"
    carry_context_weights: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method: {self.method}")
        if self.select_m > self.pool_size:
            raise ConfigError("select_m cannot exceed pool_size")
        if self.similarity_source not in ("text", "feature"):
            raise ConfigError(f"unknown similarity source: {self.similarity_source}")
        if self.pool_sharing not in ("per_layer", "global"):
            raise ConfigError(f"unknown pool sharing: {self.pool_sharing}")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("batch_size and epochs must be positive")


class RehearsalBuffer:
    """Reservoir of past instances; capacity is 1% of the task just left."""

    def __init__(self, seed: int):
        self.seed = seed
        self.capacity = 0
        self.n_seen = 0
        self.items: list[InstructionInstance] = []

    def absorb_task(self, task_position: int, instances):
        self.capacity = max(self.capacity, math.ceil(0.01 * len(instances)))
        rng = rng_for(self.seed, "reservoir", task_position)
        for inst in instances:
            self.n_seen += 1
            if len(self.items) < self.capacity:
                self.items.append(inst)
            else:
                j = int(rng.integers(self.n_seen))
                if j < self.capacity:
                    self.items[j] = inst

    def sample(self, k: int, rng) -> list[InstructionInstance]:
        if not self.items or k <= 0:
            return []
        idx = rng.integers(0, len(self.items), size=k)
        return [self.items[int(i)] for i in idx]


@dataclass
class TrainedState:
    """Everything inference needs; the serializable unit of a run."""

    method: str
    config: RunConfig
    vocab: Vocabulary
    model: ToyModel
    encoder: SurrogateEncoder | None = None
    pools: list[LowRankPool] | None = None
    traces: list[list[TaskTrace]] | None = None  # [pool][completed task]
    context_weights: ContextWeights | None = None
    buffer: RehearsalBuffer | None = None
    completed_tasks: int = 0
    log: list[dict] = field(default_factory=list)
    trainable_param_count: int = 0


# ---------------------------------------------------------------------------
# shared helpers


def order_tasks(stream: list[StreamTask], config: RunConfig) -> list[StreamTask]:
    order = config.task_order or tuple(t.task_id for t in stream)
    by_id = {t.task_id: t for t in stream}
    if sorted(order) != sorted(by_id):
        raise ConfigError(f"task_order {order} is not a permutation of stream ids")
    return [by_id[i] for i in order]


def tokenize_instance(vocab: Vocabulary, inst: InstructionInstance) -> TokenizedInstance:
    prompt = [vocab.bos_id, *vocab.encode_text(inst.instruction), vocab.ans_id]
    response = [*vocab.encode_text(inst.response), vocab.eos_id]
    return TokenizedInstance(prompt=prompt, response=response,
                             features=inst.feature_array())


def query_embedding(encoder: SurrogateEncoder, inst: InstructionInstance,
                    config: RunConfig) -> np.ndarray:
    if config.similarity_source == "feature" and inst.features is not None:
        return encoder.encode_features(inst.feature_array())
    return encoder.encode(inst.instruction)


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield range(start, min(start + batch_size, n))


def _num_pools(model: ToyModel, config: RunConfig) -> int:
    return 1 if config.pool_sharing == "global" else model.config.num_layers


def init_pools(model: ToyModel, config: RunConfig) -> list[LowRankPool]:
    e = config.key_dim or model.config.hidden_dim
    dims = (config.pool_size, model.config.hidden_dim, config.rank, e)
    return [
        pool_mod.init_pool(dims, rng_for(config.seed, "pool", i).integers(2 ** 31),
                           low_rank=not config.no_low_rank)
        for i in range(_num_pools(model, config))
    ]


def _compose_training_instance(state: TrainedState, q: np.ndarray,
                               live_traces: list[TaskTrace],
                               p_caches: list[dict]):
    """Per-pool adapted specs plus alignment terms for one instance.

    Selection updates the live traces (Algorithm-1 bookkeeping happens
    here); the intrinsic coefficients are stop-gradient wrapped so the
    model loss cannot reach the keys, and the alignment terms reuse the
    same, unwrapped cosine nodes so it can.
    """
    cfg = state.config
    specs: list[AdaptedForwardSpec] = []
    align_terms: list = []
    selected_union: set[int] = set()
    for pi, pool in enumerate(state.pools):
        indices = pool_mod.select_top_m(q, pool, cfg.select_m)
        selected_union.update(indices)
        pool_mod.update_trace(live_traces[pi], indices, pool, cfg.trace_weighting)
        cos_nodes = pool_mod.selection_cos_nodes(q, pool, indices)
        if not cfg.drop_align_loss:
            align_terms.append(pool_mod.alignment_loss(q, pool, indices,
                                                       cos_nodes=cos_nodes))
        delta_theta = None
        if not cfg.drop_intrinsic:
            delta_theta = pool_mod.intrinsic_increment(
                q, pool, indices,
                weighting=cfg.intrinsic_weighting,
                detach_weights=True,
                cos_nodes=cos_nodes,
                p_nodes=p_caches[pi],
            )
        history = list(state.traces[pi]) + [live_traces[pi]]
        delta_delta = None
        if not cfg.drop_contextual and len(history) > 1:
            delta_delta = pool_mod.contextual_increment(
                state.context_weights, history,
                include_current=cfg.context_include_current,
            )
        specs.append(AdaptedForwardSpec(cfg.adapt_position, delta_theta, delta_delta))
    return specs, align_terms, selected_union


def _forward_spec(model: ToyModel, specs: list[AdaptedForwardSpec]):
    if len(specs) == 1 and model.config.num_layers == 1:
        return specs[0]
    if len(specs) == 1:
        return [specs[0]] * model.config.num_layers
    return specs


# ---------------------------------------------------------------------------
# the continual method (Algorithm 1)


def train_continual(stream: list[StreamTask], model: ToyModel, config: RunConfig,
                    vocab: Vocabulary, encoder: SurrogateEncoder | None = None,
                    pools: list[LowRankPool] | None = None,
                    resume_state: TrainedState | None = None,
                    stop_after_task: int | None = None,
                    checkpoint_hook=None) -> TrainedState:
    """Train the increment pool over the task stream; the base stays frozen.

    ``resume_state`` continues a partial run from its next task;
    ``checkpoint_hook(t, state)`` is called after each task freeze.
    """
    if config.method != "ours":
        raise ConfigError("train_continual drives method 'ours' only")
    if not model.frozen:
        raise ContractError("train_continual requires a frozen base model")

    if resume_state is not None:
        state = resume_state
        config = state.config
        model = state.model
    else:
        if encoder is None:
            e = config.key_dim or model.config.hidden_dim
            encoder = SurrogateEncoder(e, rng_for(config.seed, "encoder").integers(2 ** 31))
        if pools is None:
            pools = init_pools(model, config)
        state = TrainedState(
            method="ours", config=config, vocab=vocab, model=model,
            encoder=encoder, pools=pools,
            traces=[[] for _ in pools], context_weights=None,
        )

    ordered = order_tasks(stream, config)
    base_snapshot = {k: v.data.copy() for k, v in state.model.weights.items()}

    for t_pos, task in enumerate(ordered, start=1):
        if t_pos <= state.completed_tasks:
            continue
        if stop_after_task is not None and t_pos > stop_after_task:
            break
        live_traces = [TaskTrace(t_pos, state.model.config.hidden_dim)
                       for _ in state.pools]
        if t_pos > 1:
            if state.context_weights is not None and config.carry_context_weights:
                state.context_weights = state.context_weights.extended()
            else:
                state.context_weights = ContextWeights.fresh(t_pos)

        registry = ParamRegistry()
        for pi, pool in enumerate(state.pools):
            pool.register(registry, prefix=f"pool{pi}")
        if state.context_weights is not None:
            registry.add_trainable("context.raw", state.context_weights.raw)
        state.model.register(registry, trainable=False)
        state.trainable_param_count = registry.num_trainable_values()

        tokenized = [tokenize_instance(vocab, inst) for inst in task.train]
        queries = [query_embedding(state.encoder, inst, config) for inst in task.train]
        n_batches = math.ceil(len(task.train) / config.batch_size)
        schedule = LrSchedule(config.base_lr, config.warmup_ratio,
                              config.epochs * n_batches)
        optimizer = SgdOptimizer(registry, schedule, config.momentum)
        step = 0
        for epoch in range(config.epochs):
            perm = rng_for(config.seed, "shuffle", t_pos, epoch).permutation(
                len(task.train))
            for batch in _batches(len(task.train), config.batch_size):
                p_caches = [dict() for _ in state.pools]
                ar_terms, align_terms = [], []
                batch_selected: set[int] = set()
                for bi in batch:
                    i = int(perm[bi])
                    specs, inst_align, selected = _compose_training_instance(
                        state, queries[i], live_traces, p_caches)
                    batch_selected.update(selected)
                    align_terms.extend(inst_align)
                    ar_terms.append(ar_loss(state.model, tokenized[i],
                                            _forward_spec(state.model, specs)))
                loss = ad.mean_of(ar_terms)
                mean_align = None
                if align_terms:
                    mean_align = ad.mean_of(align_terms)
                    loss = ad.add(loss, mean_align)
                ad.backward(loss)
                registry.ensure_grads()
                optimizer.step(step)
                state.log.append({
                    "task": task.name, "stage": t_pos, "epoch": epoch, "step": step,
                    "lr": schedule.lr(step),
                    "loss_ar": float(np.mean([t.data for t in ar_terms])),
                    "loss_align": None if mean_align is None else float(mean_align.data),
                    "selected_indices": sorted(batch_selected),
                })
                step += 1

        for pi, pool in enumerate(state.pools):
            pool_mod.freeze_trace(live_traces[pi], pool)
            state.traces[pi].append(live_traces[pi])
        state.completed_tasks = t_pos
        if checkpoint_hook is not None:
            checkpoint_hook(t_pos, state)

    for name, arr in base_snapshot.items():
        if not np.array_equal(arr, state.model.weights[name].data):
            raise ContractError(f"frozen base weight {name} changed during training")
    return state


# ---------------------------------------------------------------------------
# baselines


def run_baseline(stream: list[StreamTask], model: ToyModel, config: RunConfig,
                 vocab: Vocabulary, resume_state: TrainedState | None = None,
                 stop_after_task: int | None = None,
                 checkpoint_hook=None) -> TrainedState:
    """Full-model fine-tuning baselines: sequential, rehearsal, joint."""
    if config.method not in ("sequential", "rehearsal", "joint"):
        raise ConfigError(f"run_baseline cannot drive method {config.method!r}")

    if resume_state is not None:
        state = resume_state
        config = state.config
    else:
        ft = model.copy()
        ft.unfreeze()
        state = TrainedState(method=config.method, config=config, vocab=vocab,
                             model=ft)
        if config.method == "rehearsal":
            state.buffer = RehearsalBuffer(config.seed)

    ordered = order_tasks(stream, config)
    if config.method == "joint":
        merged = [inst for task in ordered for inst in task.train]
        rng = rng_for(config.seed, "joint-merge")
        merged = [merged[int(i)] for i in rng.permutation(len(merged))]
        phases = [StreamTask(0, "joint", "joint", merged, [])]
    else:
        phases = ordered

    for t_pos, task in enumerate(phases, start=1):
        if t_pos <= state.completed_tasks:
            continue
        if stop_after_task is not None and t_pos > stop_after_task:
            break
        registry = ParamRegistry()
        state.model.register(registry, trainable=True)
        state.trainable_param_count = registry.num_trainable_values()

        n_batches = math.ceil(len(task.train) / config.batch_size)
        schedule = LrSchedule(config.base_lr, config.warmup_ratio,
                              config.epochs * n_batches)
        optimizer = SgdOptimizer(registry, schedule, config.momentum)
        replay_per_batch = config.batch_size // 8
        step = 0
        for epoch in range(config.epochs):
            perm = rng_for(config.seed, "shuffle", t_pos, epoch).permutation(
                len(task.train))
            for batch in _batches(len(task.train), config.batch_size):
                insts = [task.train[int(perm[bi])] for bi in batch]
                if state.buffer is not None and state.buffer.items:
                    draw = state.buffer.sample(
                        min(replay_per_batch, len(insts) - 1),
                        rng_for(config.seed, "replay", t_pos, epoch, step))
                    insts = insts[: len(insts) - len(draw)] + draw
                terms = [ar_loss(state.model, tokenize_instance(vocab, inst))
                         for inst in insts]
                loss = ad.mean_of(terms)
                ad.backward(loss)
                registry.ensure_grads()
                optimizer.step(step)
                state.log.append({
                    "task": task.name, "stage": t_pos, "epoch": epoch, "step": step,
                    "lr": schedule.lr(step),
                    "loss_ar": float(np.mean([t.data for t in terms])),
                    "loss_align": None, "selected_indices": [],
                })
                step += 1
        if state.buffer is not None:
            state.buffer.absorb_task(t_pos, task.train)
        state.completed_tasks = t_pos
        if checkpoint_hook is not None:
            checkpoint_hook(t_pos, state)
    return state


def train_run(stream, model, config, vocab, **kwargs) -> TrainedState:
    """Dispatch on config.method."""
    if config.method == "ours":
        return train_continual(stream, model, config, vocab, **kwargs)
    return run_baseline(stream, model, config, vocab, **kwargs)


# ---------------------------------------------------------------------------
# inference (Algorithm 2) and evaluation


def infer(state: TrainedState, instance: InstructionInstance) -> str:
    """Greedy response for one instance; no task identity is consumed."""
    cfg = state.config
    tok = tokenize_instance(state.vocab, instance)
    if state.method == "ours":
        for history in state.traces:
            for trace in history:
                if not trace.frozen:
                    raise ContractError("infer requires all task traces frozen")
        q = query_embedding(state.encoder, instance, cfg)
        specs = []
        for pi, pool in enumerate(state.pools):
            indices = pool_mod.select_top_m(q, pool, cfg.select_m)
            delta_theta = None
            if not cfg.drop_intrinsic:
                delta_theta = pool_mod.intrinsic_increment(
                    q, pool, indices, weighting=cfg.intrinsic_weighting)
            delta_delta = None
            if not cfg.drop_contextual and len(state.traces[pi]) > 1:
                delta_delta = pool_mod.contextual_increment(
                    state.context_weights, state.traces[pi])
            specs.append(AdaptedForwardSpec(cfg.adapt_position,
                                            delta_theta, delta_delta))
        spec = _forward_spec(state.model, specs)
    else:
        spec = AdaptedForwardSpec(cfg.adapt_position)
    out = generate(state.model, tok.features, tok.prompt, spec,
                   cfg.max_new_tokens, state.vocab.eos_id)
    return state.vocab.decode(out)


def selection_for(state: TrainedState, instance: InstructionInstance,
                  pool_index: int = 0) -> list[int]:
    q = query_embedding(state.encoder, instance, state.config)
    return pool_mod.select_top_m(q, state.pools[pool_index], state.config.select_m)


def evaluate(state: TrainedState, task: StreamTask) -> float:
    """Exact-match accuracy (whitespace-normalized) on the task's eval set."""
    if not task.eval:
        raise ContractError("evaluate: task has an empty eval set")
    hits = 0
    for inst in task.eval:
        if canonicalize(infer(state, inst)) == canonicalize(inst.response):
            hits += 1
    return hits / len(task.eval)


def accuracy_matrix(ordered_tasks: list[StreamTask],
                    checkpoints: list[TrainedState]) -> AccuracyMatrix:
    """a[k][j] = accuracy of checkpoint k on the j-th trained task."""
    if len(checkpoints) != len(ordered_tasks):
        raise ContractError("one checkpoint per completed task is required")
    matrix = AccuracyMatrix()
    for k, ckpt in enumerate(checkpoints, start=1):
        matrix.add_row([evaluate(ckpt, ordered_tasks[j]) for j in range(k)])
    return matrix


def summarize_matrix(matrix: AccuracyMatrix) -> dict:
    k = matrix.num_stages
    return {
        "final_row": matrix.row(k),
        "average_accuracy": average_accuracy(matrix, k),
        "average_forgetting": average_forgetting(matrix, k) if k >= 2 else None,
    }


# ---------------------------------------------------------------------------
# persistence


def snapshot_state(state: TrainedState) -> TrainedState:
    """Deep, detached copy usable as a per-task checkpoint."""
    return _state_from_payload(_state_payload(state))


def _trace_payload(trace: TaskTrace) -> dict:
    return {
        "task_id": trace.task_id,
        "model_dim": trace.model_dim,
        "selected": sorted(trace.selected_indices),
        "counts": {str(k): v for k, v in sorted(trace.selection_counts.items())},
        "running_avg": pack_array(trace.running_avg),
        "snapshot_avg": None if trace.snapshot_avg is None
        else pack_array(trace.snapshot_avg),
        "frozen": trace.frozen,
    }


def _trace_from_payload(payload: dict) -> TaskTrace:
    trace = TaskTrace(payload["task_id"], payload["model_dim"])
    trace.selected_indices = set(payload["selected"])
    trace.selection_counts = {int(k): v for k, v in payload["counts"].items()}
    trace.running_avg = unpack_array(payload["running_avg"])
    if payload["snapshot_avg"] is not None:
        trace.snapshot_avg = unpack_array(payload["snapshot_avg"])
    trace.frozen = payload["frozen"]
    return trace


def _instance_payload(inst: InstructionInstance) -> dict:
    return {
        "task": inst.task_name,
        "instruction": inst.instruction,
        "features": None if inst.features is None else list(inst.features),
        "response": inst.response,
    }


def _instance_from_payload(rec: dict) -> InstructionInstance:
    return InstructionInstance(
        instruction=rec["instruction"], response=rec["response"],
        features=None if rec["features"] is None else tuple(rec["features"]),
        task_name=rec["task"],
    )


def _config_payload(config: RunConfig) -> dict:
    payload = {}
    for name in RunConfig.__dataclass_fields__:
        value = getattr(config, name)
        payload[name] = list(value) if isinstance(value, tuple) else value
    return payload


def config_from_payload(payload: dict) -> RunConfig:
    fields = dict(payload)
    if fields.get("task_order") is not None:
        fields["task_order"] = tuple(fields["task_order"])
    unknown = set(fields) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
    return RunConfig(**fields)


def _state_payload(state: TrainedState) -> dict:
    return {
        "version": STATE_FORMAT_VERSION,
        "kind": "trained_state",
        "method": state.method,
        "config": _config_payload(state.config),
        "vocab": list(state.vocab.tokens),
        "model": state.model.to_state(),
        "encoder": None if state.encoder is None else state.encoder.to_state(),
        "pools": None if state.pools is None
        else [p.to_state() for p in state.pools],
        "traces": None if state.traces is None
        else [[_trace_payload(tr) for tr in history] for history in state.traces],
        "context_raw": None if state.context_weights is None
        else pack_array(state.context_weights.raw.data),
        "buffer": None if state.buffer is None else {
            "seed": state.buffer.seed,
            "capacity": state.buffer.capacity,
            "n_seen": state.buffer.n_seen,
            "items": [_instance_payload(i) for i in state.buffer.items],
        },
        "completed_tasks": state.completed_tasks,
        "trainable_param_count": state.trainable_param_count,
    }


def _state_from_payload(payload: dict) -> TrainedState:
    if payload.get("kind") != "trained_state":
        raise CheckpointError("file does not contain a trained state")
    if payload.get("version") != STATE_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported state version: {payload.get('version')!r}")
    config = config_from_payload(payload["config"])
    vocab = Vocabulary(tuple(payload["vocab"]))
    model = ToyModel.from_state(payload["model"])
    state = TrainedState(
        method=payload["method"], config=config, vocab=vocab, model=model,
        encoder=None if payload["encoder"] is None
        else SurrogateEncoder.from_state(payload["encoder"]),
        pools=None if payload["pools"] is None
        else [LowRankPool.from_state(p) for p in payload["pools"]],
        traces=None if payload["traces"] is None
        else [[_trace_from_payload(tr) for tr in history]
              for history in payload["traces"]],
        context_weights=None if payload["context_raw"] is None
        else ContextWeights(ad.parameter(unpack_array(payload["context_raw"]))),
        completed_tasks=payload["completed_tasks"],
        trainable_param_count=payload.get("trainable_param_count", 0),
    )
    buf = payload["buffer"]
    if buf is not None:
        buffer = RehearsalBuffer(buf["seed"])
        buffer.capacity = buf["capacity"]
        buffer.n_seen = buf["n_seen"]
        buffer.items = [_instance_from_payload(r) for r in buf["items"]]
        state.buffer = buffer
    return state


def save_state(state: TrainedState, path):
    data = json.dumps(_state_payload(state), sort_keys=True, ensure_ascii=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(data)


def load_state(path) -> TrainedState:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt state file: {e}") from e
    return _state_from_payload(payload)
