"""A tiny frozen causal-attention model with an adaptable projection.

The model is deliberately small: token + positional embeddings, a stack
of causal attention blocks with a two-layer GELU MLP, an optional
single-position feature prefix (the image-slot analogue), and a linear
output head. After generic pretraining all weights are frozen; continual
tuning only injects additive increments into the configured attention
projection, so a zero increment reproduces the pretrained model exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, LengthError
from .optim import LrSchedule, ParamRegistry, SgdOptimizer
from .util import pack_array, rng_for, unpack_array

MODEL_FORMAT_VERSION = 1

ADAPT_POSITIONS = ("query", "key", "value", "output", "all")


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 64
    hidden_dim: int = 64
    num_layers: int = 1
    num_heads: int = 2
    max_seq_len: int = 48
    feature_dim: int = 8

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if self.feature_dim < 0:
            raise ConfigError("feature_dim must be >= 0")


@dataclass
class AdaptedForwardSpec:
    """Which projection receives W0 + delta_theta + delta_delta."""

    position: str = "output"
    delta_theta: Tensor | None = None
    delta_delta: Tensor | None = None

    def __post_init__(self):
        if self.position not in ADAPT_POSITIONS:
            raise ConfigError(f"unknown adaptation position: {self.position}")


BASE_SPEC = AdaptedForwardSpec()


class ToyModel:
    def __init__(self, config: ToyModelConfig, weights: dict[str, Tensor],
                 pretrain_seed: int | None = None):
        self.config = config
        self.weights = weights
        self.pretrain_seed = pretrain_seed
        self.frozen = False

    @classmethod
    def init(cls, config: ToyModelConfig, seed: int) -> "ToyModel":
        rng = rng_for(seed, "toy-model-init")
        d = config.hidden_dim
        w: dict[str, Tensor] = {}

        def normal(shape, std):
            return ad.parameter(rng.normal(0.0, std, size=shape))

        w["tok_emb"] = normal((config.vocab_size, d), 0.5)
        w["pos_emb"] = normal((config.max_seq_len, d), 0.5)
        for l in range(config.num_layers):
            for name in ("wq", "wk", "wv", "wo"):
                w[f"l{l}.{name}"] = normal((d, d), d ** -0.5)
            w[f"l{l}.w1"] = normal((d, 4 * d), d ** -0.5)
            w[f"l{l}.w2"] = normal((4 * d, d), (4 * d) ** -0.5)
        if config.feature_dim > 0:
            w["feat_proj"] = normal((config.feature_dim, d), config.feature_dim ** -0.5)
        w["head"] = normal((d, config.vocab_size), d ** -0.5)
        return cls(config, w, pretrain_seed=seed)

    def freeze(self):
        for t in self.weights.values():
            t.requires_grad = False
        self.frozen = True

    def unfreeze(self):
        for t in self.weights.values():
            t.requires_grad = True
        self.frozen = False

    def register(self, registry: ParamRegistry, trainable: bool, prefix: str = "model"):
        for name, t in self.weights.items():
            if trainable:
                registry.add_trainable(f"{prefix}.{name}", t)
            else:
                registry.add_frozen(f"{prefix}.{name}", t)

    def copy(self) -> "ToyModel":
        dup = {k: Tensor(v.data.copy(), requires_grad=False)
               for k, v in self.weights.items()}
        m = ToyModel(self.config, dup, pretrain_seed=self.pretrain_seed)
        m.frozen = self.frozen
        return m

    def weight_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.weights.items()}

    # -- persistence -------------------------------------------------------

    def to_state(self) -> dict:
        return {
            "version": MODEL_FORMAT_VERSION,
            "config": {
                "vocab_size": self.config.vocab_size,
                "hidden_dim": self.config.hidden_dim,
                "num_layers": self.config.num_layers,
                "num_heads": self.config.num_heads,
                "max_seq_len": self.config.max_seq_len,
                "feature_dim": self.config.feature_dim,
            },
            "pretrain_seed": self.pretrain_seed,
            "arrays": {k: pack_array(v.data) for k, v in self.weights.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "ToyModel":
        from .errors import CheckpointError

        if state.get("version") != MODEL_FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported model format version: {state.get('version')!r}"
            )
        config = ToyModelConfig(**state["config"])
        weights = {k: Tensor(unpack_array(v)) for k, v in state["arrays"].items()}
        m = cls(config, weights, pretrain_seed=state.get("pretrain_seed"))
        m.frozen = True
        return m


# ---------------------------------------------------------------------------
# forward / loss / generation


def _adapted(w: Tensor, spec: AdaptedForwardSpec, here: bool) -> Tensor:
    if not here:
        return w
    out = w
    if spec.delta_theta is not None:
        out = ad.add(out, spec.delta_theta)
    if spec.delta_delta is not None:
        out = ad.add(out, spec.delta_delta)
    return out


def forward(model: ToyModel, features: np.ndarray | None, tokens,
            spec: AdaptedForwardSpec = BASE_SPEC) -> Tensor:
    """Causal forward pass; returns [seq x vocab] logits.

    A feature vector, when present, occupies exactly one prefix position
    ahead of the tokens.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.intp)
    if tokens.size == 0:
        raise DataError("forward: empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise IndexError("forward: token id outside vocabulary")
    offset = 1 if features is not None else 0
    n = tokens.size + offset
    if n > cfg.max_seq_len:
        raise LengthError(f"sequence length {n} exceeds max {cfg.max_seq_len}")

    w = model.weights
    x = ad.take_rows(w["tok_emb"], tokens)
    if features is not None:
        if cfg.feature_dim == 0:
            raise ConfigError("model has no feature path (feature_dim=0)")
        feats = np.asarray(features, dtype=np.float64).reshape(1, -1)
        if feats.shape[1] != cfg.feature_dim:
            raise DataError(
                f"feature vector has {feats.shape[1]} dims, expected {cfg.feature_dim}"
            )
        prefix = ad.matmul(ad.constant(feats), w["feat_proj"])
        x = ad.vstack([prefix, x])
    x = ad.add(x, ad.take_rows(w["pos_emb"], np.arange(n)))

    dh = cfg.hidden_dim // cfg.num_heads
    scale = 1.0 / np.sqrt(dh)
    pos = spec.position
    for l in range(cfg.num_layers):
        q = ad.matmul(x, _adapted(w[f"l{l}.wq"], spec, pos in ("query", "all")))
        k = ad.matmul(x, _adapted(w[f"l{l}.wk"], spec, pos in ("key", "all")))
        v = ad.matmul(x, _adapted(w[f"l{l}.wv"], spec, pos in ("value", "all")))
        heads = []
        for h in range(cfg.num_heads):
            j0, j1 = h * dh, (h + 1) * dh
            qh, kh, vh = ad.cols(q, j0, j1), ad.cols(k, j0, j1), ad.cols(v, j0, j1)
            scores = ad.mul_const(ad.matmul(qh, ad.transpose(kh)), scale)
            attn = ad.causal_softmax(scores)
            heads.append(ad.matmul(attn, vh))
        o = heads[0] if len(heads) == 1 else ad.hstack(heads)
        y = ad.matmul(o, _adapted(w[f"l{l}.wo"], spec, pos in ("output", "all")))
        x = ad.add(x, y)
        m = ad.matmul(ad.gelu(ad.matmul(x, w[f"l{l}.w1"])), w[f"l{l}.w2"])
        x = ad.add(x, m)
    return ad.matmul(x, w["head"])


@dataclass
class TokenizedInstance:
    """Model-level view of one training example.

    ``prompt`` carries the begin marker, instruction tokens and answer
    delimiter; ``response`` carries the answer tokens and ends with the
    end-of-sequence token.
    """

    prompt: list[int]
    response: list[int]
    features: np.ndarray | None = None


def response_rows(inst: TokenizedInstance) -> tuple[np.ndarray, np.ndarray]:
    """Logit rows that predict response tokens, and those target ids."""
    offset = 1 if inst.features is not None else 0
    start = offset + len(inst.prompt) - 1
    rows = np.arange(start, start + len(inst.response))
    return rows, np.asarray(inst.response, dtype=np.intp)


def ar_loss(model: ToyModel, inst: TokenizedInstance,
            spec: AdaptedForwardSpec = BASE_SPEC) -> Tensor:
    """Cross-entropy over response positions only; context is not a target."""
    if not inst.response:
        raise DataError("ar_loss: instance has an empty response")
    tokens = list(inst.prompt) + list(inst.response)
    logits = forward(model, inst.features, tokens, spec)
    rows, targets = response_rows(inst)
    return ad.softmax_cross_entropy(ad.take_rows(logits, rows), targets)


def generate(model: ToyModel, features: np.ndarray | None, prompt: list[int],
             spec: AdaptedForwardSpec, max_new: int, eos_id: int) -> list[int]:
    """Greedy decode until EOS or max_new tokens; deterministic."""
    offset = 1 if features is not None else 0
    if offset + len(prompt) + max_new > model.config.max_seq_len:
        raise LengthError("prompt plus generation budget exceeds max_seq_len")
    out: list[int] = []
    tokens = list(prompt)
    for _ in range(max_new):
        logits = forward(model, features, tokens, spec)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == eos_id:
            break
        out.append(nxt)
        tokens.append(nxt)
    return out


# ---------------------------------------------------------------------------
# pretraining


def _corpus_loss(model: ToyModel, item) -> Tensor:
    features, tokens = item
    logits = forward(model, features, tokens)
    offset = 1 if features is not None else 0
    n = len(tokens)
    rows = np.arange(offset, offset + n - 1)
    targets = np.asarray(tokens[1:], dtype=np.intp)
    return ad.softmax_cross_entropy(ad.take_rows(logits, rows), targets)


def corpus_mean_loss(model: ToyModel, items) -> float:
    """Mean next-token loss over (features, tokens) items; no gradients."""
    was = {k: t.requires_grad for k, t in model.weights.items()}
    for t in model.weights.values():
        t.requires_grad = False
    try:
        return float(np.mean([_corpus_loss(model, it).item() for it in items]))
    finally:
        for k, t in model.weights.items():
            t.requires_grad = was[k]


def pretrain_base(config: ToyModelConfig, corpus, steps: int, seed: int,
                  lr: float = 0.1, batch_size: int = 16,
                  warmup_ratio: float = 0.03, momentum: float = 0.9) -> ToyModel:
    """Next-token training on a generic mixed corpus; the model comes back
    frozen. Items are (features-or-None, token id list) with length >= 2."""
    if not corpus:
        raise DataError("pretrain_base: empty corpus")
    for _, toks in corpus:
        if len(toks) < 2:
            raise DataError("pretrain_base: corpus item shorter than 2 tokens")
    model = ToyModel.init(config, seed)
    registry = ParamRegistry()
    model.register(registry, trainable=True)
    schedule = LrSchedule(lr, warmup_ratio, steps)
    optimizer = SgdOptimizer(registry, schedule, momentum)
    rng = rng_for(seed, "pretrain-batches")
    for step in range(steps):
        idx = rng.integers(0, len(corpus), size=batch_size)
        loss = ad.mean_of([_corpus_loss(model, corpus[int(i)]) for i in idx])
        ad.backward(loss)
        registry.ensure_grads()
        optimizer.step(step)
    model.freeze()
    return model
