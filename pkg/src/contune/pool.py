"""The learnable low-rank increment pool and its composition rules.

A pool holds N (proxy key, low-rank increment) pairs. Instructions are
matched to pool entries by cosine similarity between the frozen surrogate
embedding and the keys; the selected increments are blended into a
per-instance intrinsic increment, while per-task averages of previously
selected increments form the contextual increment behind a stop-gradient
wall. Keys learn only through the alignment loss; factors only through
the model loss.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateInputError
from .util import pack_array, rng_for, unpack_array

log = logging.getLogger(__name__)

_DENOM_EPS = 1e-12


class ProxyIncrementPair:
    """One pool entry: a key vector and the factors of its increment."""

    def __init__(self, key: Tensor, factor_a: Tensor, factor_b: Tensor | None):
        self.key = key
        self.factor_a = factor_a
        # factor_b is None when the pool bypasses the low-rank
        # factorization (no_low_rank ablation): factor_a is then D x D.
        self.factor_b = factor_b

    def increment_value(self) -> np.ndarray:
        if self.factor_b is None:
            return self.factor_a.data.copy()
        return self.factor_a.data @ self.factor_b.data

    def increment_node(self) -> Tensor:
        if self.factor_b is None:
            return self.factor_a
        return ad.matmul(self.factor_a, self.factor_b)


class LowRankPool:
    def __init__(self, pairs: list[ProxyIncrementPair], dims: tuple[int, int, int, int],
                 low_rank: bool = True):
        self.pairs = pairs
        self.num_pairs, self.model_dim, self.rank, self.key_dim = dims
        self.low_rank = low_rank

    @property
    def dims(self):
        return (self.num_pairs, self.model_dim, self.rank, self.key_dim)

    def key_matrix(self) -> np.ndarray:
        return np.stack([p.key.data for p in self.pairs])

    def num_params(self) -> int:
        n, d, r, e = self.dims
        per_pair = (d * d + e) if not self.low_rank else (2 * d * r + e)
        return self.num_pairs * per_pair

    def register(self, registry, prefix: str = "pool"):
        for i, p in enumerate(self.pairs):
            registry.add_trainable(f"{prefix}.key{i}", p.key)
            registry.add_trainable(f"{prefix}.a{i}", p.factor_a)
            if p.factor_b is not None:
                registry.add_trainable(f"{prefix}.b{i}", p.factor_b)

    # -- persistence -------------------------------------------------------

    def to_state(self) -> dict:
        return {
            "dims": list(self.dims),
            "low_rank": self.low_rank,
            "pairs": [
                {
                    "key": pack_array(p.key.data),
                    "a": pack_array(p.factor_a.data),
                    "b": None if p.factor_b is None else pack_array(p.factor_b.data),
                }
                for p in self.pairs
            ],
        }

    @classmethod
    def from_state(cls, state: dict) -> "LowRankPool":
        pairs = []
        for rec in state["pairs"]:
            pairs.append(
                ProxyIncrementPair(
                    ad.parameter(unpack_array(rec["key"])),
                    ad.parameter(unpack_array(rec["a"])),
                    None if rec["b"] is None else ad.parameter(unpack_array(rec["b"])),
                )
            )
        return cls(pairs, tuple(state["dims"]), state["low_rank"])


def init_pool(dims: tuple[int, int, int, int], seed: int, low_rank: bool = True) -> LowRankPool:
    """Fresh pool: zero A factors, Normal(0, 0.02) B factors, unit keys."""
    n, d, r, e = dims
    if min(n, d, r, e) <= 0:
        raise ConfigError("pool dims must all be positive")
    if r > d:
        raise ConfigError(f"rank {r} exceeds model dim {d}")
    rng = rng_for(seed, "pool-init")
    pairs = []
    for i in range(n):
        key = rng.standard_normal(e)
        key /= np.linalg.norm(key)
        if low_rank:
            a = ad.parameter(np.zeros((d, r)))
            b = ad.parameter(rng.normal(0.0, 0.02, size=(r, d)))
        else:
            a = ad.parameter(np.zeros((d, d)))
            b = None
        pairs.append(ProxyIncrementPair(ad.parameter(key), a, b))
    return LowRankPool(pairs, (n, d, r, e), low_rank)


# ---------------------------------------------------------------------------
# selection


def pool_cosines(q: np.ndarray, pool: LowRankPool) -> np.ndarray:
    """cos(k_n, q) for every pool entry."""
    keys = pool.key_matrix()
    key_norms = np.linalg.norm(keys, axis=1)
    qn = float(np.linalg.norm(q))
    if qn <= _DENOM_EPS or (key_norms <= _DENOM_EPS).any():
        raise DegenerateInputError("pool_cosines: zero-norm key or query")
    return (keys @ q) / (key_norms * qn)


def select_top_m(q: np.ndarray, pool: LowRankPool, m: int) -> list[int]:
    """Indices of the m most similar keys, descending; ties by pool index."""
    if m > pool.num_pairs:
        raise ConfigError(f"cannot select {m} of {pool.num_pairs} pairs")
    sims = pool_cosines(q, pool)
    # stable sort on index, then stable sort on -cos: ties stay ascending.
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[:m]]


# ---------------------------------------------------------------------------
# composition


def selection_cos_nodes(q: np.ndarray, pool: LowRankPool, indices: list[int]) -> list[Tensor]:
    """Differentiable cos(q, k_i) nodes for the selected keys; q is constant."""
    qc = ad.constant(q)
    return [ad.cosine_sim(qc, pool.pairs[i].key) for i in indices]


def intrinsic_increment(
    q: np.ndarray,
    pool: LowRankPool,
    indices: list[int],
    *,
    weighting: str = "eq3",
    detach_weights: bool = False,
    cos_nodes: list[Tensor] | None = None,
    p_nodes: dict[int, Tensor] | None = None,
) -> Tensor:
    """Similarity-weighted blend of the selected increments.

    With the default literal weighting the result is
    sum_m cos(q, k_m) P_m / sum_m cos(q, k_m); ``weighting="softmax"``
    replaces the normalized-linear coefficients with softmax ones.
    ``detach_weights`` stops gradient through the coefficients so the
    model loss cannot touch the keys.
    """
    if not indices:
        raise ContractError("intrinsic_increment: empty selection")
    if cos_nodes is None:
        cos_nodes = selection_cos_nodes(q, pool, indices)
    if p_nodes is None:
        p_nodes = {}
    coeffs = [ad.stop_gradient(c) if detach_weights else c for c in cos_nodes]

    if weighting == "eq3":
        denom_val = sum(float(c.data) for c in coeffs)
        if abs(denom_val) <= _DENOM_EPS:
            sims = [round(float(c.data), 6) for c in coeffs]
            raise DegenerateInputError(
                f"intrinsic_increment: cosine weights cancel (cosines {sims})"
            )
        denom = coeffs[0]
        for c in coeffs[1:]:
            denom = ad.add(denom, c)
        weights = [ad.sdiv(c, denom) for c in coeffs]
    elif weighting == "softmax":
        exps = [ad.exp(c) for c in coeffs]
        denom = exps[0]
        for c in exps[1:]:
            denom = ad.add(denom, c)
        weights = [ad.sdiv(c, denom) for c in exps]
    else:
        raise ConfigError(f"unknown intrinsic weighting: {weighting}")

    acc = None
    for w, idx in zip(weights, indices):
        p = p_nodes.get(idx)
        if p is None:
            p = p_nodes[idx] = pool.pairs[idx].increment_node()
        term = ad.smul(w, p)
        acc = term if acc is None else ad.add(acc, term)
    return acc


def alignment_loss(
    q: np.ndarray,
    pool: LowRankPool,
    indices: list[int],
    *,
    cos_nodes: list[Tensor] | None = None,
) -> Tensor:
    """-sum_m cos(q, k_m); descending it pulls the selected keys toward q."""
    if not indices:
        raise ContractError("alignment_loss: empty selection")
    if cos_nodes is None:
        cos_nodes = selection_cos_nodes(q, pool, indices)
    acc = cos_nodes[0]
    for c in cos_nodes[1:]:
        acc = ad.add(acc, c)
    return ad.neg(acc)


# ---------------------------------------------------------------------------
# task traces and contextual composition


class TaskTrace:
    """Which pool entries a task selected, and their average increment."""

    def __init__(self, task_id: int, model_dim: int):
        self.task_id = task_id
        self.model_dim = model_dim
        self.selected_indices: set[int] = set()
        self.selection_counts: dict[int, int] = {}
        self.running_avg = np.zeros((model_dim, model_dim))
        self.snapshot_avg: np.ndarray | None = None
        self.frozen = False

    def average(self) -> np.ndarray:
        return self.snapshot_avg if self.frozen else self.running_avg


def update_trace(trace: TaskTrace, indices: list[int], pool: LowRankPool,
                 weighting: str = "uniform"):
    """Record a selection and refresh the live average over current values."""
    if trace.frozen:
        raise ContractError(f"update_trace: trace {trace.task_id} is frozen")
    trace.selected_indices.update(indices)
    for i in indices:
        trace.selection_counts[i] = trace.selection_counts.get(i, 0) + 1
    if not trace.selected_indices:
        return
    if weighting == "uniform":
        members = sorted(trace.selected_indices)
        stack = [pool.pairs[i].increment_value() for i in members]
        trace.running_avg = np.mean(stack, axis=0)
    elif weighting == "frequency":
        totals = np.zeros((trace.model_dim, trace.model_dim))
        count = 0
        for i in sorted(trace.selection_counts):
            c = trace.selection_counts[i]
            totals += c * pool.pairs[i].increment_value()
            count += c
        trace.running_avg = totals / count
    else:
        raise ConfigError(f"unknown trace weighting: {weighting}")


def freeze_trace(trace: TaskTrace, pool: LowRankPool):
    """Snapshot the live average; the snapshot never changes afterwards."""
    if trace.frozen:
        raise ContractError(f"freeze_trace: trace {trace.task_id} already frozen")
    if not trace.selected_indices:
        log.warning("freezing trace %d with no selections; snapshot is zero",
                    trace.task_id)
    trace.snapshot_avg = trace.running_avg.copy()
    trace.frozen = True


class ContextWeights:
    """Per-task blending weights w_l = sigmoid(raw_l), raw trainable."""

    def __init__(self, raw: Tensor):
        if raw.data.ndim != 1:
            raise ConfigError("context weights must be a 1-D raw vector")
        self.raw = raw

    @classmethod
    def fresh(cls, length: int) -> "ContextWeights":
        return cls(ad.parameter(np.zeros(length)))

    def extended(self) -> "ContextWeights":
        """One more task: append a raw 0 entry, keeping learned values."""
        return ContextWeights(ad.parameter(np.append(self.raw.data, 0.0)))

    def __len__(self):
        return self.raw.data.shape[0]

    def values(self) -> np.ndarray:
        x = self.raw.data
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def contextual_increment(
    weights: ContextWeights | None,
    traces: list[TaskTrace],
    *,
    include_current: bool = True,
    live_avg_node: Tensor | None = None,
) -> Tensor | None:
    """Weighted sum of per-task average increments behind stop-gradient.

    Returns None for a single-task history (the t = 1 guard). Gradient
    flows only into the raw weight parameters: frozen snapshots enter as
    constants and a live average node is stop-gradient wrapped.
    """
    t = len(traces)
    if t == 0:
        raise ContractError("contextual_increment: no traces")
    if t == 1:
        return None
    for trace in traces[:-1]:
        if not trace.frozen:
            raise ContractError(
                f"contextual_increment: historical trace {trace.task_id} not frozen"
            )
    upto = t if include_current else t - 1
    if weights is None or len(weights) < upto:
        raise ContractError("contextual_increment: weight vector shorter than history")
    w = ad.sigmoid(weights.raw)
    acc = None
    for l in range(upto):
        trace = traces[l]
        if not trace.frozen and live_avg_node is not None:
            avg = ad.stop_gradient(live_avg_node)
        else:
            avg = ad.stop_gradient(ad.constant(trace.average()))
        term = ad.smul(ad.pick(w, l), avg)
        acc = term if acc is None else ad.add(acc, term)
    return acc
