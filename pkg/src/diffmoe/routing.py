"""Token-expert affinity, the four routing regimes, and capacity accounting.

All routing works on a pooled ``[BS, D]`` token matrix.  A decision stores,
per expert, the pool rows it processes and the gating weights for those
rows; the gates stay attached to the autodiff graph so the router weights
receive gradient through ``combine``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, concat, matmul, scatter_add_rows, softmax_axis, topk_desc


@dataclass(frozen=True)
class TokenPool:
    """Batch of ``[B, S, D]`` tokens flattened to ``[B*S, D]``.

    ``origin`` has one row per pooled token: (sample index, position, timestep).
    """

    tokens: Tensor
    origin: np.ndarray
    batch_shape: tuple[int, int]

    def __post_init__(self):
        if self.tokens.shape[0] == 0:
            raise ValueError("empty token pool")
        if len(self.origin) != self.tokens.shape[0]:
            raise ValueError("origin must have one entry per pooled token")

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def sample_index(self) -> np.ndarray:
        return self.origin[:, 0].astype(np.int64)

    @classmethod
    def from_batch(cls, x: Tensor, t=None) -> "TokenPool":
        B, S, D = x.shape
        ts = np.zeros(B) if t is None else np.broadcast_to(np.asarray(t, dtype=float), (B,))
        origin = np.stack(
            [np.repeat(np.arange(B), S), np.tile(np.arange(S), B), np.repeat(ts, S)], axis=1
        )
        return cls(x.reshape(B * S, D), origin, (B, S))

    def unpool(self, y: Tensor | None = None) -> Tensor:
        B, S = self.batch_shape
        y = self.tokens if y is None else y
        return y.reshape(B, S, y.shape[-1])


@dataclass(frozen=True)
class AffinityMatrix:
    scores: Tensor  # [BS, N]
    normalized: bool

    @property
    def n_experts(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class RoutingDecision:
    """Per-expert selections over a pool of ``pool_size`` tokens."""

    indices: tuple[np.ndarray, ...]
    gates: tuple[Tensor, ...]
    pool_size: int

    @property
    def n_experts(self) -> int:
        return len(self.indices)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(int(len(ix)) for ix in self.indices)

    @property
    def assignment(self) -> np.ndarray:
        """Binary matrix O, ``[pool_size, N]``."""
        O = np.zeros((self.pool_size, self.n_experts))
        for i, ix in enumerate(self.indices):
            O[ix, i] = 1.0
        return O

    def gate_values(self) -> list[np.ndarray]:
        return [g.data for g in self.gates]


def compute_affinity(pool: TokenPool | Tensor, router_weights: Tensor, normalize: bool = True) -> AffinityMatrix:
    tokens = pool.tokens if isinstance(pool, TokenPool) else pool
    if tokens.shape[-1] != router_weights.shape[0]:
        raise ValueError(f"token width {tokens.shape[-1]} does not match router {router_weights.shape}")
    logits = matmul(tokens, router_weights)
    if normalize:
        return AffinityMatrix(softmax_axis(logits, axis=-1), True)
    return AffinityMatrix(logits, False)


def _stable_desc_order(scores: np.ndarray, axis: int) -> np.ndarray:
    return np.argsort(-scores, axis=axis, kind="stable")


def _decision(scores: Tensor, indices: Sequence[np.ndarray]) -> RoutingDecision:
    gates = tuple(scores[ix, i] for i, ix in enumerate(indices))
    return RoutingDecision(tuple(np.asarray(ix, dtype=np.int64) for ix in indices), gates, scores.shape[0])


def with_indices(aff: AffinityMatrix, indices: Sequence[np.ndarray]) -> RoutingDecision:
    """Rebuild a decision for fixed selections, taking gates from ``aff``.

    Used to hold the discrete selection constant while differentiating.
    """
    if len(indices) != aff.n_experts:
        raise ValueError("one index list per expert required")
    return _decision(aff.scores, indices)


def route_tc(aff: AffinityMatrix, k: int) -> RoutingDecision:
    """Token choice: every token keeps its ``k`` highest-affinity experts."""
    N = aff.n_experts
    if not 1 <= k <= N:
        raise ValueError(f"K={k} out of range for {N} experts")
    top = _stable_desc_order(aff.scores.data, axis=1)[:, :k]
    chosen = np.zeros(aff.scores.shape, dtype=bool)
    np.put_along_axis(chosen, top, True, axis=1)
    return _decision(aff.scores, [np.flatnonzero(chosen[:, i]) for i in range(N)])


def route_ec(scores: Tensor | AffinityMatrix, k_prime: int, batch_size: int | None = None) -> RoutingDecision:
    """Expert choice within each sample: every expert takes ``k_prime`` tokens per sample.

    ``scores`` is ``[B, S, N]``; a pooled affinity matrix plus ``batch_size`` is also accepted.
    Returned indices address the pooled ``[B*S]`` layout.
    """
    if isinstance(scores, AffinityMatrix):
        if batch_size is None:
            raise ValueError("batch_size is required for a pooled affinity matrix")
        BS, N = scores.scores.shape
        flat = scores.scores
        s3 = flat.data.reshape(batch_size, BS // batch_size, N)
    else:
        B, S, N = scores.shape
        flat = scores.reshape(B * S, N)
        s3 = scores.data
    B, S, N = s3.shape
    if not 1 <= k_prime <= S:
        raise ValueError(f"K'={k_prime} out of range for sequence length {S}")
    order = _stable_desc_order(s3, axis=1)[:, :k_prime, :]  # [B, k', N]
    offsets = (np.arange(B) * S)[:, None]
    indices = [np.sort((order[:, :, i] + offsets).reshape(-1)) for i in range(N)]
    return _decision(flat, indices)


def route_diffmoe_train(aff: AffinityMatrix, k_train: int | None = None) -> RoutingDecision:
    """Global-pool routing: each expert takes its top ``BS/N`` tokens across the whole batch."""
    BS, N = aff.scores.shape
    if BS % N:
        raise ValueError(f"pool size {BS} is not divisible by {N} experts")
    k = BS // N if k_train is None else k_train
    if not 1 <= k <= BS:
        raise ValueError(f"K_train={k} out of range for pool size {BS}")
    scores = aff.scores.data
    return _decision(aff.scores, [topk_desc(scores[:, i], k)[0] for i in range(N)])


def route_topk_per_expert(aff: AffinityMatrix, k_per_expert: Sequence[int]) -> RoutingDecision:
    """Each expert ``i`` takes its top ``k_per_expert[i]`` tokens by affinity (zero allowed)."""
    scores = aff.scores.data
    indices = []
    for i, k in enumerate(k_per_expert):
        k = int(k)
        indices.append(topk_desc(scores[:, i], k)[0] if k > 0 else np.zeros(0, dtype=np.int64))
    return _decision(aff.scores, indices)


def route_dense(pool_size: int) -> RoutingDecision:
    """Single expert processing every token with unit gate."""
    ones = Tensor(np.ones(pool_size))
    return RoutingDecision((np.arange(pool_size),), (ones,), pool_size)


def combine(tokens: Tensor, decision: RoutingDecision, experts: Sequence[Callable[[Tensor], Tensor]]) -> Tensor:
    """``y[s] = sum_i gate[s, i] * E_i(x[s])`` over selecting experts; unselected rows stay zero."""
    if len(experts) != decision.n_experts:
        raise ValueError(f"{len(experts)} experts for a decision over {decision.n_experts}")
    BS = tokens.shape[0]
    rows, parts = [], []
    for ix, gate, expert in zip(decision.indices, decision.gates, experts):
        if len(ix) == 0:
            continue
        if ix.min() < 0 or ix.max() >= BS:
            raise IndexError("routing index out of range")
        out = expert(tokens[ix])
        parts.append(out * gate.reshape(-1, 1))
        rows.append(ix)
    if not parts:
        return Tensor(np.zeros(tokens.shape))
    values = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    return scatter_add_rows(BS, np.concatenate(rows), values)


# ---------------------------------------------------------------------------
# Capacity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CapacityStats:
    """Exact token counts for one MoE layer call; capacities are derived on demand."""

    counts: tuple[int, ...]
    n_experts: int
    pool_size: int

    def __post_init__(self):
        if self.pool_size <= 0:
            raise ValueError("capacity needs a non-empty pool")

    @property
    def expert_capacity(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(self.n_experts * k, self.pool_size) for k in self.counts)

    @property
    def capacity(self) -> Fraction:
        return sum(self.expert_capacity, Fraction(0)) / len(self.counts)


def capacity_of(decision: RoutingDecision, n_experts: int | None = None, pool_size: int | None = None) -> CapacityStats:
    N = decision.n_experts if n_experts is None else n_experts
    BS = decision.pool_size if pool_size is None else pool_size
    if BS == 0:
        raise ValueError("capacity needs a non-empty pool")
    return CapacityStats(decision.counts, N, BS)


def forward_capacity(layers: Sequence[CapacityStats]) -> Fraction:
    """Mean of ``C^E`` over layers and experts for one forward pass."""
    if not layers:
        return Fraction(1)
    caps = [c for layer in layers for c in layer.expert_capacity]
    return sum(caps, Fraction(0)) / len(caps)


def average_capacity(trace: Sequence[Fraction | float]) -> Fraction | float:
    """Mean of a per-timestep capacity trace."""
    if not trace:
        raise ValueError("empty capacity trace")
    return sum(trace, Fraction(0) if all(isinstance(c, Fraction) for c in trace) else 0.0) / len(trace)


def per_sample_capacity(decision: RoutingDecision, sample_index: np.ndarray, n_samples: int) -> np.ndarray:
    """Capacity attributable to each sample: ``sum_i N * k_{b,i} / S_b / N``.

    The mean over equal-length samples equals the pooled layer capacity.
    """
    sample_index = np.asarray(sample_index)
    tokens_per_sample = np.bincount(sample_index, minlength=n_samples).astype(float)
    processed = np.zeros(n_samples)
    for ix in decision.indices:
        processed += np.bincount(sample_index[ix], minlength=n_samples)
    return processed / tokens_per_sample
