"""Capacity predictor: a per-layer two-layer MLP on detached pool tokens.

It learns, by BCE against realised routing, which experts will process which
tokens.  At inference a per-expert threshold on its probabilities sizes each
expert's selection; the selection itself still ranks by router affinity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .routing import AffinityMatrix, RoutingDecision, TokenPool, route_topk_per_expert
from .tensor import Tensor, _sigmoid_np, bce_with_logits, matmul, silu, stop_gradient

DEFAULT_ALPHA = 0.95
DEFAULT_INIT_THRESHOLD = 0.5


@dataclass
class PredictorParams:
    w1: Tensor  # [D, H]
    w2: Tensor  # [H, N]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, n_experts: int, hidden: int | None = None, std: float = 0.02):
        hidden = dim if hidden is None else hidden
        return cls(
            Tensor(rng.normal(0.0, std, (dim, hidden)), requires_grad=True),
            Tensor(rng.normal(0.0, std, (hidden, n_experts)), requires_grad=True),
        )


def cp_forward(pool: TokenPool | Tensor, params: PredictorParams) -> Tensor:
    """Logits ``silu(sg[x] W1) W2`` of shape ``[BS, N]``."""
    tokens = pool.tokens if isinstance(pool, TokenPool) else pool
    if tokens.shape[-1] != params.w1.shape[0] or params.w1.shape[1] != params.w2.shape[0]:
        raise ValueError(f"predictor shapes {params.w1.shape}, {params.w2.shape} do not fit tokens {tokens.shape}")
    return matmul(silu(matmul(stop_gradient(tokens), params.w1)), params.w2)


def build_target(decision: RoutingDecision) -> np.ndarray:
    return decision.assignment


def cp_loss(targets: Sequence[np.ndarray], logits: Sequence[Tensor]) -> Tensor:
    """Mean BCE over layers, tokens and experts."""
    if len(targets) != len(logits) or not targets:
        raise ValueError("need one target per layer and at least one layer")
    total = None
    for O, z in zip(targets, logits):
        term = bce_with_logits(O, z)
        total = term if total is None else total + term
    return total * (1.0 / len(targets))


def probabilities(logits) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=float)
    return _sigmoid_np(z)


def predicted_counts(logits, thresholds: np.ndarray) -> np.ndarray:
    """Per expert, the number of tokens whose probability exceeds the threshold."""
    p = probabilities(logits)
    return (p > np.asarray(thresholds)[None, :]).sum(axis=0)


def apply_threshold(logits, thresholds: np.ndarray, aff: AffinityMatrix) -> RoutingDecision:
    """Size each expert by the predictor, then fill it with its top tokens by affinity."""
    thresholds = np.asarray(thresholds, dtype=float)
    if thresholds.shape != (aff.n_experts,):
        raise ValueError(f"expected {aff.n_experts} thresholds, got shape {thresholds.shape}")
    return route_topk_per_expert(aff, predicted_counts(logits, thresholds))


def kth_largest_probability(logits, k: int) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=float)
    BS = z.shape[0]
    if not 1 <= k <= BS:
        raise ValueError(f"k={k} out of range for pool size {BS}")
    # k-th largest per column; sigmoid is monotone so rank on logits
    kth = -np.partition(-z, k - 1, axis=0)[k - 1]
    return _sigmoid_np(kth)


def update_dynamic_threshold(logits, tau: np.ndarray, alpha: float = DEFAULT_ALPHA, k: int | None = None) -> np.ndarray:
    """One EMA step of every expert's threshold toward its k-th largest probability.

    ``k`` defaults to ``BS / N``, the per-expert training quota.
    """
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=float)
    BS, N = z.shape
    if k is None:
        k = max(1, BS // N)
    quantile = kth_largest_probability(z, k)
    return alpha * np.asarray(tau, dtype=float) + (1.0 - alpha) * quantile


@dataclass
class ThresholdSet:
    """Thresholds ``[L, N]`` for every expert of every MoE layer."""

    values: np.ndarray
    mode: str = "dynamic"
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float, ndmin=2)
        if self.mode not in ("static", "dynamic"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("thresholds must lie in [0, 1]")

    @classmethod
    def dynamic(cls, n_layers: int, n_experts: int, init: float = DEFAULT_INIT_THRESHOLD, alpha: float = DEFAULT_ALPHA):
        return cls(np.full((n_layers, n_experts), init), "dynamic", alpha)

    @classmethod
    def static(cls, gamma: float, n_layers: int, n_experts: int):
        if not 0 <= gamma < 1:
            raise ValueError("a static threshold must satisfy 0 <= gamma < 1")
        return cls(np.full((n_layers, n_experts), gamma), "static")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.values[layer]

    def update(self, layer: int, logits, k: int | None = None):
        if self.mode != "dynamic":
            raise ValueError("static thresholds are not updated")
        self.values[layer] = update_dynamic_threshold(logits, self.values[layer], self.alpha, k)

    def to_list(self) -> list[float]:
        """Layer-major, expert-minor flat list."""
        return [float(v) for v in self.values.reshape(-1)]

    @classmethod
    def from_list(cls, flat: Iterable[float], n_layers: int, n_experts: int, mode: str = "dynamic", alpha: float = DEFAULT_ALPHA):
        return cls(np.asarray(list(flat), dtype=float).reshape(n_layers, n_experts), mode, alpha)

    def copy(self) -> "ThresholdSet":
        return ThresholdSet(self.values.copy(), self.mode, self.alpha)


class InfeasibleError(ValueError):
    pass


@dataclass
class SweepRow:
    gamma: float
    capacity: float
    quality: float
    feasible: bool = field(default=False)


def interval_search(eval_fn: Callable[[float], tuple[float, float]], grid: Sequence[float]) -> tuple[float, list[SweepRow]]:
    """Grid search over a uniform threshold ``gamma``.

    ``eval_fn(gamma)`` returns ``(quality, average capacity)`` with lower quality
    being better.  Returns the best feasible gamma (capacity <= 1) and the full table.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty threshold grid")
    if any(not 0 <= g < 1 for g in grid):
        raise ValueError("every gamma must satisfy 0 <= gamma < 1")
    rows = []
    for g in grid:
        quality, cap = eval_fn(g)
        rows.append(SweepRow(float(g), float(cap), float(quality), float(cap) <= 1.0))
    feasible = [r for r in rows if r.feasible]
    if not feasible:
        caps = ", ".join(f"{r.gamma:g}->{r.capacity:.4f}" for r in rows)
        raise InfeasibleError(f"no threshold keeps capacity <= 1 (measured: {caps})")
    best = min(feasible, key=lambda r: r.quality)
    return best.gamma, rows
