"""Toy DiT backbone with dense, token-choice, expert-choice or global-pool MoE layers.

Parameters live in one flat ``name -> Tensor`` dict so checkpointing, EMA and
optimiser state can treat them uniformly.  MoE layers replace the FFN of
every second block (1-indexed even positions).
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .predictor import PredictorParams, ThresholdSet, apply_threshold, cp_forward
from .routing import (
    CapacityStats,
    RoutingDecision,
    TokenPool,
    capacity_of,
    combine,
    compute_affinity,
    forward_capacity,
    per_sample_capacity,
    route_diffmoe_train,
    route_ec,
    route_tc,
    route_topk_per_expert,
    with_indices,
)
from .tensor import Tensor

ROUTINGS = ("dense", "tc", "ec", "diffmoe")
OBJECTIVES = ("ddpm", "flow")

# Full-size reference configurations (32x32x4 latents, patch 2, 1000 classes); counted, never built.
_LATENT = dict(seq_len=256, patch_dim=16, num_classes=1000, freq_dim=256)
REFERENCE_CONFIGS = {
    "S-E16": dict(depth=12, hidden=384, heads=6, n_experts=16, **_LATENT),
    "B-E16": dict(depth=12, hidden=768, heads=12, n_experts=16, **_LATENT),
    "L-Dense": dict(depth=24, hidden=1024, heads=16, n_experts=1, routing="dense", **_LATENT),
    "L-E2": dict(depth=24, hidden=1024, heads=16, n_experts=2, **_LATENT),
    "L-E4": dict(depth=24, hidden=1024, heads=16, n_experts=4, **_LATENT),
    "L-E8": dict(depth=24, hidden=1024, heads=16, n_experts=8, **_LATENT),
    "L-E16": dict(depth=24, hidden=1024, heads=16, n_experts=16, **_LATENT),
}


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    n_experts: int = 4
    routing: str = "diffmoe"
    objective: str = "flow"
    seq_len: int = 16
    patch_dim: int = 4
    num_classes: int = 4
    mlp_ratio: int = 4
    tc_top_k: int = 1
    predictor_hidden: int | None = None
    freq_dim: int = 64
    time_scale: float = 10.0  # t in [0, 1] is scaled by this before the sinusoidal embedding
    init_std: float = 0.02

    def __post_init__(self):
        if self.routing not in ROUTINGS:
            raise ValueError(f"routing must be one of {ROUTINGS}, got {self.routing!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.depth < 1 or self.hidden < 1 or self.heads < 1:
            raise ValueError("depth, hidden and heads must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.freq_dim % 2:
            raise ValueError("freq_dim must be even")
        if self.routing != "dense":
            if self.n_experts < 1:
                raise ValueError("need at least one expert")
            if self.routing == "ec" and self.seq_len % self.n_experts:
                raise ValueError(f"expert choice needs n_experts | seq_len ({self.n_experts} vs {self.seq_len})")
            if self.routing == "tc" and not 1 <= self.tc_top_k <= self.n_experts:
                raise ValueError("tc_top_k out of range")

    @property
    def is_moe(self) -> bool:
        return self.routing != "dense"

    @property
    def moe_blocks(self) -> tuple[int, ...]:
        """0-based indices of blocks whose FFN is an MoE layer."""
        if not self.is_moe:
            return ()
        return tuple(b for b in range(self.depth) if (b + 1) % 2 == 0)

    @property
    def cp_hidden(self) -> int:
        return self.hidden if self.predictor_hidden is None else self.predictor_hidden

    @property
    def null_label(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def with_state(self, state: dict[str, np.ndarray]) -> "Model":
        params = {k: Tensor(np.array(state[k], dtype=float), requires_grad=True) for k in self.params}
        return Model(self.config, params)

    def moe_layer_index(self, block: int) -> int:
        return self.config.moe_blocks.index(block)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Every parameter's shape and initialiser kind, in creation order."""
    D, P, S = config.hidden, config.patch_dim, config.seq_len
    F = config.mlp_ratio * D
    shapes: dict[str, tuple[tuple[int, ...], str]] = {}

    def add(name, shape, init="normal"):
        shapes[name] = (shape, init)

    add("x_embed.w", (P, D), "xavier")
    add("x_embed.b", (D,), "zeros")
    add("pos_embed", (S, D))
    add("t_embed.fc1.w", (config.freq_dim, D))
    add("t_embed.fc1.b", (D,), "zeros")
    add("t_embed.fc2.w", (D, D))
    add("t_embed.fc2.b", (D,), "zeros")
    add("y_embed", (config.num_classes + 1, D))

    def add_ffn(prefix):
        add(f"{prefix}.fc1.w", (D, F), "xavier")
        add(f"{prefix}.fc1.b", (F,), "zeros")
        add(f"{prefix}.fc2.w", (F, D), "xavier")
        add(f"{prefix}.fc2.b", (D,), "zeros")

    for b in range(config.depth):
        add(f"blocks.{b}.adaln.w", (D, 6 * D))
        add(f"blocks.{b}.adaln.b", (6 * D,), "zeros")
        add(f"blocks.{b}.attn.qkv.w", (D, 3 * D), "xavier")
        add(f"blocks.{b}.attn.qkv.b", (3 * D,), "zeros")
        add(f"blocks.{b}.attn.proj.w", (D, D), "xavier")
        add(f"blocks.{b}.attn.proj.b", (D,), "zeros")
        if b in config.moe_blocks:
            N = config.n_experts
            add(f"blocks.{b}.moe.router", (D, N))
            for i in range(N):
                add_ffn(f"blocks.{b}.moe.experts.{i}")
            if config.routing == "diffmoe":
                add(f"blocks.{b}.moe.cp.w1", (D, config.cp_hidden), "xavier")
                add(f"blocks.{b}.moe.cp.w2", (config.cp_hidden, N))
        else:
            add_ffn(f"blocks.{b}.ffn")
    add("final.adaln.w", (D, 2 * D))
    add("final.adaln.b", (2 * D,), "zeros")
    add("final.linear.w", (D, P), "xavier")
    add("final.linear.b", (P,), "zeros")
    return shapes


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Deterministic initialisation; every parameter has its own seeded stream."""
    params = {}
    for name, (shape, init) in parameter_shapes(config).items():
        rng = _param_rng(seed, name)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "xavier":
            bound = math.sqrt(6.0 / (shape[0] + shape[-1]))
            value = rng.uniform(-bound, bound, shape)
        else:
            value = rng.normal(0.0, config.init_std, shape)
        params[name] = Tensor(value, requires_grad=True)
    return Model(config, params)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def timestep_frequencies(t: np.ndarray, dim: int, max_period: float = 10000.0, scale: float = 1000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=float)[:, None] * scale * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def _linear(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def _ffn(p: dict[str, Tensor], prefix: str):
    def run(x: Tensor) -> Tensor:
        return _linear(T.gelu(_linear(x, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")
    return run


def _attention(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    B, S, D = x.shape
    dh = D // heads
    qkv = _linear(x, p, f"{prefix}.qkv").reshape(B, S, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax_axis((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
    return _linear(out, p, f"{prefix}.proj")


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return T.layer_norm(x) * (scale + 1.0) + shift


@dataclass
class MoELayerRecord:
    block: int
    decision: RoutingDecision
    stats: CapacityStats
    pool: TokenPool
    cp_logits: Tensor | None = None


@dataclass
class ForwardResult:
    prediction: Tensor
    layers: list[MoELayerRecord]

    @property
    def capacity(self):
        return forward_capacity([r.stats for r in self.layers])

    @property
    def decisions(self) -> list[RoutingDecision]:
        return [r.decision for r in self.layers]

    def frozen_indices(self) -> list[tuple[np.ndarray, ...]]:
        return [r.decision.indices for r in self.layers]

    def sample_capacity(self, n_samples: int) -> np.ndarray:
        """Per-sample capacity averaged over MoE layers (ones without MoE layers)."""
        if not self.layers:
            return np.ones(n_samples)
        per_layer = [per_sample_capacity(r.decision, r.pool.sample_index, n_samples) for r in self.layers]
        return np.mean(per_layer, axis=0)


def _moe(model: Model, block: int, h: Tensor, t: np.ndarray, *, training: bool, thresholds: ThresholdSet | None,
         inference_routing: str, frozen: tuple[np.ndarray, ...] | None) -> tuple[Tensor, MoELayerRecord]:
    cfg, p = model.config, model.params
    B, S, D = h.shape
    N = cfg.n_experts
    prefix = f"blocks.{block}.moe"
    pool = TokenPool.from_batch(h, t)
    aff = compute_affinity(pool, p[f"{prefix}.router"])
    experts = [_ffn(p, f"{prefix}.experts.{i}") for i in range(N)]
    cp_logits = None
    if cfg.routing == "diffmoe":
        cp_logits = cp_forward(pool, PredictorParams(p[f"{prefix}.cp.w1"], p[f"{prefix}.cp.w2"]))

    if frozen is not None:
        decision = with_indices(aff, frozen)
    elif cfg.routing == "tc":
        decision = route_tc(aff, cfg.tc_top_k)
    elif cfg.routing == "ec":
        decision = route_ec(aff.scores.reshape(B, S, N), S // N)
    elif training or inference_routing == "topk":
        if pool.size % N == 0:
            decision = route_diffmoe_train(aff)
        else:
            decision = route_topk_per_expert(aff, [round(pool.size / N)] * N)
    else:
        if thresholds is None:
            raise ValueError("thresholded inference routing needs a ThresholdSet")
        decision = apply_threshold(cp_logits, thresholds[model.moe_layer_index(block)], aff)

    y = combine(pool.tokens, decision, experts)
    record = MoELayerRecord(block, decision, capacity_of(decision, N, pool.size), pool, cp_logits)
    return pool.unpool(y), record


def model_forward(model: Model, x_t: np.ndarray, t: np.ndarray, labels: np.ndarray, *, training: bool = True,
                  thresholds: ThresholdSet | None = None, inference_routing: str = "threshold",
                  frozen: Sequence[tuple[np.ndarray, ...]] | None = None) -> ForwardResult:
    """Run the backbone on noisy tokens ``[B, S, P]``.

    ``inference_routing`` picks the global-pool rule outside training:
    ``"threshold"`` (predictor-sized) or ``"topk"`` (fixed ``BS/N`` per expert).
    ``frozen`` replays per-layer selections so the discrete routing is held fixed.
    """
    cfg, p = model.config, model.params
    x_t = np.asarray(x_t, dtype=float)
    B, S, P = x_t.shape
    if (S, P) != (cfg.seq_len, cfg.patch_dim):
        raise ValueError(f"expected tokens [B, {cfg.seq_len}, {cfg.patch_dim}], got {x_t.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (B,))
    if cfg.routing == "diffmoe" and not training and inference_routing == "threshold" and thresholds is None:
        raise ValueError("thresholded inference routing needs a ThresholdSet")
    if inference_routing not in ("threshold", "topk"):
        raise ValueError(f"unknown inference routing {inference_routing!r}")

    x = _linear(Tensor(x_t), p, "x_embed") + p["pos_embed"]
    temb = Tensor(timestep_frequencies(t, cfg.freq_dim, scale=cfg.time_scale))
    temb = _linear(T.silu(_linear(temb, p, "t_embed.fc1")), p, "t_embed.fc2")
    c = T.silu(temb + p["y_embed"][labels])

    layers: list[MoELayerRecord] = []
    for b in range(cfg.depth):
        mod = _linear(c, p, f"blocks.{b}.adaln").reshape(B, 6, 1, cfg.hidden)
        shift1, scale1, gate1, shift2, scale2, gate2 = (mod[:, j] for j in range(6))
        x = x + gate1 * _attention(_modulate(x, shift1, scale1), p, f"blocks.{b}.attn", cfg.heads)
        h = _modulate(x, shift2, scale2)
        if b in cfg.moe_blocks:
            fz = None if frozen is None else frozen[len(layers)]
            y, record = _moe(model, b, h, t, training=training, thresholds=thresholds,
                             inference_routing=inference_routing, frozen=fz)
            layers.append(record)
        else:
            y = _ffn(p, f"blocks.{b}.ffn")(h)
        x = x + gate2 * y

    mod = _linear(c, p, "final.adaln").reshape(B, 2, 1, cfg.hidden)
    out = _linear(_modulate(x, mod[:, 0], mod[:, 1]), p, "final.linear")
    return ForwardResult(out, layers)


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

CATEGORIES = ("ffn", "attention", "adaln", "other")


def _category(name: str) -> str:
    # the final layer's modulation counts as "other", as in the reference DiT-L breakdown
    if ".attn." in name:
        return "attention"
    if name.startswith("blocks.") and ".adaln." in name:
        return "adaln"
    if ".ffn." in name or ".moe." in name:
        return "ffn"
    return "other"


def _tally(sizes: dict[str, int]) -> dict[str, int]:
    counts = dict.fromkeys(CATEGORIES, 0)
    routing = expert = 0
    for name, n in sizes.items():
        counts[_category(name)] += n
        if ".moe.router" in name or ".moe.cp." in name:
            routing += n
        elif ".moe.experts." in name:
            expert += n
    counts["total"] = sum(counts[c] for c in CATEGORIES)
    counts["routing"] = routing
    counts["expert"] = expert
    return counts


def count_parameters(model: Model) -> dict[str, int]:
    """Exact counts per category, plus ``total`` and the routing overhead (router + predictor) inside ``ffn``."""
    return _tally({k: p.size for k, p in model.params.items()})


def count_parameters_for(config: ModelConfig) -> dict[str, int]:
    """Same as :func:`count_parameters` from shapes alone, so full-size configs need no allocation."""
    return _tally({k: math.prod(shape) for k, (shape, _) in parameter_shapes(config).items()})


def estimate_activated_parameters(counts: dict[str, int], capacity: float, n_experts: int) -> float:
    """``(1 + C) / (1 + N) * #FFN + #Attention + #AdaLN + #Other``."""
    return (1.0 + capacity) / (1.0 + n_experts) * counts["ffn"] + counts["attention"] + counts["adaln"] + counts["other"]


def exact_activated_parameters(model: Model, capacity: float = 1.0) -> float:
    """Parameters touched per token when each MoE token visits ``capacity`` experts on average.

    Routers and predictors always run; each expert's weights count once per unit of capacity.
    """
    counts = count_parameters(model)
    cfg = model.config
    if not cfg.is_moe:
        return float(counts["total"])
    per_expert = counts["expert"] / (len(cfg.moe_blocks) * cfg.n_experts)
    return counts["total"] - counts["expert"] + capacity * per_expert * len(cfg.moe_blocks)


def dense_equivalent(config: ModelConfig) -> ModelConfig:
    return replace(config, routing="dense")


def copy_dense_into_moe(dense: Model, moe: Model) -> Model:
    """Load dense weights into a single-expert MoE model (FFN -> expert 0)."""
    state = {}
    for name in moe.params:
        src = name
        if ".moe.experts.0." in name:
            src = name.replace(".moe.experts.0.", ".ffn.")
        state[name] = dense.params[src].data if src in dense.params else moe.params[name].data
    return moe.with_state(state)
