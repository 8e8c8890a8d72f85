"""Generation from a trained model with per-evaluation capacity tracing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import NUM_CLASSES, unpatchify
from .diffusion import make_schedule, sample_ddpm, sample_euler, sample_heun
from .model import Model, model_forward
from .predictor import ThresholdSet
from .tensor import precision

SAMPLERS = ("euler", "heun", "ddpm")


def sampler_matches(objective: str, sampler: str) -> bool:
    """Flow models integrate the ODE; epsilon models use ancestral sampling."""
    return (objective == "ddpm") == (sampler == "ddpm")


@dataclass
class EvalRecord:
    t: float
    capacity: float
    layer_expert: np.ndarray  # [L, N] per-expert capacity, empty for dense
    sample_capacity: np.ndarray  # [n]


@dataclass
class Denoiser:
    """Callable ``(x, t) -> prediction`` that records routing statistics of every call.

    With ``cfg_scale != 1`` the conditional and unconditional copies share one pooled
    forward pass, so both branches compete for the same experts.
    """

    model: Model
    labels: np.ndarray
    thresholds: ThresholdSet | None = None
    cfg_scale: float = 1.0
    inference_routing: str = "threshold"
    trace: list[EvalRecord] = field(default_factory=list)

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        n = x.shape[0]
        guided = self.cfg_scale != 1.0
        if guided:
            xs = np.concatenate([x, x])
            ys = np.concatenate([self.labels, np.full(n, self.model.config.null_label)])
        else:
            xs, ys = x, self.labels
        res = model_forward(self.model, xs, np.full(len(xs), t), ys, training=False,
                            thresholds=self.thresholds, inference_routing=self.inference_routing)
        pred = res.prediction.data.astype(np.float64)
        per_sample = res.sample_capacity(len(xs))
        if guided:
            per_sample = 0.5 * (per_sample[:n] + per_sample[n:])
            pred = pred[n:] + self.cfg_scale * (pred[:n] - pred[n:])
        le = np.array([[float(c) for c in r.stats.expert_capacity] for r in res.layers], dtype=float)
        if not res.layers:
            le = np.zeros((0, 0))
        self.trace.append(EvalRecord(float(t), float(res.capacity), le, per_sample))
        return pred

    @property
    def average_capacity(self) -> float:
        return float(np.mean([r.capacity for r in self.trace])) if self.trace else float("nan")


@dataclass
class SampleRequest:
    n: int = 64
    steps: int = 50
    sampler: str = "euler"
    seed: int = 0
    cfg_scale: float = 1.0
    inference_routing: str = "threshold"

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.n < 1 or self.steps < 1:
            raise ValueError("n and steps must be positive")
        if self.cfg_scale < 0:
            raise ValueError("guidance scale must be non-negative")


@dataclass
class SampleResult:
    images: np.ndarray  # [n, 8, 8]
    labels: np.ndarray
    trace: list[EvalRecord]

    @property
    def average_capacity(self) -> float:
        return float(np.mean([r.capacity for r in self.trace]))

    @property
    def sample_capacity(self) -> np.ndarray:
        return np.mean([r.sample_capacity for r in self.trace], axis=0)


def default_labels(n: int, num_classes: int = NUM_CLASSES) -> np.ndarray:
    return np.arange(n) % num_classes


def generate(model: Model, req: SampleRequest, thresholds: ThresholdSet | None = None,
             labels: np.ndarray | None = None) -> SampleResult:
    cfg = model.config
    if not sampler_matches(cfg.objective, req.sampler):
        raise ValueError(f"sampler {req.sampler!r} does not fit a {cfg.objective!r} model")
    labels = default_labels(req.n, cfg.num_classes) if labels is None else np.asarray(labels)
    rng = np.random.default_rng(req.seed)
    x1 = rng.standard_normal((req.n, cfg.seq_len, cfg.patch_dim))
    den = Denoiser(model, labels, thresholds, req.cfg_scale, req.inference_routing)
    with precision("float64"):
        if req.sampler == "euler":
            x = sample_euler(den, x1, req.steps)
        elif req.sampler == "heun":
            x = sample_heun(den, x1, req.steps)
        else:
            x = sample_ddpm(den, x1, req.steps, make_schedule("ddpm"), rng)
    return SampleResult(unpatchify(x), labels, den.trace)
