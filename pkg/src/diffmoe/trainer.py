"""Training loop: diffusion loss plus predictor BCE, AdamW, weight EMA and dynamic thresholds.

Every step draws its randomness from ``default_rng([seed, step])`` so a run
resumed from a checkpoint replays the unbroken run exactly.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .containers import Checkpoint, load_checkpoint, save_checkpoint
from .data import ToyDataset
from .diffusion import DiffusionBatch, make_schedule, regression_target
from .model import Model, ModelConfig, build_model, model_forward
from .predictor import ThresholdSet, build_target, cp_loss
from .tensor import GradTape, Tensor, mean, precision


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    ema_decay: float = 0.9999
    objective: str = "flow"
    routing: str = "diffmoe"
    seed: int = 0
    log_every: int = 100
    ckpt_every: int = 0  # 0 keeps only the final checkpoint
    label_dropout: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    cp_weight: float = 1.0
    threshold_alpha: float = 0.95
    threshold_init: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema decay must lie in [0, 1]")
        if not 0.0 <= self.label_dropout <= 1.0:
            raise ValueError("label dropout must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at step {record['step']}: {record}")
        self.record = record


# ---------------------------------------------------------------------------
# Optimiser and EMA
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data.astype(np.float64)
            if self.weight_decay:
                new *= 1.0 - self.lr * self.weight_decay
            new -= self.lr * update
            p.data = new.astype(p.data.dtype)


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, Tensor], decay: float) -> None:
    for name, p in params.items():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * p.data


# ---------------------------------------------------------------------------
# State and step
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: Model
    ema: dict[str, np.ndarray]
    optimizer: AdamW
    thresholds: ThresholdSet | None
    step: int = 0

    @classmethod
    def fresh(cls, model: Model, cfg: TrainConfig) -> "TrainState":
        mc = model.config
        thresholds = None
        if mc.routing == "diffmoe":
            thresholds = ThresholdSet.dynamic(len(mc.moe_blocks), mc.n_experts, cfg.threshold_init, cfg.threshold_alpha)
        ema = {k: p.data.astype(np.float64) for k, p in model.params.items()}
        opt = AdamW(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        return cls(model, ema, opt, thresholds, 0)

    def to_checkpoint(self, cfg: TrainConfig) -> Checkpoint:
        th = None
        if self.thresholds is not None:
            th = {"values": self.thresholds.to_list(), "shape": list(self.thresholds.shape),
                  "mode": self.thresholds.mode, "alpha": self.thresholds.alpha}
        return Checkpoint(self.model.config.to_dict(), cfg.to_dict(), self.step, self.model.state(),
                          dict(self.ema), dict(self.optimizer.m), dict(self.optimizer.v), th,
                          {"adam_t": self.optimizer.t})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: TrainConfig | None = None) -> "TrainState":
        cfg = cfg or TrainConfig.from_dict(ckpt.train_config)
        mc = ModelConfig.from_dict(ckpt.model_config)
        with precision(cfg.dtype):
            model = Model(mc, {k: Tensor(v, requires_grad=True) for k, v in ckpt.params.items()})
        ema = {k: np.array(v, dtype=np.float64) for k, v in ckpt.ema.items()} or \
            {k: p.data.astype(np.float64) for k, p in model.params.items()}
        opt = AdamW(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay,
                    {k: np.array(v, dtype=np.float64) for k, v in ckpt.adam_m.items()},
                    {k: np.array(v, dtype=np.float64) for k, v in ckpt.adam_v.items()},
                    int(ckpt.extra.get("adam_t", ckpt.step)))
        thresholds = None
        if ckpt.thresholds is not None:
            L, N = ckpt.thresholds["shape"]
            thresholds = ThresholdSet.from_list(ckpt.thresholds["values"], L, N,
                                                ckpt.thresholds["mode"], ckpt.thresholds["alpha"])
        return cls(model, ema, opt, thresholds, ckpt.step)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def draw_batch(dataset: ToyDataset, cfg: TrainConfig, num_classes: int, step: int) -> DiffusionBatch:
    rng = step_rng(cfg.seed, step)
    x0, labels = dataset.batch(rng, cfg.batch_size)
    drop = rng.uniform(size=cfg.batch_size) < cfg.label_dropout
    labels = np.where(drop, num_classes, labels)
    eps = rng.standard_normal(x0.shape)
    t = rng.uniform(0.0, 1.0, size=cfg.batch_size)
    return DiffusionBatch(x0, eps, t, labels)


def compute_losses(model: Model, batch: DiffusionBatch, objective: str):
    """Returns ``(diffusion_loss, cp_loss or None, forward result)``."""
    schedule = make_schedule(objective)
    result = model_forward(model, batch.noisy(schedule), batch.t, batch.labels, training=True)
    diff = result.prediction - Tensor(regression_target(batch, objective))
    loss = mean(diff * diff)
    cpl = None
    if model.config.routing == "diffmoe":
        cpl = cp_loss([build_target(r.decision) for r in result.layers], [r.cp_logits for r in result.layers])
    return loss, cpl, result


def _fmt(x: float) -> float:
    return float(x)


def train_step(state: TrainState, batch: DiffusionBatch, cfg: TrainConfig) -> dict:
    model = state.model
    if model.config.routing != cfg.routing or model.config.objective != cfg.objective:
        raise ValueError(f"model is {model.config.routing}/{model.config.objective}, "
                         f"config asks for {cfg.routing}/{cfg.objective}")
    step = state.step + 1
    loss, cpl, result = compute_losses(model, batch, cfg.objective)
    total = loss if cpl is None else loss + cpl * cfg.cp_weight
    record = {
        "step": step,
        "loss": _fmt(loss.item()),
        "cp_loss": None if cpl is None else _fmt(cpl.item()),
        "capacity": [_fmt(r.stats.capacity) for r in result.layers],
    }
    if not np.isfinite(total.item()):
        record["error"] = "non-finite loss"
        raise TrainingDiverged(record)

    tape = GradTape(total)
    grads_by_id = tape.backward()
    grads = {name: grads_by_id.get(id(p)) for name, p in model.params.items()}
    bad = [n for n, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        record["error"] = "non-finite gradient"
        record["params"] = bad
        raise TrainingDiverged(record)

    if state.thresholds is not None:
        N = model.config.n_experts
        for i, r in enumerate(result.layers):
            state.thresholds.update(i, r.cp_logits, k=max(1, r.pool.size // N))
        record["thresholds"] = state.thresholds.to_list()
    state.optimizer.step(model.params, grads)
    ema_update(state.ema, model.params, cfg.ema_decay)
    state.step = step
    return record


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


class RunLog:
    """Append-only JSON-lines file, one record per step."""

    def __init__(self, path: str | Path | None, mode: str = "w"):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, mode, encoding="utf-8")

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


def _truncate_log(path: Path, last_step: int) -> None:
    """Drop records past ``last_step`` so a resumed run appends a clean tail."""
    if not path.exists():
        return
    keep = [r for r in RunLog.read(path) if r.get("step", 0) <= last_step and "error" not in r]
    with open(path, "w", encoding="utf-8") as f:
        for r in keep:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def train(model_config: ModelConfig, dataset: ToyDataset, cfg: TrainConfig, out_dir: str | Path | None = None, *,
          resume: str | Path | None = None, progress: Callable[[dict], None] | None = None) -> tuple[TrainState, list[dict]]:
    """Run ``cfg.steps`` optimisation steps in total (counting any resumed ones).

    Writes ``runlog.jsonl``, ``timing.jsonl`` and ``ckpt_<step>.bin`` / ``ckpt.bin`` under ``out_dir``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if model_config.routing != cfg.routing or model_config.objective != cfg.objective:
        raise ValueError("model config and train config disagree on routing or objective")
    out = Path(out_dir) if out_dir is not None else None
    with precision(cfg.dtype):
        if resume is not None:
            state = TrainState.from_checkpoint(load_checkpoint(resume), cfg)
            if state.model.config != model_config:
                raise ValueError("checkpoint model config differs from the requested one")
        else:
            state = TrainState.fresh(build_model(model_config, cfg.seed), cfg)
        log_mode = "a" if resume is not None else "w"
        if out is not None and resume is not None:
            _truncate_log(out / "runlog.jsonl", state.step)
        runlog = RunLog(out / "runlog.jsonl" if out is not None else None, log_mode)
        timing = RunLog(out / "timing.jsonl" if out is not None else None, log_mode)

        def checkpoint(tag: str):
            if out is None:
                return
            try:
                save_checkpoint(out / tag, state.to_checkpoint(cfg))
            except OSError as e:
                raise OSError(f"writing checkpoint at step {state.step}: {e}") from e

        try:
            if state.step == 0 and resume is None:
                checkpoint("ckpt_0.bin")
            num_classes = model_config.num_classes
            while state.step < cfg.steps:
                batch = draw_batch(dataset, cfg, num_classes, state.step + 1)
                t0 = time.perf_counter()
                try:
                    record = train_step(state, batch, cfg)
                except TrainingDiverged as e:
                    runlog.append(e.record)
                    raise
                runlog.append(record)
                timing.append({"step": record["step"], "seconds": time.perf_counter() - t0})
                if progress is not None and cfg.log_every and state.step % cfg.log_every == 0:
                    progress(record)
                if cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                    checkpoint(f"ckpt_{state.step}.bin")
            checkpoint("ckpt.bin")
        finally:
            runlog.close()
            timing.close()
    return state, runlog.records


def ema_model(state_or_ckpt, dtype: str = "float64") -> Model:
    """Model carrying the EMA shadow weights, used for every evaluation."""
    if isinstance(state_or_ckpt, TrainState):
        cfg, ema = state_or_ckpt.model.config, state_or_ckpt.ema
    else:
        cfg, ema = ModelConfig.from_dict(state_or_ckpt.model_config), state_or_ckpt.ema
    with precision(dtype):
        return Model(cfg, {k: Tensor(v, requires_grad=False) for k, v in ema.items()})
