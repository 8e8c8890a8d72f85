"""Shared test utilities for whole-model gradient checks."""
from __future__ import annotations

import numpy as np

from diffmoe.diffusion import DiffusionBatch, make_schedule, regression_target
from diffmoe.model import Model, ModelConfig, build_model, model_forward
from diffmoe.predictor import build_target, cp_loss
from diffmoe.tensor import Tensor, grad_check, mean

SEEDS = (0, 1, 2)  # seeds of the full-length toy training runs
TINY = dict(depth=2, hidden=8, heads=2, seq_len=4, patch_dim=4, num_classes=3, freq_dim=8, mlp_ratio=2)


def tiny_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


def random_batch(cfg: ModelConfig, rng: np.random.Generator, B: int = 2) -> DiffusionBatch:
    return DiffusionBatch(rng.standard_normal((B, cfg.seq_len, cfg.patch_dim)),
                          rng.standard_normal((B, cfg.seq_len, cfg.patch_dim)),
                          rng.uniform(0.05, 0.95, size=B), rng.integers(0, cfg.num_classes + 1, size=B))


def total_loss(model: Model, batch: DiffusionBatch, frozen=None, part: str = "all") -> tuple[Tensor, object]:
    """Diffusion loss plus predictor loss; ``part`` selects one of the two terms."""
    cfg = model.config
    s = make_schedule(cfg.objective)
    res = model_forward(model, batch.noisy(s), batch.t, batch.labels, training=True, frozen=frozen)
    d = res.prediction - Tensor(regression_target(batch, cfg.objective))
    diff = mean(d * d)
    if cfg.routing != "diffmoe" or part == "diffusion":
        return diff, res
    cpl = cp_loss([build_target(r.decision) for r in res.layers], [r.cp_logits for r in res.layers])
    return (cpl if part == "cp" else diff + cpl), res


def model_grad_error(cfg: ModelConfig, seed: int, per_param: int = 6, part: str = "diffusion") -> float:
    """Max relative FD error over sampled coordinates, selections frozen.

    The predictor reads a detached copy of the hidden state, so finite differences of its loss
    only agree with the tape for predictor weights; ``part="cp"`` restricts coordinates to those.
    """
    rng = np.random.default_rng(seed)
    model = build_model(cfg, seed)
    batch = random_batch(cfg, rng)
    _, res = total_loss(model, batch)
    frozen = res.frozen_indices()
    names = model.parameter_names()
    shapes = [model.params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.cumsum([0] + sizes)
    flat = np.concatenate([model.params[n].data.reshape(-1) for n in names])
    coords = []
    for name, o, n in zip(names, offsets[:-1], sizes):
        if part == "cp" and ".cp." not in name:
            continue
        coords.extend((o + rng.choice(n, size=min(per_param, n), replace=False)).tolist())

    def f(x: Tensor) -> Tensor:
        params = {n: x[int(offsets[i]):int(offsets[i + 1])].reshape(shapes[i]) for i, n in enumerate(names)}
        return total_loss(Model(cfg, params), batch, frozen, part)[0]

    return grad_check(f, flat, h=1e-6, coords=coords)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
