"""Toy-scale experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import default_splits
from .model import ModelConfig
from .predictor import ThresholdSet
from .sampling import SampleRequest, generate
from .tensor import precision
from .trainer import TrainConfig, compute_losses, draw_batch, ema_model, train

# Toy settings: lr and EMA decay scaled for 2000 steps (see configs/toy.cfg).
TOY_TRAIN = TrainConfig(steps=2000, batch_size=64, lr=1e-3, ema_decay=0.995)
TRAILING = 100
EVAL_SEED = 10_000  # batch stream for the fixed evaluation set, disjoint from training seeds
EVAL_BATCHES = 64


@dataclass
class TrendRun:
    routing: str
    seed: int
    final_loss: float
    trailing_loss: float  # mean diffusion loss over the last TRAILING steps
    eval_loss: float  # final weights on a fixed set of EVAL_BATCHES training-style batches
    capacity_avg: float | None  # dynamic-threshold sampling, diffmoe only


def toy_configs(routing: str, seed: int, steps: int = TOY_TRAIN.steps, objective: str = "flow"):
    mc = ModelConfig(routing=routing, objective=objective)
    return mc, replace(TOY_TRAIN, steps=steps, seed=seed, routing=routing, objective=objective)


def train_toy(routing: str, seed: int, steps: int = TOY_TRAIN.steps, out_dir=None, objective: str = "flow"):
    mc, tc = toy_configs(routing, seed, steps, objective)
    dataset, _ = default_splits()
    return train(mc, dataset, tc, out_dir)


def fixed_batch_loss(model, dataset, cfg: TrainConfig, n_batches: int = EVAL_BATCHES, seed: int = EVAL_SEED) -> float:
    """Mean diffusion loss over a fixed stream of batches shaped like the training ones.

    Batches keep the training batch size so the global-pool routing sees the same pool size.
    """
    ecfg = replace(cfg, seed=seed)
    losses = []
    with precision(cfg.dtype):
        for i in range(1, n_batches + 1):
            batch = draw_batch(dataset, ecfg, model.config.num_classes, i)
            losses.append(compute_losses(model, batch, cfg.objective)[0].item())
    return float(np.mean(losses))


def dynamic_capacity(state, n: int = 64, steps: int = 50, seed: int = 0) -> float:
    """Average inference capacity of the EMA model under the learned dynamic thresholds."""
    model = ema_model(state)
    th: ThresholdSet = state.thresholds
    sampler = "ddpm" if model.config.objective == "ddpm" else "euler"
    return generate(model, SampleRequest(n=n, steps=steps, sampler=sampler, seed=seed), th).average_capacity


def trend_run(routing: str, seed: int, steps: int = TOY_TRAIN.steps, out_dir=None) -> TrendRun:
    state, records = train_toy(routing, seed, steps, out_dir)
    losses = np.array([r["loss"] for r in records])
    _, tc = toy_configs(routing, seed, steps)
    evl = fixed_batch_loss(state.model, default_splits()[0], tc)
    cap = dynamic_capacity(state) if routing == "diffmoe" else None
    return TrendRun(routing, seed, float(losses[-1]), float(losses[-TRAILING:].mean()), evl, cap)
