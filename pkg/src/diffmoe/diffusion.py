"""Noise schedules, training objectives and samplers.

Time runs from data (t=0) to noise (t=1): ``x_t = alpha(t) x0 + sigma(t) eps``.
Models passed to the samplers are plain callables ``fn(x, t) -> array`` where
``t`` is a float shared by the whole batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, mean

ModelFn = Callable[[np.ndarray, float], np.ndarray]


class NoiseSchedule:
    kind: str

    def alpha(self, t):
        raise NotImplementedError

    def sigma(self, t):
        raise NotImplementedError

    def d_alpha(self, t):
        raise NotImplementedError

    def d_sigma(self, t):
        raise NotImplementedError


class RectifiedFlowSchedule(NoiseSchedule):
    kind = "flow"

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=float)

    def sigma(self, t):
        return np.asarray(t, dtype=float) * 1.0

    def d_alpha(self, t):
        return -np.ones_like(np.asarray(t, dtype=float))

    def d_sigma(self, t):
        return np.ones_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class VPSchedule(NoiseSchedule):
    """Variance-preserving schedule from a linear beta over ``levels`` discrete steps.

    The continuous limit gives ``sqrt(abar(t)) = exp(-levels/2 * (b0 t + (b1-b0) t^2 / 2))``.
    That curve is shifted and rescaled so ``alpha(1) = 0`` exactly, and
    ``sigma = sqrt(1 - alpha^2)``.
    """

    beta_start: float = 1e-4
    beta_end: float = 0.02
    levels: int = 1000
    kind: str = "ddpm"

    def _root_abar(self, t):
        t = np.asarray(t, dtype=float)
        integral = self.levels * (self.beta_start * t + 0.5 * (self.beta_end - self.beta_start) * t * t)
        return np.exp(-0.5 * integral)

    @property
    def _terminal(self) -> float:
        return float(self._root_abar(1.0))

    def alpha(self, t):
        a1 = self._terminal
        return np.clip((self._root_abar(t) - a1) / (1.0 - a1), 0.0, 1.0)

    def sigma(self, t):
        a = self.alpha(t)
        return np.sqrt(np.clip(1.0 - a * a, 0.0, 1.0))

    def d_alpha(self, t):
        t = np.asarray(t, dtype=float)
        rate = 0.5 * self.levels * (self.beta_start + (self.beta_end - self.beta_start) * t)
        return -rate * self._root_abar(t) / (1.0 - self._terminal)

    def d_sigma(self, t):
        a = self.alpha(t)
        return -a * self.d_alpha(t) / self.sigma(t)


def make_schedule(kind: str) -> NoiseSchedule:
    if kind == "flow":
        return RectifiedFlowSchedule()
    if kind == "ddpm":
        return VPSchedule()
    raise ValueError(f"unknown schedule kind {kind!r}")


def _per_sample(coef, x: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=float)
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def forward_diffuse(x0: np.ndarray, eps: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and noise {eps.shape} differ in shape")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    return _per_sample(schedule.alpha(t), x0) * x0 + _per_sample(schedule.sigma(t), eps) * eps


@dataclass
class DiffusionBatch:
    x0: np.ndarray  # [B, S, P]
    eps: np.ndarray
    t: np.ndarray  # [B]
    labels: np.ndarray  # [B], null label allowed

    def noisy(self, schedule: NoiseSchedule) -> np.ndarray:
        return forward_diffuse(self.x0, self.eps, self.t, schedule)


def sample_batch_noise(rng: np.random.Generator, x0: np.ndarray, labels: np.ndarray) -> DiffusionBatch:
    """Per-sample uniform times and standard normal noise."""
    eps = rng.standard_normal(x0.shape)
    t = rng.uniform(0.0, 1.0, size=x0.shape[0])
    return DiffusionBatch(x0, eps, t, labels)


def regression_target(batch: DiffusionBatch, objective: str) -> np.ndarray:
    if objective == "ddpm":
        return batch.eps
    if objective == "flow":
        return batch.eps - batch.x0
    raise ValueError(f"unknown objective {objective!r}")


def _weighted_mse(pred: Tensor, target: np.ndarray, weight: np.ndarray | None) -> Tensor:
    diff = pred - Tensor(target)
    sq = diff * diff
    if weight is not None:
        sq = sq * Tensor(_per_sample(weight, target))
    return mean(sq)


def ddpm_loss(model: Callable[[np.ndarray, np.ndarray], Tensor], batch: DiffusionBatch,
              schedule: NoiseSchedule, weight: Callable[[np.ndarray], np.ndarray] | None = None) -> Tensor:
    """``E[lambda(t) |eps_theta(x_t, t) - eps|^2]`` with the mean taken over every element."""
    pred = model(batch.noisy(schedule), batch.t)
    w = None if weight is None else np.asarray(weight(batch.t), dtype=float)
    return _weighted_mse(pred, batch.eps, w)


def flow_loss(model: Callable[[np.ndarray, np.ndarray], Tensor], batch: DiffusionBatch,
              schedule: NoiseSchedule | None = None) -> Tensor:
    """``E|v_theta(x_t, t) - (eps - x0)|^2`` on the straight path."""
    schedule = schedule or RectifiedFlowSchedule()
    pred = model(batch.noisy(schedule), batch.t)
    return _weighted_mse(pred, batch.eps - batch.x0, None)


def zeta(t, schedule: NoiseSchedule):
    return schedule.d_sigma(t) - schedule.d_alpha(t) / schedule.alpha(t) * schedule.sigma(t)


def eps_to_velocity(x_t: np.ndarray, eps_pred: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """Velocity ``(alpha'/alpha) x_t + zeta eps_theta`` for an epsilon-prediction."""
    a = schedule.alpha(t)
    if np.any(np.asarray(a) <= 0):
        raise ValueError("alpha(t) must be positive to convert an epsilon prediction")
    return _per_sample(schedule.d_alpha(t) / a, x_t) * x_t + _per_sample(zeta(t, schedule), x_t) * eps_pred


def weighting_equivalence_check(x0, eps, t, schedule: NoiseSchedule, eps_pred=None, rng=None) -> float:
    """Relative gap between the flow integrand under the epsilon reparameterisation and ``zeta^2 |eps_theta - eps|^2``.

    Both sides are evaluated independently from ``(x0, eps, t, eps_theta)``.
    """
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    t = float(t)
    a = float(schedule.alpha(t))
    if a <= 0:
        raise ValueError("alpha(t) = 0: the epsilon reparameterisation is undefined")
    if eps_pred is None:
        rng = rng or np.random.default_rng(0)
        eps_pred = rng.standard_normal(eps.shape)
    x_t = forward_diffuse(x0, eps, t, schedule)
    v = eps_to_velocity(x_t, eps_pred, t, schedule)
    target = schedule.d_alpha(t) * x0 + schedule.d_sigma(t) * eps
    lhs = float(np.sum((v - target) ** 2))
    rhs = float(zeta(t, schedule) ** 2 * np.sum((eps_pred - eps) ** 2))
    # squared differences below this are cancellation noise, i.e. both sides are zero
    floor = 64 * np.finfo(float).eps ** 2 * float(np.sum(v * v) + np.sum(target * target))
    if max(lhs, rhs) <= floor:
        return 0.0
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs))


# ---------------------------------------------------------------------------
# Guidance and samplers
# ---------------------------------------------------------------------------


def cfg_combine(v_cond, v_uncond, w: float):
    if w < 0:
        raise ValueError("guidance scale must be non-negative")
    v_cond = np.asarray(v_cond, dtype=float)
    v_uncond = np.asarray(v_uncond, dtype=float)
    if v_cond.shape != v_uncond.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    return v_uncond + w * (v_cond - v_uncond)


def _time_grid(steps: int, t_start: float = 1.0, t_end: float = 0.0) -> np.ndarray:
    if steps < 1:
        raise ValueError("need at least one sampling step")
    return np.linspace(t_start, t_end, steps + 1)


def sample_euler(velocity: ModelFn, x1: np.ndarray, steps: int, t_start: float = 1.0) -> np.ndarray:
    """Integrate ``dx = v dt`` from ``t_start`` down to 0 with explicit Euler."""
    ts = _time_grid(steps, t_start)
    x = np.array(x1, dtype=float)
    for t, t_next in zip(ts[:-1], ts[1:]):
        x = x + (t_next - t) * velocity(x, float(t))
    return x


def sample_heun(velocity: ModelFn, x1: np.ndarray, steps: int, t_start: float = 1.0) -> np.ndarray:
    """Heun's second-order method (explicit trapezoid) on the same grid."""
    ts = _time_grid(steps, t_start)
    x = np.array(x1, dtype=float)
    for t, t_next in zip(ts[:-1], ts[1:]):
        dt = t_next - t
        v0 = velocity(x, float(t))
        x_pred = x + dt * v0
        v1 = velocity(x_pred, float(t_next))
        x = x + 0.5 * dt * (v0 + v1)
    return x


def sample_ddpm(eps_model: ModelFn, x1: np.ndarray, steps: int, schedule: NoiseSchedule,
                rng: np.random.Generator, t_start: float | None = None, clip: float | None = 1.0) -> np.ndarray:
    """Ancestral sampling with the Gaussian posterior ``q(x_s | x_t, x0_hat)``.

    Starts one discrete level below pure noise (``alpha > 0``) so the
    epsilon prediction can be turned into a data estimate; that estimate is
    clipped to ``[-clip, clip]`` because ``1/alpha`` is huge near t=1.
    """
    if t_start is None:
        levels = getattr(schedule, "levels", 1000)
        t_start = 1.0 - 1.0 / levels
    ts = _time_grid(steps, t_start)
    x = np.array(x1, dtype=float)
    for t, s in zip(ts[:-1], ts[1:]):
        a_t, s_t = float(schedule.alpha(t)), float(schedule.sigma(t))
        a_s, s_s = float(schedule.alpha(s)), float(schedule.sigma(s))
        eps_hat = eps_model(x, float(t))
        x0_hat = (x - s_t * eps_hat) / a_t
        if clip is not None:
            x0_hat = np.clip(x0_hat, -clip, clip)
        if s <= 0.0:
            x = x0_hat
            break
        a_ts = a_t / a_s
        var_ts = s_t * s_t - a_ts * a_ts * s_s * s_s
        mean_ = (a_ts * s_s * s_s / (s_t * s_t)) * x + (a_s * var_ts / (s_t * s_t)) * x0_hat
        std = np.sqrt(max(var_ts * s_s * s_s / (s_t * s_t), 0.0))
        x = mean_ + std * rng.standard_normal(x.shape)
    return x
