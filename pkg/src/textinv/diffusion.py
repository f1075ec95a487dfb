"""Noise schedule, forward noising, the denoising loss, DDIM sampling/inversion and guidance.

Timesteps are 1-based: ``t`` in ``[1, T]`` with ``alpha_bar(0) == 1`` meaning a
clean latent. The sampling functions here operate on plain arrays and take an
``eps_fn(x, t) -> eps`` callable so they can drive the trained denoiser or an
analytic mock.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

EpsFn = Callable[[np.ndarray, int], np.ndarray]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray = field(repr=False)
    alphas_cumprod: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at timestep t; t == 0 is the clean latent."""
        if t == 0:
            return 1.0
        self.check_t(t)
        return float(self.alphas_cumprod[t - 1])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def make_schedule(T: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas_cumprod = np.cumprod(1.0 - betas)
    betas.flags.writeable = False
    alphas_cumprod.flags.writeable = False
    return NoiseSchedule(T=T, betas=betas, alphas_cumprod=alphas_cumprod)


def noise_to(z0, alpha_bar, eps):
    """sqrt(a) * z0 + sqrt(1 - a) * eps for arrays or tensors; ``alpha_bar`` broadcasts."""
    a = np.asarray(alpha_bar, dtype=np.float64)
    if isinstance(z0, Tensor) or isinstance(eps, Tensor):
        dt = z0.dtype if isinstance(z0, Tensor) else eps.dtype
        return ag.add(ag.mul(z0, np.sqrt(a).astype(dt)), ag.mul(eps, np.sqrt(1.0 - a).astype(dt)))
    z0 = np.asarray(z0)
    dt = z0.dtype
    return (np.sqrt(a).astype(dt) * z0 + np.sqrt(1.0 - a).astype(dt) * np.asarray(eps, dtype=dt)).astype(dt)


def q_sample(schedule: NoiseSchedule, z0, t, eps):
    """Noise ``z0`` to timestep ``t`` (an int, or one int per batch element)."""
    z_shape = z0.shape
    if tuple(eps.shape) != tuple(z_shape):
        raise ShapeError(f"q_sample: eps shape {eps.shape} != z0 shape {z_shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t_arr.min() < 1 or t_arr.max() > schedule.T:
        raise ScheduleError(f"timestep outside [1, {schedule.T}]: {t_arr}")
    a = schedule.alphas_cumprod[t_arr - 1]
    if np.ndim(t) > 0:
        a = a.reshape((-1,) + (1,) * (len(z_shape) - 1))
    else:
        a = a[0]
    return noise_to(z0, a, eps)


def ldm_loss(eps_model: Callable[[Tensor, np.ndarray], Tensor], schedule: NoiseSchedule,
             z0, t, eps) -> Tensor:
    """Mean squared error between the sampled noise and the model's prediction of it.

    ``eps_model(z_t, t)`` closes over whatever conditioning is in play, so any
    requires-grad leaf inside it (weights or a placeholder embedding) receives
    gradients through this loss.
    """
    z0 = ag.as_tensor(z0)
    eps = ag.as_tensor(eps, dtype=z0.dtype)
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t.size == 1 and z0.shape[0] != 1:
        t = np.full(z0.shape[0], t[0])
    z_t = q_sample(schedule, z0, t, eps)
    pred = eps_model(z_t, t)
    if pred.shape != eps.shape:
        raise ShapeError(f"ldm_loss: prediction {pred.shape} vs noise {eps.shape}")
    return ag.mse(pred, eps)


def cfg_combine(eps_uncond, eps_cond, scale: float):
    """Classifier-free guidance: (1 - s) * uncond + s * cond, which equals u + s (c - u)."""
    eps_uncond = np.asarray(eps_uncond)
    eps_cond = np.asarray(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"cfg_combine: {eps_uncond.shape} vs {eps_cond.shape}")
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    s = np.asarray(scale, dtype=eps_cond.dtype)
    return (1 - s) * eps_uncond + s * eps_cond


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Increasing timesteps (T/steps, 2T/steps, ..., T), rounded to ints."""
    if steps < 1:
        raise ScheduleError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ScheduleError(f"steps ({steps}) exceeds schedule length T={T}")
    ts = np.round(np.arange(1, steps + 1) * (T / steps)).astype(np.int64)
    return ts


def _ddim_move(x: np.ndarray, eps: np.ndarray, a_from: float, a_to: float) -> np.ndarray:
    dt = x.dtype
    x0 = (x - np.sqrt(1.0 - a_from).astype(dt) * eps) / np.sqrt(a_from).astype(dt)
    return (np.sqrt(a_to).astype(dt) * x0 + np.sqrt(1.0 - a_to).astype(dt) * eps).astype(dt)


def ddim_sample_loop(eps_fn: EpsFn, x_T: np.ndarray, schedule: NoiseSchedule, steps: int,
                     callback: Callable | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM from x_T down to the clean latent."""
    ts = ddim_timesteps(schedule.T, steps)
    x = np.array(x_T, copy=True)
    for i in range(len(ts) - 1, -1, -1):
        t = int(ts[i])
        t_prev = int(ts[i - 1]) if i > 0 else 0
        eps = eps_fn(x, t)
        x = _ddim_move(x, eps, schedule.alpha_bar(t), schedule.alpha_bar(t_prev))
        if callback is not None:
            callback(t, x)
    return x


def ddim_invert_loop(eps_fn: EpsFn, z0: np.ndarray, schedule: NoiseSchedule, steps: int,
                     fixed_point_iters: int = 0) -> np.ndarray:
    """Run the DDIM update backwards from a clean latent to x_T.

    The noise estimate for the move ``t_prev -> t`` is evaluated at the current
    point with the destination timestep label, mirroring the sampler's use of
    ``eps(x_t, t)`` for the opposite move. With ``fixed_point_iters > 0`` each
    move is refined by re-evaluating the estimate at the landing point, which
    converges to the x_t whose sampler step lands exactly on the current point.
    """
    if steps == 0:
        return np.array(z0, copy=True)
    if fixed_point_iters < 0:
        raise ValueError(f"fixed_point_iters must be >= 0, got {fixed_point_iters}")
    ts = ddim_timesteps(schedule.T, steps)
    x = np.array(z0, copy=True)
    t_prev = 0
    for t in ts:
        t = int(t)
        a_from, a_to = schedule.alpha_bar(t_prev), schedule.alpha_bar(t)
        nxt = _ddim_move(x, eps_fn(x, t), a_from, a_to)
        for _ in range(fixed_point_iters):
            nxt = _ddim_move(x, eps_fn(nxt, t), a_from, a_to)
        x = nxt
        t_prev = t
    return x


def guided_eps_fn(eps_cond_fn: EpsFn, eps_uncond_fn: EpsFn | None, scale: float) -> EpsFn:
    """Wrap conditional/unconditional predictors into one guided predictor."""
    if scale == 1.0 or eps_uncond_fn is None:
        if eps_uncond_fn is None and scale != 1.0:
            raise ValueError("guidance scale != 1 needs an unconditional predictor")
        return eps_cond_fn

    def fn(x, t):
        return cfg_combine(eps_uncond_fn(x, t), eps_cond_fn(x, t), scale)

    return fn


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 5.0
    unconditional_prompt: str = ""

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
