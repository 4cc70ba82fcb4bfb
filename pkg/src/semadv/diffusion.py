"""Noise schedule, forward diffusion and DDPM/DDIM sampling.

A denoiser is any callable ``eps(x_t, t) -> Tensor`` returning a noise
prediction shaped like ``x_t``. Images are (N, C, H, W) tensors in [-1, 1].
Schedule tables carry a sentinel at index 0 (``alpha_bar[0] == 1``) so that
timestep ``t`` indexes them directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

Denoiser = Callable[[Tensor, int], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    mode: str = "ddim"

    def check_t(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not (lo <= t <= self.T):
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                   mode: str = "ddim") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if mode not in ("ddim", "ddpm"):
        raise ValueError(f"unknown schedule mode {mode!r}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.zeros(T + 1) if mode == "ddim" else np.sqrt(beta)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma, mode)


def step_plan(T: int, steps: int) -> list[int]:
    """Evenly spaced, strictly increasing timesteps in [1, T] ending at T."""
    if steps < 1 or steps > T:
        raise ValueError(f"cannot plan {steps} steps over T={T}")
    plan = np.round(np.linspace(T / steps, T, steps)).astype(int)
    plan = sorted(set(int(max(1, p)) for p in plan))
    if len(plan) != steps:
        raise ValueError(f"{steps} steps over T={T} collide after rounding")
    return plan


def check_plan(plan: Sequence[int], schedule: NoiseSchedule) -> None:
    if len(plan) == 0:
        raise ValueError("empty step plan")
    if plan[0] < 1 or plan[-1] > schedule.T:
        raise ValueError(f"plan must lie in [1, {schedule.T}]")
    if any(b <= a for a, b in zip(plan, plan[1:])):
        raise ValueError("plan must be strictly increasing")


def diffuse(x0, t: int, w, schedule: NoiseSchedule) -> Tensor:
    """Closed-form q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) w."""
    x0, w = T._as_tensor(x0), T._as_tensor(w)
    if x0.shape != w.shape:
        raise ShapeError(f"noise shape {w.shape} differs from image shape {x0.shape}")
    schedule.check_t(t)
    ab = schedule.alpha_bar[t]
    return x0 * float(np.sqrt(ab)) + w * float(np.sqrt(1.0 - ab))


def ddpm_train_loss(model: Denoiser, x0, t: int, w, schedule: NoiseSchedule) -> Tensor:
    """Squared L2 norm between injected and predicted noise."""
    x_t = diffuse(x0, t, w, schedule)
    return T.square(T._as_tensor(w) - model(x_t, t)).sum()


def ddpm_sample_step(model: Denoiser, x_t, t: int, z, schedule: NoiseSchedule) -> Tensor:
    schedule.check_t(t)
    x_t = T._as_tensor(x_t)
    a, ab = schedule.alpha[t], schedule.alpha_bar[t]
    eps = model(x_t, t)
    mean = (x_t - eps * float((1 - a) / np.sqrt(1 - ab))) * float(1 / np.sqrt(a))
    sig = schedule.sigma[t]
    if sig == 0:
        return mean
    return mean + T._as_tensor(z) * float(sig)


def _x0_from_eps(x_t: Tensor, eps: Tensor, ab: float) -> Tensor:
    if ab <= 0:
        raise ZeroDivisionError("alpha_bar_t is zero; x0 estimate undefined")
    return (x_t - eps * float(np.sqrt(1 - ab))) * float(1 / np.sqrt(ab))


def estimate_x0(model: Denoiser, x_t, t: int, schedule: NoiseSchedule) -> Tensor:
    schedule.check_t(t)
    x_t = T._as_tensor(x_t)
    return _x0_from_eps(x_t, model(x_t, t), schedule.alpha_bar[t])


def ddim_step(model: Denoiser, x_t, t: int, t_prev: int, z, schedule: NoiseSchedule) -> Tensor:
    schedule.check_t(t)
    schedule.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError("t_prev must be smaller than t")
    x_t = T._as_tensor(x_t)
    ab_prev = schedule.alpha_bar[t_prev]
    sig = schedule.sigma[t]
    dir_var = 1.0 - ab_prev - sig ** 2
    if dir_var < 0:
        raise ValueError(f"negative direction variance at t={t}, t_prev={t_prev}")
    eps = model(x_t, t)
    x0_hat = _x0_from_eps(x_t, eps, schedule.alpha_bar[t])
    out = x0_hat * float(np.sqrt(ab_prev)) + eps * float(np.sqrt(dir_var))
    if sig == 0 or z is None:
        return out
    # noise term written with sigma squared, as in the DDIM update used here
    return out + T._as_tensor(z) * float(sig ** 2)


def sample(model: Denoiser, x_T, plan: Sequence[int], schedule: NoiseSchedule,
           record_tape: bool = False, clip: bool = True, rng=None) -> Tensor:
    """Run DDIM from ``x_T`` (at timestep ``plan[-1]``) down to an image.

    With ``record_tape`` the result is differentiable w.r.t. ``x_T`` and the
    model parameters; otherwise the chain runs without recording.
    """
    check_plan(plan, schedule)
    steps = list(plan)[::-1]
    prevs = steps[1:] + [0]

    def run():
        x = T._as_tensor(x_T)
        for t, tp in zip(steps, prevs):
            z = None
            if schedule.sigma[t] > 0:
                if rng is None:
                    raise ValueError("stochastic schedule requires an rng")
                z = rng.standard_normal(x.shape)
            x = ddim_step(model, x, t, tp, z, schedule)
        return T.clamp(x, -1.0, 1.0) if clip else x

    if record_tape:
        return run()
    with T.no_grad():
        return run()


def ddim_invert(model: Denoiser, x0, plan: Sequence[int], schedule: NoiseSchedule) -> Tensor:
    """Deterministic encoding: run the DDIM recursion upward through ``plan``.

    Each step predicts noise for the current latent at the next timestep and
    re-noises the implied clean image to that level.
    """
    check_plan(plan, schedule)
    with T.no_grad():
        x = T._as_tensor(x0)
        ab_cur = 1.0
        for t in plan:
            eps = model(x, t)
            ab = schedule.alpha_bar[t]
            x0_hat = _x0_from_eps(x, eps, ab_cur)
            x = x0_hat * float(np.sqrt(ab)) + eps * float(np.sqrt(1 - ab))
            ab_cur = ab
        return x
