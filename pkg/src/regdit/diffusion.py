"""Forward noising, velocity targets and Euler sampling.

Interpolation convention: ``z_t = t * z0 + (1 - t) * eps``, so ``t = 0`` is
pure noise and ``t = 1`` is clean data. Time is clamped below 1 to keep the
``1 / (1 - t)`` factor of the velocity finite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from .exceptions import DimensionError, DomainError, SingularityError

T_MAX_CLAMP = 1.0 - 1e-3
UNCONDITIONAL = -1


@dataclass(frozen=True)
class NoiseSchedule:
    t_max_clamp: float = T_MAX_CLAMP

    def alpha(self, t):
        return t

    def sigma(self, t):
        return 1.0 - t

    def check(self, t: float) -> None:
        if not 0.0 <= t <= self.t_max_clamp:
            raise DomainError(f"t={t} outside [0, {self.t_max_clamp}]")


DEFAULT_SCHEDULE = NoiseSchedule()


@dataclass(frozen=True)
class NoisySample:
    z0: torch.Tensor
    eps: torch.Tensor
    t: float
    z_t: torch.Tensor


@dataclass(frozen=True)
class ConditionInfo:
    """A class id in ``[0, C)`` or :data:`UNCONDITIONAL`."""

    class_id: int = UNCONDITIONAL

    @property
    def unconditional(self) -> bool:
        return self.class_id == UNCONDITIONAL

    def index(self, num_classes: int) -> int:
        """Row of the class-embedding table; the sentinel uses row ``num_classes``."""
        if self.unconditional:
            return num_classes
        if not 0 <= self.class_id < num_classes:
            raise DomainError(f"class id {self.class_id} outside [0, {num_classes})")
        return self.class_id


def noisify(z0: torch.Tensor, eps: torch.Tensor, t: float,
            sched: NoiseSchedule = DEFAULT_SCHEDULE) -> NoisySample:
    if z0.shape != eps.shape:
        raise DimensionError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    sched.check(t)
    z_t = sched.alpha(t) * z0 + sched.sigma(t) * eps
    return NoisySample(z0=z0, eps=eps, t=t, z_t=z_t)


def _check_t(t, t_max_clamp):
    tt = torch.as_tensor(t)
    if bool((tt > t_max_clamp).any()):
        raise SingularityError(f"t={t} is past the clamp {t_max_clamp} of the 1/(1-t) singularity")
    if bool((tt < 0).any()):
        raise DomainError(f"t={t} is negative")


def _time_factor(t, like: torch.Tensor):
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        return (1.0 - t.to(like.dtype)).reshape(-1, *([1] * (like.ndim - 1)))
    return 1.0 - float(t)


def v_target(z0: torch.Tensor, z_t: torch.Tensor, t, t_max_clamp: float = T_MAX_CLAMP):
    """``(z0 - z_t) / (1 - t)``; ``t`` may be a scalar or one value per batch row."""
    _check_t(t, t_max_clamp)
    return (z0 - z_t) / _time_factor(t, z0)


def x_to_v(z0_hat: torch.Tensor, z_t: torch.Tensor, t, t_max_clamp: float = T_MAX_CLAMP):
    """Convert a clean-data prediction to a velocity prediction."""
    _check_t(t, t_max_clamp)
    return (z0_hat - z_t) / _time_factor(t, z0_hat)


def sample_t(generator: torch.Generator, policy: str = "uniform", size: int = 1,
             t_max_clamp: float = T_MAX_CLAMP, dtype=torch.float32) -> torch.Tensor:
    """Draw training timesteps in ``[0, t_max_clamp]``.

    ``uniform`` is uniform on the clamped interval; ``logit_normal`` is
    ``sigmoid(N(0, 1))`` clipped to the clamp.
    """
    if policy == "uniform":
        t = torch.rand(size, generator=generator, dtype=torch.float64) * t_max_clamp
    elif policy in ("logit_normal", "logit-normal"):
        t = torch.sigmoid(torch.randn(size, generator=generator, dtype=torch.float64))
        t = t.clamp(0.0, t_max_clamp)
    else:
        raise DomainError(f"unknown timestep policy {policy!r}")
    return t.to(dtype)


@torch.no_grad()
def euler_sample(model: Callable, cond: torch.Tensor, steps: int,
                 generator: torch.Generator, shape: tuple,
                 t_max_clamp: float = T_MAX_CLAMP,
                 noise: torch.Tensor | None = None,
                 dtype=torch.float32) -> torch.Tensor:
    """Integrate the learned velocity from noise at ``t=0`` to ``t_max_clamp``.

    ``model(z, t, cond)`` returns the clean-data prediction; ``t`` is passed
    as a (B,) tensor. ``cond`` holds one class id per sample
    (:data:`UNCONDITIONAL` allowed).
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    z = torch.randn(shape, generator=generator, dtype=dtype) if noise is None else noise.clone()
    dt = t_max_clamp / steps
    B = z.shape[0]
    for i in range(steps):
        t = i * dt
        tb = torch.full((B,), t, dtype=z.dtype)
        z0_hat = model(z, tb, cond)
        z = z + dt * x_to_v(z0_hat, z, t, t_max_clamp=t_max_clamp)
    return z


def timestep_grid(step: float = 0.1, t_max_clamp: float = T_MAX_CLAMP) -> list[float]:
    n = int(math.floor(t_max_clamp / step + 1e-9))
    grid = [round(i * step, 12) for i in range(n + 1)]
    if grid[-1] < t_max_clamp:
        grid.append(t_max_clamp)
    return grid
