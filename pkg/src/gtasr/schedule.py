"""Residual-shifting noise schedule and the forward projection operator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, add, as_tensor, mul, sub


@dataclass(frozen=True)
class NoiseSchedule:
    """Power schedule ``alpha_t = sigma_t = (t/T)**n`` over integer steps 0..T."""

    T: int
    n: float

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if not self.n > 0:
            raise ValueError(f"n must be positive, got {self.n}")

    def coeff(self, t: int) -> float:
        return coeff(self, t)


def coeff(s: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= s.T:
        raise ValueError(f"step {t} outside [0, {s.T}]")
    if t == 0:
        return 0.0
    if t == s.T:
        return 1.0
    return float((t / s.T) ** s.n)


def forward_project(s: NoiseSchedule, x0, y0, t: int, noise) -> Tensor:
    """``x0 + a_t (y0 - x0) + a_t * noise``.

    Works on tensors (differentiable through ``x0``) and on plain arrays.
    The caller supplies ``noise`` so it can be shared between projections.
    """
    x0, y0, noise = as_tensor(x0), as_tensor(y0), as_tensor(noise)
    if not (x0.shape == y0.shape == noise.shape):
        raise ValueError(f"shape mismatch: x0 {x0.shape}, y0 {y0.shape}, noise {noise.shape}")
    a = coeff(s, t)
    if a == 0.0:
        return x0 if x0.requires_grad else Tensor(x0.data.copy())
    return add(x0, mul(add(sub(y0, x0), noise), a))


def drift_residual(
    alpha_fn: Callable[[float], float],
    sigma_fn: Callable[[float], float],
    t: float,
    h: float = 1e-5,
) -> float:
    """Coefficient of the residual-prior term in the PF-ODE drift.

    Evaluates ``d(alpha)/dt - d(sigma)/dt * alpha / sigma`` with central
    differences in float64. It vanishes whenever alpha and sigma coincide.
    """
    sig = sigma_fn(t)
    if sig == 0:
        raise ValueError(f"sigma vanishes at t={t}")
    da = (alpha_fn(t + h) - alpha_fn(t - h)) / (2 * h)
    ds = (sigma_fn(t + h) - sigma_fn(t - h)) / (2 * h)
    return float(da - ds * alpha_fn(t) / sig)


def power_fn(T: float, n: float) -> Callable[[float], float]:
    """Continuous ``t -> (t/T)**n`` for drift analysis."""
    return lambda t: float(np.float64(t / T) ** n)
