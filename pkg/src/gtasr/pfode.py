"""Probability-flow ODE velocities and the exact frozen-predictor integrator behind the samplers.

Under ``alpha_t = sigma_t = (t/T)**n`` the PF-ODE reads
``dx/dt = (n/t) (x_t - f(x_t, y0, t))``. With ``f`` held fixed over a step
this is linear in ``x`` and integrates in closed form, so the samplers here
never evaluate the ``n/t`` factor directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .schedule import NoiseSchedule, coeff


class Predictor(Protocol):
    def __call__(self, x_t: np.ndarray, y0: np.ndarray, t: int) -> np.ndarray: ...


@dataclass(frozen=True)
class SamplerConfig:
    steps: int
    schedule: NoiseSchedule

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.steps > self.schedule.T:
            raise ValueError(f"steps {self.steps} exceeds T={self.schedule.T}")


def _data(x) -> np.ndarray:
    return x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else np.asarray(x)


def velocity_predict(x_t, f_pred, t: float, n: float) -> np.ndarray:
    if t <= 0:
        raise ValueError("velocity is singular at t = 0")
    x_t, f_pred = _data(x_t), _data(f_pred)
    return (n / t) * (x_t - f_pred)


def velocity_ideal(x_t, x0, t: float, n: float) -> np.ndarray:
    # same field with the clean image standing in for the prediction
    return velocity_predict(x_t, x0, t, n)


def step_exact(x_t, f_pred, t: int, t_prev: int, n: float) -> np.ndarray:
    """Move from step ``t`` to ``t_prev`` with the prediction frozen.

    ``x_{t_prev} = f + (t_prev/t)**n (x_t - f)``; at ``t_prev = 0`` this is
    ``f`` exactly.
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x_t, f_pred = _data(x_t), _data(f_pred)
    if t_prev == 0:
        return f_pred.copy()
    ratio = (t_prev / t) ** n
    return f_pred + np.asarray(ratio, dtype=f_pred.dtype) * (x_t - f_pred)


def step_grid(T: int, steps: int) -> list[int]:
    """Uniform integer grid from T down to 0 with ``steps`` intervals."""
    grid = np.round(np.linspace(T, 0, steps + 1)).astype(int).tolist()
    return grid


def initial_state(y0: np.ndarray, seed: int) -> np.ndarray:
    """``x_T = y0 + eps`` with a seeded standard normal ``eps``."""
    rng = np.random.default_rng(seed)
    return (y0 + rng.standard_normal(y0.shape).astype(y0.dtype)).astype(y0.dtype)


def sample_multistep(net: Predictor, y0, cfg: SamplerConfig, seed: int) -> np.ndarray:
    y0 = _data(y0)
    x = initial_state(y0, seed)
    grid = step_grid(cfg.schedule.T, cfg.steps)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        f = _data(net(x, y0, t))
        x = step_exact(x, f, t, t_prev, cfg.schedule.n)
    return x


def sample_onestep(net: Predictor, y0, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    y0 = _data(y0)
    x = initial_state(y0, seed)
    return np.array(_data(net(x, y0, schedule.T)))


def oracle_predictor(x0) -> Callable:
    """Predictor that always returns the clean image."""
    x0 = _data(x0)
    return lambda x_t, y0, t: x0


def ideal_state(schedule: NoiseSchedule, x0, y0, noise, t: int) -> np.ndarray:
    """Forward-process state, i.e. the point on the ideal trajectory at step t."""
    a = coeff(schedule, t)
    x0, y0, noise = _data(x0), _data(y0), _data(noise)
    return x0 + a * (y0 - x0 + noise)
