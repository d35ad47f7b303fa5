"""Training objectives: metrics, consistency/trajectory losses, Sobel structural terms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tt
from .model import NetworkTriplet, PredictorNet, predict
from .schedule import NoiseSchedule, coeff, forward_project
from .tensor import Tensor

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
SOBEL_KERNEL = np.stack([SOBEL_X, SOBEL_X.T])[:, None]  # (2, 1, 3, 3)
# Kx = outer(smooth, diff); applied as two 1-D passes so integer-valued stencils stay exact
SOBEL_TAPS = (np.array([-1.0, 0.0, 1.0], np.float32), np.array([1.0, 2.0, 1.0], np.float32))


@dataclass(frozen=True)
class MetricWeights:
    lambda1: float  # perceptual
    lambda2: float  # Charbonnier

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("metric weights must be non-negative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("metric weights cannot both be zero")


D_I = MetricWeights(0.5, 0.5)
D_II = MetricWeights(1.0, 0.0)


@dataclass(frozen=True)
class LossWeights:
    lambda_ta: float = 0.5
    lambda_dtm: float = 1.6
    lambda_stab: float = 0.032
    lambda_rect: float = 1.0


class PerceptualEncoder:
    """Frozen random-feature stand-in for a learned perceptual distance.

    Three stride-2 3x3 conv stages (8, 16, 32 channels) with SiLU. Features are
    normalized to unit length across channels at every location, as in LPIPS.
    Multi-channel inputs are encoded channel by channel.
    """

    def __init__(self, seed: int = 1234, channels: Sequence[int] = (8, 16, 32)):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.kernels: list[Tensor] = []
        self.biases: list[Tensor] = []
        cin = 1
        for cout in channels:
            k = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            self.kernels.append(Tensor(k.astype(np.float32)))
            self.biases.append(Tensor((rng.standard_normal(cout) * 0.1).astype(np.float32)))
            cin = cout

    def features(self, x: Tensor) -> list[Tensor]:
        n, c, h, w = x.shape
        if c != 1:
            x = tt.reshape(x, (n * c, 1, h, w))
        feats = []
        for k, b in zip(self.kernels, self.biases):
            x = tt.silu(tt.add_bias(tt.conv2d(x, k, stride=2, padding=1), b))
            feats.append(_channel_normalize(x))
        return feats


def _channel_normalize(f: Tensor) -> Tensor:
    norm = tt.sqrt_eps(tt.sum_(tt.square(f), axis=1, keepdims=True))
    return tt.div(f, tt.broadcast_to(norm, f.shape))


def _check_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _per_sample_mean(x: Tensor, batch: int) -> Tensor:
    # mean over every axis but a leading batch axis; rows may hold several channels per sample
    flat = tt.reshape(x, (batch, -1))
    return tt.mean(flat, axis=1)


def charbonnier(a, b, eps: float = 1e-3, per_sample: bool = False) -> Tensor:
    """Mean of ``sqrt((a - b)**2 + eps**2)``."""
    a, b = tt.as_tensor(a), tt.as_tensor(b)
    _check_shapes(a, b)
    v = tt.sqrt_eps(tt.add(tt.square(tt.sub(a, b)), eps * eps))
    return _per_sample_mean(v, a.shape[0]) if per_sample else tt.mean(v)


def percep_lite(a, b, enc: PerceptualEncoder, per_sample: bool = False) -> Tensor:
    """Sum over encoder stages of the mean squared difference of normalized features."""
    a, b = tt.as_tensor(a), tt.as_tensor(b)
    _check_shapes(a, b)
    n = a.shape[0]
    total = None
    for fa, fb in zip(enc.features(a), enc.features(b)):
        sq = tt.square(tt.sub(fa, fb))
        term = _per_sample_mean(sq, n) if per_sample else tt.mean(sq)
        total = term if total is None else tt.add(total, term)
    return total


def metric(a, b, w: MetricWeights, enc: PerceptualEncoder, eps: float = 1e-3, per_sample: bool = False) -> Tensor:
    terms = []
    if w.lambda1:
        terms.append(tt.mul(percep_lite(a, b, enc, per_sample), w.lambda1))
    if w.lambda2:
        terms.append(tt.mul(charbonnier(a, b, eps, per_sample), w.lambda2))
    return terms[0] if len(terms) == 1 else tt.add(terms[0], terms[1])


# ------------------------------------------------------------- stage I losses


def loss_ct(
    triplet: NetworkTriplet,
    x0,
    y0,
    t: int,
    noise,
    schedule: NoiseSchedule,
    enc: PerceptualEncoder,
    weights: MetricWeights = D_I,
    eps: float = 1e-3,
    pred: Tensor | None = None,
) -> Tensor:
    """Consistency loss between the online prediction at ``t`` and the reference at ``t - 1``.

    One noise realization serves both projections. ``pred`` may carry an
    already computed online prediction at ``t``.
    """
    if t < 1:
        raise ValueError("consistency loss needs t >= 1")
    T = schedule.T
    if pred is None:
        pred = predict(triplet.online, forward_project(schedule, x0, y0, t, noise), y0, t, T)
    x_prev = forward_project(schedule, x0, y0, t - 1, noise)
    ref = tt.stop_gradient(predict(triplet.reference, x_prev, y0, t - 1, T))
    return metric(pred, ref, weights, enc, eps)


def loss_tp(net, x0, y0, t, noise, schedule, enc, weights: MetricWeights = D_I, eps: float = 1e-3) -> Tensor:
    """Target-point loss: prediction at ``t`` against the clean image."""
    x_t = forward_project(schedule, x0, y0, t, noise)
    return metric(predict(net, x_t, y0, t, schedule.T), x0, weights, enc, eps)


def ta_noise(rng: np.random.Generator, shape, T: int, dtype=np.float32) -> list[np.ndarray]:
    return [rng.standard_normal(shape).astype(dtype) for _ in range(T)]


def loss_ta(
    net,
    x0,
    y0,
    t: int,
    noise,
    schedule: NoiseSchedule,
    enc: PerceptualEncoder,
    step_noise: Sequence[np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
    weights: MetricWeights = D_I,
    eps: float = 1e-3,
    pred: Tensor | None = None,
    return_terms: bool = False,
):
    """Trajectory alignment: re-project the prediction at every step of 1..T.

    The pair at step ``s`` shares the noise ``step_noise[s - 1]`` (drawn from
    ``rng`` when not given). With ``return_terms`` a list of per-step
    ``(s, pixel, perceptual)`` scalars is returned alongside the loss.
    """
    T = schedule.T
    if pred is None:
        pred = predict(net, forward_project(schedule, x0, y0, t, noise), y0, t, T)
    x0 = tt.as_tensor(x0)
    if step_noise is None:
        step_noise = ta_noise(rng or np.random.default_rng(0), x0.shape, T)
    if not return_terms:
        # every step has the same batch size, so the sum of per-step means is T times the pooled mean
        q_hat = tt.concat([forward_project(schedule, pred, y0, s, step_noise[s - 1]) for s in range(1, T + 1)], axis=0)
        q_true = tt.concat([forward_project(schedule, x0, y0, s, step_noise[s - 1]) for s in range(1, T + 1)], axis=0)
        return tt.mul(metric(q_hat, q_true, weights, enc, eps), float(T))
    total = None
    terms = []
    for s in range(1, T + 1):
        q_hat = forward_project(schedule, pred, y0, s, step_noise[s - 1])
        q_true = forward_project(schedule, x0, y0, s, step_noise[s - 1])
        if return_terms:
            pix = charbonnier(q_hat, q_true, eps)
            per = percep_lite(q_hat, q_true, enc)
            d = tt.add(tt.mul(per, weights.lambda1), tt.mul(pix, weights.lambda2))
            terms.append((s, pix, per))
        else:
            d = metric(q_hat, q_true, weights, enc, eps)
        total = d if total is None else tt.add(total, d)
    return (total, terms) if return_terms else total


# ------------------------------------------------------------ structural ops


def sobel(x, taps: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Horizontal and vertical Sobel responses (zero padding), 1 -> 2 channels.

    Computed separably: the derivative taps along one axis, then the
    smoothing taps along the other. Equal to cross-correlation with
    ``SOBEL_KERNEL``; the split keeps constant and ramp responses exact.
    """
    x = tt.as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"sobel expects a single-channel NCHW batch, got {x.shape}")
    diff, smooth = SOBEL_TAPS if taps is None else taps
    row = lambda v: Tensor(np.asarray(v, np.float32).reshape(1, 1, 1, 3))  # noqa: E731
    col = lambda v: Tensor(np.asarray(v, np.float32).reshape(1, 1, 3, 1))  # noqa: E731
    gx = tt.conv2d(tt.conv2d(x, row(diff), padding=(0, 1)), col(smooth), padding=(1, 0))
    gy = tt.conv2d(tt.conv2d(x, col(diff), padding=(1, 0)), row(smooth), padding=(0, 1))
    return tt.concat([gx, gy], axis=1)


def omega(x_hat0, x0, eps_w: float = 1e-8) -> np.ndarray:
    """Per-sample ``C*S / (||x_hat0 - x0||_1 + eps_w)``; detached."""
    a = np.asarray(x_hat0.data if isinstance(x_hat0, Tensor) else x_hat0, dtype=np.float64)
    b = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    if a.ndim == 3:
        a, b = a[None], b[None]
    cs = a[0].size
    l1 = np.abs(a - b).reshape(a.shape[0], -1).sum(axis=1)
    return cs / (l1 + eps_w)


def _target_pair(triplet, x_hat0, x0, y0, t_prime, noise, schedule):
    T = schedule.T
    x_hat0 = tt.as_tensor(x_hat0).detach()
    fake = predict(triplet.target, forward_project(schedule, x_hat0, y0, t_prime, noise), y0, t_prime, T)
    real = predict(triplet.target, forward_project(schedule, x0, y0, t_prime, noise), y0, t_prime, T)
    return fake, real


def delta_dtm(triplet, x_hat0, x0, y0, t_prime: int, noise, schedule: NoiseSchedule) -> Tensor:
    """Target-network endpoint difference between the fake and real trajectories."""
    if not 1 <= t_prime <= schedule.T:
        raise ValueError(f"t' = {t_prime} outside [1, {schedule.T}]")
    fake, real = _target_pair(triplet, x_hat0, x0, y0, t_prime, noise, schedule)
    return tt.sub(fake, real)


def delta_stab(triplet, x_hat0, x0, y0, t_prime: int, noise, schedule: NoiseSchedule, taps=None) -> Tensor:
    """Sobel-domain version of :func:`delta_dtm` (2 channels)."""
    if not 1 <= t_prime <= schedule.T:
        raise ValueError(f"t' = {t_prime} outside [1, {schedule.T}]")
    fake, real = _target_pair(triplet, x_hat0, x0, y0, t_prime, noise, schedule)
    return tt.sub(sobel(fake, taps), sobel(real, taps))


def _weighted(x_hat0: Tensor, target: Tensor, w: np.ndarray, enc, weights, eps) -> Tensor:
    d = metric(x_hat0, tt.stop_gradient(target), weights, enc, eps, per_sample=True)
    return tt.mean(tt.mul(d, Tensor(w)))


def loss_dtm(triplet, x_hat0, x0, y0, t_prime, noise, schedule, enc,
             weights: MetricWeights = D_II, eps: float = 1e-3, eps_w: float = 1e-8) -> Tensor:
    """``omega * d(x_hat0, sg(x_hat0 - delta))``; gradients reach only ``x_hat0``."""
    x_hat0 = tt.as_tensor(x_hat0)
    delta = delta_dtm(triplet, x_hat0, x0, y0, t_prime, noise, schedule)
    w = omega(x_hat0, x0, eps_w)
    return _weighted(x_hat0, tt.sub(x_hat0, delta), w, enc, weights, eps)


def loss_stab(triplet, x_hat0, x0, y0, t_prime, noise, schedule, enc,
              weights: MetricWeights = D_II, eps: float = 1e-3, eps_w: float = 1e-8,
              channel_mode: str = "mean") -> Tensor:
    """Stability loss on the Sobel discrepancy.

    ``channel_mode="mean"`` folds the two Sobel channels back into image space
    by averaging; ``"duplicate"`` compares a two-channel copy of ``x_hat0``.
    """
    x_hat0 = tt.as_tensor(x_hat0)
    delta = delta_stab(triplet, x_hat0, x0, y0, t_prime, noise, schedule)
    w = omega(x_hat0, x0, eps_w)
    if channel_mode == "mean":
        d = tt.mean(delta, axis=1, keepdims=True)
        return _weighted(x_hat0, tt.sub(x_hat0, d), w, enc, weights, eps)
    if channel_mode == "duplicate":
        both = tt.concat([x_hat0, x_hat0], axis=1)
        return _weighted(both, tt.sub(both, delta), w, enc, weights, eps)
    raise ValueError(f"unknown channel mode {channel_mode!r}")


def loss_rect(net: PredictorNet, x0, y0, t_prime, noise, schedule, enc,
              weights: MetricWeights = D_II, eps: float = 1e-3) -> Tensor:
    """Sobel map of the online prediction on the real trajectory against that of ``x0``."""
    x_t = forward_project(schedule, x0, y0, t_prime, noise)
    pred = predict(net, x_t, y0, t_prime, schedule.T)
    return metric(sobel(pred), sobel(x0), weights, enc, eps)


STAGE_COMPONENTS = {
    1: (("ct", None), ("ta", "lambda_ta")),
    2: (("ct", None), ("dtm", "lambda_dtm"), ("stab", "lambda_stab"), ("rect", "lambda_rect")),
}


def stage_totals(losses: dict, stage: int, lw: LossWeights | None = None) -> Tensor:
    """Weighted stage objective. A component may be absent only if its weight is 0."""
    if stage not in STAGE_COMPONENTS:
        raise ValueError(f"unknown stage {stage}")
    lw = lw or LossWeights()
    total = None
    for key, wname in STAGE_COMPONENTS[stage]:
        weight = 1.0 if wname is None else getattr(lw, wname)
        if key not in losses or losses[key] is None:
            if weight == 0:
                continue
            raise KeyError(f"stage {stage} objective needs the {key!r} loss")
        if weight == 0:
            continue
        term = tt.mul(tt.as_tensor(losses[key]), weight)
        total = term if total is None else tt.add(total, term)
    return total if total is not None else Tensor(0.0)
