"""Trajectory diagnostics and the math verification harness."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import ndimage

from . import tensor as tt
from .losses import (
    PerceptualEncoder,
    charbonnier,
    loss_ct,
    loss_dtm,
    loss_rect,
    loss_stab,
    loss_ta,
    loss_tp,
    omega,
    sobel,
    stage_totals,
)
from .model import ArchConfig, NetworkTriplet, PredictorNet, predict
from .pfode import SamplerConfig, oracle_predictor, sample_multistep, sample_onestep
from .schedule import NoiseSchedule, coeff, drift_residual, forward_project, power_fn

PSNR_SENTINEL = 99.0


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_SENTINEL
    return float(10 * np.log10(1.0 / mse))


def _gauss_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over the valid region of a 7x7 Gaussian (sigma 1.5) window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ValueError("ssim expects a single 2-D image")
    if min(a.shape) < 7:
        raise ValueError("image smaller than the 7x7 window")
    g = _gauss_window()

    def filt(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="constant")[3:-3]
        return ndimage.correlate1d(x, g, axis=1, mode="constant")[:, 3:-3]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def _as_predictor(net, T: int) -> Callable:
    if isinstance(net, PredictorNet):
        return lambda x, y, t: predict(net, x, y, t, T).data
    return net


def evaluate_val(net: PredictorNet, cfg, schedule: NoiseSchedule) -> tuple[float, float]:
    """Mean one-step PSNR and SSIM over the val split (outputs clipped to [0, 1])."""
    from .data import batch_stream

    pred_fn = _as_predictor(net, schedule.T)
    ps, ss = [], []
    seed = cfg.get_int("seed")
    for b, (x0, y0) in enumerate(batch_stream(cfg, "val")):
        out = np.clip(sample_onestep(pred_fn, y0, schedule, seed + 7 * b), 0.0, 1.0)
        for k in range(x0.shape[0]):
            ps.append(psnr(out[k, 0], x0[k, 0]))
            ss.append(ssim(out[k, 0], x0[k, 0]))
    return float(np.mean(ps)), float(np.mean(ss))


def consistency_probe(net, x0, y0, schedule: NoiseSchedule, seed: int = 0) -> list[tuple[int, np.ndarray, float]]:
    """Predictions of the origin from every ``x_t`` built with one fixed noise draw."""
    x0 = np.asarray(x0, dtype=np.float32)
    y0 = np.asarray(y0, dtype=np.float32)
    noise = np.random.default_rng(seed).standard_normal(x0.shape).astype(np.float32)
    pred_fn = _as_predictor(net, schedule.T)
    out = []
    for t in range(1, schedule.T + 1):
        x_t = forward_project(schedule, x0, y0, t, noise).data
        pred = np.asarray(pred_fn(x_t, y0, t))
        out.append((t, pred, psnr(np.clip(pred, 0, 1), x0)))
    return out


@dataclass(frozen=True)
class DecouplingSample:
    instance: int
    t_prime: int
    pixel_mae: float
    structural_mae: float


def decoupling_scatter(
    triplet: NetworkTriplet,
    dataset: Iterable[tuple[np.ndarray, np.ndarray]],
    schedule: NoiseSchedule,
    t_prime: int | None,
    count: int,
    seed: int = 0,
    x_hat_step: int | None = None,
) -> list[DecouplingSample]:
    """Pixel and Sobel-domain MAE between frozen-target endpoints of fake and real trajectories.

    ``x_hat0`` comes from the online net at ``x_hat_step`` (default T, the
    one-step inference state). ``t_prime=None`` draws ``t'`` uniformly per
    instance. Means are over all elements of the respective maps.
    """
    rng = np.random.default_rng(seed)
    T = schedule.T
    ts = T if x_hat_step is None else x_hat_step
    samples: list[DecouplingSample] = []
    for x0, y0 in dataset:
        for k in range(x0.shape[0]):
            if len(samples) >= count:
                return samples
            xk, yk = x0[k:k + 1], y0[k:k + 1]
            noise = rng.standard_normal(xk.shape).astype(np.float32)
            tp = int(rng.integers(1, T + 1)) if t_prime is None else t_prime
            noise_p = rng.standard_normal(xk.shape).astype(np.float32)
            x_hat0 = predict(triplet.online, forward_project(schedule, xk, yk, ts, noise), yk, ts, T).data
            fake = predict(triplet.target, forward_project(schedule, x_hat0, yk, tp, noise_p), yk, tp, T)
            real = predict(triplet.target, forward_project(schedule, xk, yk, tp, noise_p), yk, tp, T)
            pix = float(np.mean(np.abs(fake.data - real.data)))
            struct = float(np.mean(np.abs(sobel(fake).data - sobel(real).data)))
            samples.append(DecouplingSample(len(samples), tp, pix, struct))
    return samples


def triangle_decomposition(triplet, dataset, schedule, count: int, seed: int = 0) -> list[dict]:
    """Per-probe check of ``|S(f'(x_hat)) - S(x0)| <= TermI + TermII`` in L1.

    Term I is the target-network consistency gap and Term II the target bias
    on the real trajectory. Returns one dict per probe including the slack.
    """
    rng = np.random.default_rng(seed)
    T = schedule.T
    rows = []
    for x0, y0 in dataset:
        for k in range(x0.shape[0]):
            if len(rows) >= count:
                return rows
            xk, yk = x0[k:k + 1], y0[k:k + 1]
            t = int(rng.integers(1, T + 1))
            tp = int(rng.integers(1, T + 1))
            noise = rng.standard_normal(xk.shape).astype(np.float32)
            noise_p = rng.standard_normal(xk.shape).astype(np.float32)
            x_hat0 = predict(triplet.online, forward_project(schedule, xk, yk, t, noise), yk, t, T).data
            s_fake = sobel(predict(triplet.target, forward_project(schedule, x_hat0, yk, tp, noise_p), yk, tp, T)).data
            s_real = sobel(predict(triplet.target, forward_project(schedule, xk, yk, tp, noise_p), yk, tp, T)).data
            s_gt = sobel(xk).data
            s_fake, s_real, s_gt = (a.astype(np.float64) for a in (s_fake, s_real, s_gt))
            lhs = float(np.abs(s_fake - s_gt).sum())
            term1 = float(np.abs(s_fake - s_real).sum())
            term2 = float(np.abs(s_real - s_gt).sum())
            rows.append({"t": t, "t_prime": tp, "lhs": lhs, "term1": term1, "term2": term2,
                         "slack": term1 + term2 - lhs})
    return rows


# ------------------------------------------------------------------ verify


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _rand(rng, shape):
    return rng.random(shape).astype(np.float32)


def _tiny_setup(seed: int, size: int = 8, T: int = 5, n: float = 2.5):
    rng = np.random.default_rng(seed)
    arch = ArchConfig(width=4, mid_depth=1)
    net = PredictorNet(arch, seed=seed, T=T)
    triplet = NetworkTriplet(net)
    # push reference/target away from online so the stop-gradient branches are non-trivial
    for p in net.params.values():
        p.data = (p.data + 0.05 * rng.standard_normal(p.shape)).astype(np.float32)
    enc = PerceptualEncoder(seed + 1)
    sched = NoiseSchedule(T, n)
    x0 = _rand(rng, (2, 1, size, size))
    y0 = np.clip(x0 + 0.2 * rng.standard_normal(x0.shape), 0, 1).astype(np.float32)
    noise = rng.standard_normal(x0.shape).astype(np.float32)
    return rng, net, triplet, enc, sched, x0, y0, noise


def _to64(triplet, enc) -> None:
    for m in (triplet.online, triplet.reference, triplet.target):
        for p in m.params.values():
            p.data = p.data.astype(np.float64)
    enc.kernels = [tt.Tensor(k.data.astype(np.float64)) for k in enc.kernels]
    enc.biases = [tt.Tensor(b.data.astype(np.float64)) for b in enc.biases]


def gradient_checks(seed: int = 0, coords: int = 6, h: float = 1e-5) -> dict[str, float]:
    """Worst finite-difference relative error per loss, over sampled parameter coordinates."""
    with tt.precision(np.float64):
        return _gradient_checks(seed, coords, h)


def _gradient_checks(seed, coords, h):
    rng, net, triplet, enc, sched, x0, y0, noise = _tiny_setup(seed)
    _to64(triplet, enc)
    x0, y0, noise = (a.astype(np.float64) for a in (x0, y0, noise))
    sched2 = NoiseSchedule(sched.T, 1.0)
    step_noise = [rng.standard_normal(x0.shape) for _ in range(sched.T)]
    t, tp = 3, 2
    noise_p = rng.standard_normal(x0.shape)
    # frozen second arguments for the stop-gradient losses: computed once, outside the oracle
    x_hat_fixed = predict(net, forward_project(sched2, x0, y0, t, noise), y0, t).data

    def x_hat():
        return predict(net, forward_project(sched2, x0, y0, t, noise), y0, t)

    def frozen(fn):
        # the stop-gradient target is held at its value for the unperturbed parameters
        from .losses import _weighted, delta_dtm, delta_stab, D_II

        w = omega(x_hat_fixed, x0)
        if fn == "dtm":
            tgt = x_hat_fixed - delta_dtm(triplet, x_hat_fixed, x0, y0, tp, noise_p, sched2).data
        else:
            d = delta_stab(triplet, x_hat_fixed, x0, y0, tp, noise_p, sched2).data
            tgt = x_hat_fixed - d.mean(axis=1, keepdims=True)
        return lambda: _weighted(x_hat(), tt.Tensor(tgt), w, enc, D_II, 1e-3)

    cases = {
        "L_CT": lambda: loss_ct(triplet, x0, y0, t, noise, sched, enc),
        "L_TP": lambda: loss_tp(net, x0, y0, t, noise, sched, enc),
        "L_TA": lambda: loss_ta(net, x0, y0, t, noise, sched, enc, step_noise=step_noise),
        "L_DTM": frozen("dtm"),
        "L_Stab": frozen("stab"),
        "L_Rect": lambda: loss_rect(net, x0, y0, tp, noise_p, sched2, enc),
        "forward": lambda: tt.mean(predict(net, x0, y0, t)),
    }
    # the real loss functions must agree with the frozen oracles at the base point
    base_dtm = loss_dtm(triplet, x_hat(), x0, y0, tp, noise_p, sched2, enc).item()
    base_stab = loss_stab(triplet, x_hat(), x0, y0, tp, noise_p, sched2, enc).item()
    out = {}
    for name, fn in cases.items():
        worst = 0.0
        for k, (pname, p) in enumerate(sorted(net.params.items())):
            err = tt.finite_difference_check(lambda _p: fn(), p, h=h, max_coords=min(coords, p.size),
                                             seed=seed + k)
            worst = max(worst, err)
        out[name] = worst
    # autodiff through the real (stop-gradient) losses must match the frozen oracle's gradient
    for name, real_fn, base in (("L_DTM", lambda: loss_dtm(triplet, x_hat(), x0, y0, tp, noise_p, sched2, enc),
                                 base_dtm),
                                ("L_Stab", lambda: loss_stab(triplet, x_hat(), x0, y0, tp, noise_p, sched2, enc),
                                 base_stab)):
        net.zero_grad()
        tt.backward(real_fn())
        g_real = {k: p.grad.copy() for k, p in net.params.items()}
        net.zero_grad()
        tt.backward(cases[name]())
        g_frozen = {k: p.grad.copy() for k, p in net.params.items()}
        net.zero_grad()
        mism = max(float(np.max(np.abs(g_real[k] - g_frozen[k]) / (np.abs(g_frozen[k]) + 1e-6)))
                   for k in g_real)
        out[name] = max(out[name], mism if abs(cases[name]().item() - base) < 1e-5 else np.inf)
    return out


def stop_gradient_partition(seed: int = 0, size: int = 8) -> tuple[bool, str]:
    """One full Stage II objective: reference and target grads must be bitwise zero."""
    rng, net, triplet, enc, sched, x0, y0, noise = _tiny_setup(seed, size=size, n=1.0)
    triplet.reference.set_trainable(True)
    triplet.target.set_trainable(True)
    t, tp = 2, 3
    noise_p = rng.standard_normal(x0.shape).astype(np.float32)
    pred = predict(net, forward_project(sched, x0, y0, t, noise), y0, t)
    losses = {
        "ct": loss_ct(triplet, x0, y0, t, noise, sched, enc, pred=pred),
        "dtm": loss_dtm(triplet, pred, x0, y0, tp, noise_p, sched, enc),
        "stab": loss_stab(triplet, pred, x0, y0, tp, noise_p, sched, enc),
        "rect": loss_rect(net, x0, y0, tp, noise_p, sched, enc),
    }
    tt.backward(stage_totals(losses, 2))
    frozen_ok = all(p.grad is not None and not np.any(p.grad)
                    for m in (triplet.reference, triplet.target) for p in m.params.values())
    online_ok = all(p.grad is not None for p in net.params.values()) and any(
        np.any(p.grad) for p in net.params.values())
    n_frozen = sum(1 for m in (triplet.reference, triplet.target) for p in m.params.values() if p.grad is not None)
    triplet.reference.set_trainable(False)
    triplet.target.set_trainable(False)
    return frozen_ok and online_ok, f"frozen tensors with zero grad buffers: {n_frozen}; online receives grads: {online_ok}"


def verify_math(report_path=None, seed: int = 0, sobel_taps=None) -> tuple[bool, list[Check]]:
    """Run every closed-form check and write a PASS/FAIL report."""
    rng = np.random.default_rng(seed)
    checks: list[Check] = []
    t_start = time.perf_counter()

    def add(name, ok, detail):
        checks.append(Check(name, bool(ok), detail))

    # drift cancellation
    T = 5
    worst = 0.0
    for n in (1.0, 2.5):
        f = power_fn(T, n)
        for t in np.linspace(0.05 * T, 0.95 * T, 50):
            worst = max(worst, abs(drift_residual(f, f, float(t))))
    add("drift_cancellation", worst < 1e-9, f"max |residual| = {worst:.3e} (< 1e-9)")
    r = drift_residual(power_fn(T, 2.0), power_fn(T, 1.0), 0.5 * T)
    add("drift_mismatched", abs(r - 0.5 / T) < 1e-6, f"residual = {r:.9f}, expected {0.5 / T:.9f}")

    # projection-difference identity
    worst = 0.0
    for _ in range(20):
        s = NoiseSchedule(T, float(rng.choice([1.0, 2.5])))
        t = int(rng.integers(0, T + 1))
        a, b, y0 = (_rand(rng, (2, 1, 8, 8)) for _ in range(3))
        eps = rng.standard_normal(a.shape).astype(np.float32)
        lhs = forward_project(s, a, y0, t, eps).data - forward_project(s, b, y0, t, eps).data
        worst = max(worst, float(np.max(np.abs(lhs - (1 - coeff(s, t)) * (a - b)))))
    add("projection_difference", worst < 1e-6, f"max deviation = {worst:.3e} (< 1e-6)")

    # sobel contract
    k = sobel_taps
    # operator linearity is judged in float64; float32 storage alone rounds at ~1e-6 on responses near 8
    worst32 = worst64 = 0.0
    for _ in range(10):
        u, v = rng.random((2, 2, 1, 16, 16))
        a, b = rng.uniform(-2, 2, size=2)
        with tt.precision(np.float64):
            lin = sobel(a * u + b * v, k).data - (a * sobel(u, k).data + b * sobel(v, k).data)
        worst64 = max(worst64, float(np.max(np.abs(lin))))
        u32, v32 = u.astype(np.float32), v.astype(np.float32)
        lin = sobel(a * u32 + b * v32, k).data - (a * sobel(u32, k).data + b * sobel(v32, k).data)
        worst32 = max(worst32, float(np.max(np.abs(lin))))
    add("sobel_linearity", worst64 < 1e-6 and worst32 < 1e-5,
        f"max deviation {worst64:.3e} (float64, < 1e-6), {worst32:.3e} (float32, < 1e-5)")
    ramp = np.tile(np.arange(16, dtype=np.float32), (16, 1))[None, None]
    resp = sobel(ramp, k).data[0, :, 1:-1, 1:-1]
    ok = np.all(resp[0] == 8) and np.all(resp[1] == 0)
    add("sobel_ramp", ok, f"interior responses x in [{resp[0].min()}, {resp[0].max()}], y in [{resp[1].min()}, {resp[1].max()}]")
    worst = 0.0
    for c in rng.random(20):
        const = sobel(np.full((1, 1, 16, 16), c, np.float32), k).data[0, :, 1:-1, 1:-1]
        worst = max(worst, float(np.max(np.abs(const))))
    add("sobel_constant", worst == 0, f"max |interior| over 20 levels = {worst:.3e}")

    # boundary term and per-step triangle inequality (random-init target)
    _, net, triplet, enc, sched, x0, y0, noise = _tiny_setup(seed + 1, size=16, n=1.0)
    x_T = forward_project(sched, x0, y0, sched.T, noise).data
    x_hat_T = x_T  # the fake trajectory is started from the same state
    g_T = sobel(x_hat_T).data - sobel(x_T).data
    add("boundary_gT_zero", not np.any(g_T), "S(x_hat_T) - S(x_T) is bitwise zero")
    rows = triangle_decomposition(triplet, [(x0, y0)] * 25, sched, 50, seed)
    min_slack = min(r["slack"] for r in rows)
    add("triangle_decomposition", min_slack >= -1e-5, f"min slack over {len(rows)} probes = {min_slack:.3e}")

    # oracle sampler exactness
    worst = 0.0
    for i in range(10):
        s = NoiseSchedule(5, 2.5)
        xo, yo = _rand(rng, (1, 1, 8, 8)), _rand(rng, (1, 1, 8, 8))
        for steps in (1, 2, 4, 5):
            out = sample_multistep(oracle_predictor(xo), yo, SamplerConfig(steps, s), seed + i)
            worst = max(worst, float(np.max(np.abs(out - xo))))
    add("oracle_sampler", worst < 1e-5, f"max |out - x0| = {worst:.3e} (< 1e-5)")

    # omega identity
    a, b = _rand(rng, (3, 1, 16, 16)), _rand(rng, (3, 1, 16, 16))
    w = omega(a, b)
    rel = np.max(np.abs(w * np.abs(a.astype(np.float64) - b).reshape(3, -1).sum(1) - 256) / 256)
    add("omega_identity", rel < 1e-4, f"max relative deviation = {rel:.3e}")

    # TA pixel component
    _, net, triplet, enc, sched, x0, y0, noise = _tiny_setup(seed + 2)
    step_noise = [rng.standard_normal(x0.shape).astype(np.float32) for _ in range(sched.T)]
    pred = predict(net, forward_project(sched, x0, y0, 3, noise), y0, 3)
    _, terms = loss_ta(net, x0, y0, 3, noise, sched, enc, step_noise=step_noise, pred=pred, return_terms=True)
    worst = 0.0
    for s_, pix, _per in terms:
        ref = charbonnier((1 - coeff(sched, s_)) * (pred.data - x0), np.zeros_like(x0)).item()
        worst = max(worst, abs(pix.item() - ref))
    add("ta_pixel_component", worst < 1e-5, f"max deviation = {worst:.3e}")

    # stop-gradient partition and gradient fidelity
    ok, detail = stop_gradient_partition(seed)
    add("stop_gradient_partition", ok, detail)
    errs = gradient_checks(seed)
    for name, err in errs.items():
        add(f"gradient_{name}", err < 1e-3, f"max relative error = {err:.3e} (< 1e-3)")

    elapsed = time.perf_counter() - t_start
    add("runtime", elapsed < 60, f"{elapsed:.1f} s (< 60 s)")
    all_ok = all(c.passed for c in checks)
    if report_path is not None:
        lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}" for c in checks]
        lines.append(f"overall: {'PASS' if all_ok else 'FAIL'}")
        Path(report_path).write_text("\n".join(lines) + "\n")
    return all_ok, checks
