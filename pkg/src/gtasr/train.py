"""Two-stage training driver: Adam updates with CSV logging."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .analysis import evaluate_val
from .config import Config
from .data import batch_stream
from .losses import (
    D_I,
    D_II,
    LossWeights,
    PerceptualEncoder,
    loss_ct,
    loss_dtm,
    loss_rect,
    loss_stab,
    loss_ta,
    stage_totals,
)
from .model import (
    ArchConfig,
    NetworkTriplet,
    PredictorNet,
    load_checkpoint,
    predict,
    save_checkpoint,
    sync_due,
)
from .schedule import NoiseSchedule, forward_project

log = logging.getLogger(__name__)

STAGE_LOSSES = {1: ("ct", "ta"), 2: ("ct", "dtm", "stab", "rect")}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        out["adam.step"] = np.array([self.step], dtype=np.float32)
        return out

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        self.m = {k[7:]: a.copy() for k, a in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[7:]: a.copy() for k, a in arrays.items() if k.startswith("adam.v.")}
        self.step = int(arrays["adam.step"][0]) if "adam.step" in arrays else 0


def optimizer_step(params: dict[str, tt.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place Adam update with bias correction."""
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for {sorted(missing)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float32)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m.astype(np.float32), v.astype(np.float32)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(np.float32)


def collect_grads(net: PredictorNet) -> dict[str, np.ndarray]:
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in net.params.items()}


def _iter_rng(cfg: Config, stage: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.get_int("seed"), 100 + stage, i]))


def schedule_for(cfg: Config, stage: int, i: int = 1, total: int = 1) -> NoiseSchedule:
    T = cfg.get_int("schedule.T")
    late = cfg.get_int("schedule.T_late")
    if late and i > total // 2:
        T = late
    n = cfg.get_float("schedule.n_stage1" if stage == 1 else "schedule.n_stage2")
    return NoiseSchedule(T, n)


def _check_lr(cfg: Config) -> float:
    lr = cfg.get_float("train.lr")
    if not lr > 0:
        raise ValueError(f"train.lr must be positive, got {lr}")
    return lr


def loss_weights(cfg: Config) -> LossWeights:
    return LossWeights(
        cfg.get_float("loss.lambda_ta"),
        cfg.get_float("loss.lambda_dtm"),
        cfg.get_float("loss.lambda_stab"),
        cfg.get_float("loss.lambda_rect"),
    )


def arch_for(cfg: Config) -> ArchConfig:
    return ArchConfig(width=cfg.get_int("model.width"), mid_depth=cfg.get_int("model.mid_depth"))


def encoder_for(cfg: Config) -> PerceptualEncoder:
    return PerceptualEncoder(cfg.get_int("loss.percep_seed"))


@dataclass
class TrainResult:
    net: PredictorNet
    history: list[dict]
    checkpoint: Path | None
    triplet: NetworkTriplet | None = None
    adam: AdamState | None = None


class _Logger:
    def __init__(self, out_dir: Path | None, stage: int):
        self.rows: list[dict] = []
        self.fh = None
        self.writer = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self.fh = open(out_dir / "metrics.csv", "w", newline="")
            cols = ["iteration", "t", "loss_total", *[f"loss_{k}" for k in STAGE_LOSSES[stage]], "wall_time"]
            self.writer = csv.DictWriter(self.fh, fieldnames=cols)
            self.writer.writeheader()
        self.t0 = time.perf_counter()

    def add(self, row: dict, write: bool) -> None:
        self.rows.append(row)
        if self.writer is not None and write:
            out = {k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()}
            out["wall_time"] = f"{time.perf_counter() - self.t0:.3f}"
            self.writer.writerow(out)
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _check_finite(value: float, cfg: Config, stage: int, i: int, out_dir: Path | None) -> None:
    if math.isfinite(value):
        return
    info = {"stage": stage, "iteration": i, "seed": cfg.get_int("seed"),
            "batch_start_index": (i - 1) * cfg.get_int("train.batch_size")}
    if out_dir is not None:
        (out_dir / "diverged.json").write_text(json.dumps(info, indent=2))
    raise TrainingDiverged(f"non-finite loss: {info}")


def _finish(net, adam, iteration, stage, out_dir, extra=None) -> Path | None:
    if out_dir is None:
        return None
    arrays = dict(net.state_dict())
    arrays.update(adam.arrays())
    if extra:
        arrays.update(extra)
    path = out_dir / "checkpoint.gtck"
    save_checkpoint(path, arrays, iteration, stage)
    return path


def train_stage1(cfg: Config, out_dir=None, iterations: int | None = None) -> TrainResult:
    """Consistency training plus trajectory alignment for stage I."""
    out_dir = Path(out_dir) if out_dir is not None else None
    n_iter = cfg.get_int("train.iterations_stage1") if iterations is None else iterations
    net = PredictorNet(arch_for(cfg), seed=cfg.get_int("model.init_seed") + cfg.get_int("seed"))
    triplet = NetworkTriplet(net)
    enc = encoder_for(cfg)
    lw = loss_weights(cfg)
    eps = cfg.get_float("loss.charbonnier_eps")
    lr = _check_lr(cfg)
    adam = AdamState(cfg.get_float("train.adam_beta1"), cfg.get_float("train.adam_beta2"),
                     cfg.get_float("train.adam_eps"))
    every = max(cfg.get_int("train.log_every"), 1)
    logger = _Logger(out_dir, 1)
    if out_dir is not None:
        cfg.save(out_dir / "config.txt")
    stream = batch_stream(cfg, "train")
    try:
        for i in range(1, n_iter + 1):
            x0, y0 = next(stream)
            sched = schedule_for(cfg, 1, i, n_iter)
            triplet.set_T(sched.T)
            rng = _iter_rng(cfg, 1, i)
            t = int(rng.integers(1, sched.T + 1))
            noise = rng.standard_normal(x0.shape).astype(np.float32)
            x_t = forward_project(sched, x0, y0, t, noise)
            pred = predict(net, x_t, y0, t)
            triplet.copy_reference()
            losses = {"ct": loss_ct(triplet, x0, y0, t, noise, sched, enc, D_I, eps, pred=pred)}
            if lw.lambda_ta:
                losses["ta"] = loss_ta(net, x0, y0, t, noise, sched, enc, rng=rng, weights=D_I, eps=eps, pred=pred)
            total = stage_totals(losses, 1, lw)
            _check_finite(total.item(), cfg, 1, i, out_dir)
            net.zero_grad()
            tt.backward(total)
            optimizer_step(net.params, collect_grads(net), adam, lr)
            row = {"iteration": i, "t": t, "loss_total": total.item(),
                   "loss_ct": losses["ct"].item(), "loss_ta": losses["ta"].item() if "ta" in losses else 0.0}
            logger.add(row, write=(i % every == 0 or i == n_iter))
    finally:
        logger.close()
    net.zero_grad()
    ckpt = _finish(net, adam, n_iter, 1, out_dir)
    return TrainResult(net, logger.rows, ckpt, triplet, adam)


def load_net(path, cfg: Config) -> tuple[PredictorNet, dict[str, np.ndarray], int, int]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays, iteration, stage = load_checkpoint(path)
    net = PredictorNet(arch_for(cfg))
    net.load_state_dict({k: v for k, v in arrays.items() if k in net.params})
    return net, arrays, iteration, stage


def load_triplet(path, cfg: Config) -> tuple[NetworkTriplet, int]:
    """Online net plus, when the checkpoint carries one, its frozen target. Returns (triplet, stage)."""
    net, arrays, _, stage = load_net(path, cfg)
    triplet = NetworkTriplet(net)
    target = {k[len("target."):]: v for k, v in arrays.items() if k.startswith("target.")}
    if target:
        triplet.target.load_state_dict(target)
    triplet.set_T(schedule_for(cfg, stage).T)
    return triplet, stage


def train_stage2(cfg: Config, init_checkpoint, out_dir=None, iterations: int | None = None,
                 probe=None) -> TrainResult:
    """DTM fine-tuning with the structural Stability and Rectification terms (Stage II).

    ``probe``, if given, is called as ``probe(i, triplet)`` after the target
    sync check of every iteration.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if init_checkpoint is None:
        raise FileNotFoundError("stage II needs a stage I checkpoint")
    net, _, _, _ = load_net(init_checkpoint, cfg)
    n_iter = cfg.get_int("train.iterations_stage2") if iterations is None else iterations
    period = cfg.get_int("train.sync_period")
    if period < 1 or period > max(n_iter, 1):
        raise ValueError(f"train.sync_period={period} must lie in [1, stage II iterations={n_iter}]")
    triplet = NetworkTriplet(net)
    triplet.set_T(schedule_for(cfg, 2, 1, n_iter).T)
    enc = encoder_for(cfg)
    lw = loss_weights(cfg)
    eps = cfg.get_float("loss.charbonnier_eps")
    eps_w = cfg.get_float("loss.omega_eps")
    mode = cfg.get("loss.stab_channel_mode")
    lr = _check_lr(cfg)
    adam = AdamState(cfg.get_float("train.adam_beta1"), cfg.get_float("train.adam_beta2"),
                     cfg.get_float("train.adam_eps"))
    every = max(cfg.get_int("train.log_every"), 1)
    logger = _Logger(out_dir, 2)
    if out_dir is not None:
        cfg.save(out_dir / "config.txt")
    stream = batch_stream(cfg, "train")
    try:
        for i in range(1, n_iter + 1):
            if sync_due(i, period):
                triplet.sync_target()
            if probe is not None:
                probe(i, triplet)
            x0, y0 = next(stream)
            sched = schedule_for(cfg, 2, i, n_iter)
            triplet.set_T(sched.T)
            rng = _iter_rng(cfg, 2, i)
            t = int(rng.integers(1, sched.T + 1))
            noise = rng.standard_normal(x0.shape).astype(np.float32)
            tmin = cfg.get_int("train.tprime_min")
            tmax = cfg.get_int("train.tprime_max") or sched.T
            t_prime = int(rng.integers(tmin, tmax + 1))
            noise_p = rng.standard_normal(x0.shape).astype(np.float32)

            pred = predict(net, forward_project(sched, x0, y0, t, noise), y0, t)
            triplet.copy_reference()
            losses = {"ct": loss_ct(triplet, x0, y0, t, noise, sched, enc, D_I, eps, pred=pred)}
            if lw.lambda_dtm:
                losses["dtm"] = loss_dtm(triplet, pred, x0, y0, t_prime, noise_p, sched, enc, D_II, eps, eps_w)
            if lw.lambda_stab:
                losses["stab"] = loss_stab(triplet, pred, x0, y0, t_prime, noise_p, sched, enc, D_II, eps, eps_w,
                                           channel_mode=mode)
            if lw.lambda_rect:
                losses["rect"] = loss_rect(net, x0, y0, t_prime, noise_p, sched, enc, D_II, eps)
            total = stage_totals(losses, 2, lw)
            _check_finite(total.item(), cfg, 2, i, out_dir)
            net.zero_grad()
            tt.backward(total)
            optimizer_step(net.params, collect_grads(net), adam, lr)
            row = {"iteration": i, "t": t, "loss_total": total.item()}
            for k in STAGE_LOSSES[2]:
                row[f"loss_{k}"] = losses[k].item() if k in losses else 0.0
            logger.add(row, write=(i % every == 0 or i == n_iter))
    finally:
        logger.close()
    net.zero_grad()
    extra = {f"target.{k}": v for k, v in triplet.target.state_dict().items()}
    ckpt = _finish(net, adam, n_iter, 2, out_dir, extra)
    return TrainResult(net, logger.rows, ckpt, triplet, adam)


def write_val_summary(net: PredictorNet, cfg: Config, out_dir, stage: int) -> dict:
    """One-step PSNR/SSIM on the val split, written to ``val.csv``."""
    sched = schedule_for(cfg, stage)
    psnr_v, ssim_v = evaluate_val(net, cfg, sched)
    row = {"run": cfg.get("run.name"), "group": cfg.get("run.group"), "arm": cfg.get("run.arm"),
           "stage": stage, "seed": cfg.get_int("seed"), "psnr": psnr_v, "ssim": ssim_v}
    if out_dir is not None:
        with open(Path(out_dir) / "val.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return row
