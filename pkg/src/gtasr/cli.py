"""Command-line entry point: gen-data, train, sample, analyze, verify, report."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

log = logging.getLogger("gtasr")

CONFIG_HELP = """\
config file: one key=value per line, '#' starts a comment. Unknown keys are
an error. Flags given on the command line win over the file. Keys and
defaults are listed by `gtasr train --show-defaults`."""

TRAIN_OUTPUTS = """\
outputs in --out:
  metrics.csv      iteration,t,loss_total,loss_<component>...,wall_time
  val.csv          run,group,arm,stage,seed,psnr,ssim (one-step, val split)
  config.txt       the resolved configuration
  checkpoint.gtck  binary checkpoint (magic GTCK, little-endian float32 arrays)
  diverged.json    only if a loss became non-finite (exit status 1)"""

ANALYZE_OUTPUTS = """\
CSV columns:
  consistency  instance,t,psnr         one row per instance and step t=1..T
  decoupling   instance,t_prime,pixel_mae,structural_mae
               MAEs are means over all pixels between the frozen-target
               endpoints of the re-noised prediction and the real state."""

REPORT_OUTPUTS = """\
a run is any directory below RUN_DIR holding metrics.csv. Outputs in --out
(default RUN_DIR/report):
  summary.csv   run,group,arm,stage,seed,iterations,final_loss_total,psnr,ssim
  deltas.csv    group,stage,seed,arm,control,delta_psnr,delta_ssim,sign
                pairs runs with equal (run.group, stage, seed); the arm named
                'control' is the reference for every other arm
  summary.txt   the same tables as aligned text
  loss_curves.png, deltas.png (when pairs exist),
  decoupling.png (when runs hold decoupling.csv)"""


class CommandError(Exception):
    """Operational failure reported with exit status 1."""


# ------------------------------------------------------------------ helpers


def _load_config(path, seed, overrides):
    from .config import Config, parse

    cfg = Config.load(path) if path else Config()
    for item in overrides or []:
        if "=" not in item:
            raise CommandError(f"--set expects key=value, got {item!r}")
        cfg.update(parse(item))
    if seed is not None:
        cfg.set("seed", seed)
    return cfg


def _read_pgm(path) -> np.ndarray:
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise CommandError(f"input image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def _write_pgm(path, img) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    from .data import make_example, split_indices

    cfg = _load_config(args.config, args.seed, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    idx = split_indices(cfg, args.split)
    seed = cfg.get_int("seed")
    rows = []
    for k in range(args.count):
        ex = make_example(seed, args.split, idx.start + k, cfg)
        _write_pgm(out / f"hr_{k:06d}.pgm", ex["hr"])
        _write_pgm(out / f"lr_{k:06d}.pgm", ex["lr"])
        p = ex["params"]
        rows.append([k, ex["seed"], ex["kind"], f"{p.blur_sigma:.6f}", p.scale, f"{p.noise_sigma:.6f}"])
    _write_csv(out / "manifest.txt", ["index", "sample_seed", "kind", "blur_sigma", "scale", "noise_sigma"], rows)
    print(f"wrote {args.count} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    from .config import DEFAULTS
    from .train import TrainingDiverged, train_stage1, train_stage2, write_val_summary

    if args.show_defaults:
        sys.stdout.write("".join(f"{k}={DEFAULTS[k]}\n" for k in sorted(DEFAULTS)))
        return 0
    if args.out is None:
        raise CommandError("train needs --out")
    cfg = _load_config(args.config, args.seed, args.set)
    try:
        if args.stage == 1:
            res = train_stage1(cfg, args.out, iterations=args.iterations)
        else:
            if args.init is None:
                raise CommandError("stage 2 needs --init CKPT (a stage 1 checkpoint)")
            res = train_stage2(cfg, args.init, args.out, iterations=args.iterations)
    except FileNotFoundError as e:
        raise CommandError(str(e)) from e
    except TrainingDiverged as e:
        raise CommandError(str(e)) from e
    row = write_val_summary(res.net, cfg, args.out, args.stage)
    print(f"stage {args.stage}: {len(res.history)} iterations, val psnr {row['psnr']:.3f} dB, "
          f"ssim {row['ssim']:.4f}, checkpoint {res.checkpoint}")
    return 0


def _net_for(args, cfg):
    from .train import load_net

    try:
        net, arrays, _, stage = load_net(args.checkpoint, cfg)
    except FileNotFoundError as e:
        raise CommandError(str(e)) from e
    except ValueError as e:
        raise CommandError(f"{args.checkpoint}: {e}") from e
    return net, arrays, stage


def cmd_sample(args) -> int:
    from .data import bicubic_upsample
    from .model import predict
    from .pfode import SamplerConfig, sample_multistep
    from .train import schedule_for

    cfg = _load_config(args.config, args.seed, args.set)
    net, _, stage = _net_for(args, cfg)
    lr = _read_pgm(args.input)
    y0 = np.clip(bicubic_upsample(lr, args.scale), 0, 1).astype(np.float32)
    if y0.shape[0] % 2 or y0.shape[1] % 2:
        raise CommandError(f"upsampled size {y0.shape} must be even")
    sched = schedule_for(cfg, stage)
    net.T = sched.T
    if not 1 <= args.steps <= sched.T:
        raise CommandError(f"--steps must be in [1, {sched.T}]")

    def fn(x, y, t):
        return predict(net, x, y, t, sched.T).data

    out = sample_multistep(fn, y0[None, None], SamplerConfig(args.steps, sched), cfg.get_int("seed"))
    _write_pgm(args.output, np.clip(out[0, 0], 0, 1))
    print(f"wrote {args.output} ({y0.shape[1]}x{y0.shape[0]}, {args.steps} step(s))")
    return 0


def cmd_analyze(args) -> int:
    from .analysis import consistency_probe, decoupling_scatter
    from .data import batch_stream
    from .train import load_triplet, schedule_for

    cfg = _load_config(args.config, args.seed, args.set)
    try:
        triplet, stage = load_triplet(args.checkpoint, cfg)
    except FileNotFoundError as e:
        raise CommandError(str(e)) from e
    except ValueError as e:
        raise CommandError(f"{args.checkpoint}: {e}") from e
    net = triplet.online
    sched = schedule_for(cfg, stage)
    seed = cfg.get_int("seed")
    out = Path(args.out)
    if args.probe == "consistency":
        rows, inst = [], 0
        for x0, y0 in batch_stream(cfg, "val"):
            for k in range(x0.shape[0]):
                if inst >= args.count:
                    break
                for t, _, p in consistency_probe(net, x0[k:k + 1], y0[k:k + 1], sched, seed + inst):
                    rows.append([inst, t, f"{p:.6f}"])
                inst += 1
        _write_csv(out, ["instance", "t", "psnr"], rows)
    else:
        samples = decoupling_scatter(triplet, batch_stream(cfg, "val"), sched, args.t_prime, args.count, seed)
        _write_csv(out, ["instance", "t_prime", "pixel_mae", "structural_mae"],
                   [[s.instance, s.t_prime, f"{s.pixel_mae:.8f}", f"{s.structural_mae:.8f}"] for s in samples])
        if len(samples) < args.count:
            log.warning("val split exhausted after %d samples (data.val_count)", len(samples))
    print(f"wrote {out}")
    return 0


def cmd_verify(args) -> int:
    from .analysis import verify_math
    from .losses import SOBEL_TAPS

    taps = None
    if args.corrupt_sobel:
        taps = (SOBEL_TAPS[0], np.array([1.0, 3.0, 1.0], np.float32))
    seed = 42 if args.seed is None else args.seed
    ok, checks = verify_math(args.out, seed=seed, sobel_taps=taps)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    print(f"overall: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _find_runs(run_dir: Path) -> list[Path]:
    return sorted(p.parent for p in run_dir.rglob("metrics.csv") if "report" not in p.parent.parts[len(run_dir.parts):])


def _run_summary(path: Path, root: Path) -> dict:
    from .config import Config

    metrics = _read_csv(path / "metrics.csv")
    cfg = Config.load(path / "config.txt") if (path / "config.txt").is_file() else Config()
    val = _read_csv(path / "val.csv")[0] if (path / "val.csv").is_file() else {}
    stage = val.get("stage") or ("2" if metrics and "loss_dtm" in metrics[0] else "1")
    return {
        "run": path.relative_to(root).as_posix() or ".",
        "group": cfg.get("run.group"),
        "arm": cfg.get("run.arm"),
        "stage": stage,
        "seed": cfg.get("seed"),
        "iterations": metrics[-1]["iteration"] if metrics else "0",
        "final_loss_total": metrics[-1]["loss_total"] if metrics else "",
        "psnr": val.get("psnr", ""),
        "ssim": val.get("ssim", ""),
        "_metrics": metrics,
        "_path": path,
    }


def _deltas(summary: list[dict]) -> list[dict]:
    by_key = defaultdict(dict)
    for r in summary:
        if r["group"] and r["arm"] and r["psnr"]:
            by_key[(r["group"], r["stage"], r["seed"])][r["arm"]] = r
    rows = []
    for key in sorted(by_key):
        arms = by_key[key]
        if "control" not in arms:
            continue
        ctl = arms["control"]
        for arm in sorted(a for a in arms if a != "control"):
            dp = float(arms[arm]["psnr"]) - float(ctl["psnr"])
            ds = float(arms[arm]["ssim"]) - float(ctl["ssim"])
            rows.append({"group": key[0], "stage": key[1], "seed": key[2], "arm": arm, "control": "control",
                         "delta_psnr": f"{dp:+.6f}", "delta_ssim": f"{ds:+.6f}",
                         "sign": "+" if dp > 0 else ("-" if dp < 0 else "0")})
    return rows


def _text_table(header, rows) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    from . import plotting
    from .analysis import DecouplingSample

    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise CommandError(f"run directory not found: {run_dir}")
    runs = _find_runs(run_dir)
    if not runs:
        raise CommandError(f"no runs (metrics.csv) under {run_dir}")
    out = Path(args.out) if args.out else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    summary = [_run_summary(p, run_dir) for p in runs]
    cols = ["run", "group", "arm", "stage", "seed", "iterations", "final_loss_total", "psnr", "ssim"]
    s_rows = [[r[c] for c in cols] for r in summary]
    _write_csv(out / "summary.csv", cols, s_rows)
    deltas = _deltas(summary)
    dcols = ["group", "stage", "seed", "arm", "control", "delta_psnr", "delta_ssim", "sign"]
    d_rows = [[d[c] for c in dcols] for d in deltas]
    _write_csv(out / "deltas.csv", dcols, d_rows)
    text = "runs\n" + _text_table(cols, s_rows)
    if deltas:
        text += "\npaired deltas (arm - control)\n" + _text_table(dcols, d_rows)
    (out / "summary.txt").write_text(text)

    plotting.loss_curves({r["run"]: r["_metrics"] for r in summary}, out / "loss_curves.png")
    if deltas:
        plotting.ablation_deltas(deltas, out / "deltas.png")
    scatter = {}
    for r in summary:
        f = r["_path"] / "decoupling.csv"
        if f.is_file():
            scatter[r["run"]] = [DecouplingSample(int(d["instance"]), int(d["t_prime"]), float(d["pixel_mae"]),
                                                  float(d["structural_mae"])) for d in _read_csv(f)]
    if scatter:
        plotting.decoupling(scatter, out / "decoupling.png")
    sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="gtasr", description="Two-stage consistency training for one-step SR on toy data.",
                                epilog="env: GTASR_THREADS caps BLAS threads (0 or unset = library default).",
                                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None, help="global seed (default: config value, 42)")
        if config:
            sp.add_argument("--config", help="key=value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    g = sub.add_parser("gen-data", help="write synthetic HR/LR pairs as PGM",
                       description="Write synthetic HR/LR pairs as binary PGM (P5, 8-bit).",
                       epilog="files: hr_NNNNNN.pgm (data.size^2), lr_NNNNNN.pgm (size/scale)^2,\n"
                              "manifest.txt CSV: index,sample_seed,kind,blur_sigma,scale,noise_sigma\n\n" + CONFIG_HELP,
                       formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=16, help="number of pairs (default 16)")
    g.add_argument("--split", choices=("train", "val"), default="val")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run stage 1 or stage 2 training",
                       description="Run one training stage.", epilog=TRAIN_OUTPUTS + "\n\n" + CONFIG_HELP,
                       formatter_class=fmt)
    t.add_argument("--stage", type=int, choices=(1, 2), required=False, default=1)
    t.add_argument("--init", help="stage 1 checkpoint (required for stage 2)")
    t.add_argument("--out", help="run directory")
    t.add_argument("--iterations", type=int, help="override the stage iteration count")
    t.add_argument("--show-defaults", action="store_true", help="print every config key with its default")
    common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="super-resolve one PGM image",
                       description="Super-resolve a grayscale PGM with the PF-ODE sampler.",
                       epilog="input: 8-bit grayscale image (PGM or anything Pillow reads), bicubically\n"
                              "upsampled by --scale to form the conditioning image. output: 8-bit PGM.\n\n"
                              + CONFIG_HELP, formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--steps", type=int, default=1, help="sampling steps, 1..T (default 1)")
    s.add_argument("--scale", type=int, default=4, help="upsampling factor (default 4)")
    common(s)
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("analyze", help="consistency or decoupling probe to CSV",
                       description="Run a diagnostic probe over the val split.",
                       epilog=ANALYZE_OUTPUTS + "\n\n" + CONFIG_HELP, formatter_class=fmt)
    a.add_argument("--probe", choices=("consistency", "decoupling"), required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out", required=True, help="CSV path")
    a.add_argument("--count", type=int, default=None, help="instances (default 8 consistency, 200 decoupling)")
    a.add_argument("--t-prime", type=int, default=None, help="fixed t' for decoupling (default uniform)")
    common(a)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="closed-form and gradient checks",
                       description="Run the math verification suite and write a PASS/FAIL report.",
                       epilog="report: one 'PASS|FAIL  name: detail' line per check, then 'overall: ...'.\n"
                              "exit status 1 if any check fails.", formatter_class=fmt)
    v.add_argument("--out", required=True, help="report path")
    v.add_argument("--corrupt-sobel", action="store_true", help="testing aid: perturb the Sobel stencil")
    common(v, config=False)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="summarize run directories",
                       description="Aggregate runs into CSV tables and PNG figures.",
                       epilog=REPORT_OUTPUTS, formatter_class=fmt)
    r.add_argument("run_dir")
    r.add_argument("--out", help="output directory (default RUN_DIR/report)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "command", None) == "analyze" and args.count is None:
        args.count = 8 if args.probe == "consistency" else 200
    if getattr(args, "command", None) == "train" and args.stage == 2 and args.init is None and not args.show_defaults:
        parser.error("train --stage 2 requires --init")
    threads = os.environ.get("GTASR_THREADS", "0")
    try:
        n_threads = int(threads)
    except ValueError:
        parser.error(f"GTASR_THREADS must be an integer, got {threads!r}")
    try:
        if n_threads > 0:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=n_threads):
                return args.func(args)
        return args.func(args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # config errors, bad checkpoints
        from .config import ConfigError

        if isinstance(e, (ConfigError, OSError, ValueError, KeyError)):
            print(f"error: {e}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
