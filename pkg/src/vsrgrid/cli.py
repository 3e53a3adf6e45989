"""Command-line entry point.

Subcommands: schedule-dump, train, equivalence, bench, eval. Every error
path exits nonzero after printing a single `error: <reason>` line on
stderr. Fixed output names inside --out: records.csv, metrics.csv,
report.json, schedule.csv, ckpt/.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import data as dat
from . import model as mdl
from . import train as trn
from .config import ConfigError, ExperimentConfig, load_config
from .schedule import MinibatchShape, ScheduleError, dump_csv, shape_at
from .tensor import NonFiniteError, ShapeError


class CliError(RuntimeError):
    pass


def _limit_workers(workers: int | None):
    """Cap BLAS threads when --workers is given; otherwise leave as-is."""
    if workers is None:
        return nullcontext()
    try:
        import threadpoolctl
    except ImportError:
        return nullcontext()
    return threadpoolctl.threadpool_limits(limits=workers)


def _dtype(precision: str):
    return np.float64 if precision == "f64" else np.float32


def _effective(cfg: ExperimentConfig, args) -> dict:
    """Apply flag overrides onto the raw config; returns the merged dict."""
    raw = json.loads(json.dumps(cfg.raw))  # deep copy
    run = raw["run"]
    if getattr(args, "seed", None) is not None:
        run["sample_seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        run["workers"] = args.workers
    if getattr(args, "precision", None) is not None:
        run["precision"] = args.precision
    if getattr(args, "out", None) is not None:
        run["out_dir"] = str(args.out)
    return raw


def _build_pools(cfg: ExperimentConfig, dtype):
    data = cfg.data_cfg
    train_seeds, val_seeds = cfg.clip_seeds()
    hr_h, hr_w = data["hr_size"]
    make = lambda s: dat.generate_clip(s, data["frames"], hr_h, hr_w, dtype=dtype)
    return [make(s) for s in train_seeds], [make(s) for s in val_seeds]


def cmd_schedule_dump(args) -> int:
    cfg = load_config(args.config)
    sched = cfg.build_schedule()
    spec = cfg.build_lr_spec()
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "schedule.csv", "w", newline="") as f:
            rows = dump_csv(sched, spec, f, stride=args.stride)
        print(f"wrote {rows} rows to {out_dir / 'schedule.csv'}")
    else:
        dump_csv(sched, spec, sys.stdout, stride=args.stride)
    return 0


def _write_metrics_csv(path: Path, entries) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "psnr_db", "ssim", "frames"])
        for t, rep in entries:
            writer.writerow([t, f"{rep.psnr_db:.6f}", f"{rep.ssim:.8f}",
                             rep.frame_count])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    raw = _effective(cfg, args)
    cfg = ExperimentConfig(raw=raw)
    run = cfg.run_cfg
    out_dir = Path(run.get("out_dir", "run_out"))
    if args.dry_run:
        print("config ok")
        print(cfg.to_json())
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = _dtype(run.get("precision", "f32"))
    sched = cfg.build_schedule()
    spec = cfg.build_lr_spec()
    params = mdl.init_params(cfg.model_cfg["seed"], cfg.model_cfg["channels"],
                             cfg.model_cfg["blocks"], dtype=dtype)
    optimizer = trn.make_optimizer(run.get("optimizer", "adam"), params)
    train_clips, val_clips = _build_pools(cfg, dtype)
    workers = run.get("workers", 1)
    (out_dir / "config.json").write_text(cfg.to_json())
    t0 = time.perf_counter()
    status = 0
    try:
        with _limit_workers(workers):
            record = trn.train_run(
                sched, spec, params, optimizer, train_clips, val_clips,
                sample_seed=run["sample_seed"],
                eval_interval=run.get("eval_interval", 0), workers=workers)
    except trn.NanLossError as exc:
        record = exc.record
        record.write_csv(out_dir / "records.csv")
        print(f"error: non-finite loss at iteration {exc.iteration}",
              file=sys.stderr)
        status = 1
    wall_s = time.perf_counter() - t0
    record.write_csv(out_dir / "records.csv")
    _write_metrics_csv(out_dir / "metrics.csv", record.evals)
    mdl.save_checkpoint(params, out_dir / "ckpt")
    report = {
        "completed": status == 0,
        "iterations_run": len(record.rows),
        "total_iterations": sched.total_iterations,
        "compute_ms_total": record.compute_ms_total,
        "wall_s_including_data": wall_s,
        "workers": workers,
        "final_psnr_db": record.final_metrics.psnr_db if record.final_metrics else None,
        "final_ssim": record.final_metrics.ssim if record.final_metrics else None,
        "stage_count": sched.stage_count,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    if status == 0:
        print(f"completed {sched.total_iterations} iterations in "
              f"{record.compute_ms_total / 1e3:.1f}s compute; "
              f"final PSNR {record.final_metrics.psnr_db:.3f} dB, "
              f"SSIM {record.final_metrics.ssim:.4f}")
    return status


def cmd_equivalence(args) -> int:
    cfg = load_config(args.config)
    raw = _effective(cfg, args)
    cfg = ExperimentConfig(raw=raw)
    run = cfg.run_cfg
    if run.get("optimizer", "adam") != "sgd":
        raise CliError("equivalence requires run.optimizer == 'sgd' "
                       f"(got {run.get('optimizer', 'adam')!r}); "
                       "the derivation only holds for the plain update rule")
    sched = cfg.build_schedule()
    shape, _ = shape_at(sched, 0)
    params = mdl.init_params(cfg.model_cfg["seed"], cfg.model_cfg["channels"],
                             cfg.model_cfg["blocks"], dtype=np.float64)
    train_clips, _ = _build_pools(cfg, np.float64)
    rng = np.random.Generator(np.random.PCG64(run["sample_seed"]))
    batches = [dat.sample_minibatch(train_clips, shape, rng)
               for _ in range(args.m)]
    eta_list = [float(x) for x in args.eta_list.split(",")]
    with _limit_workers(run.get("workers")):
        report = trn.run_equivalence(params, batches, eta_list[0], eta_list)
    payload = report.to_dict()
    out_dir = Path(run.get("out_dir", "run_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2))
    print(json.dumps(payload, indent=2))
    if not report.frozen_pass:
        print(f"error: frozen equivalence gap {report.frozen_rel_gap:.3e} "
              f"above {report.frozen_tol:.1e}", file=sys.stderr)
        return 1
    return 0


def _parse_shapes(text: str, batch: int) -> list[MinibatchShape]:
    shapes = []
    for part in text.split(","):
        dims = part.strip().split("x")
        if len(dims) == 3:
            h, w, t = (int(d) for d in dims)
        else:
            raise CliError(f"shape {part!r} must look like HxWxT")
        shapes.append(MinibatchShape(batch=batch, temporal=t, spatial=(h, w)))
    return shapes


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    raw = _effective(cfg, args)
    cfg = ExperimentConfig(raw=raw)
    run = cfg.run_cfg
    dtype = _dtype(run.get("precision", "f32"))
    sched = cfg.build_schedule()
    batch = cfg.schedule_cfg["batch"]
    if args.shapes:
        shapes = _parse_shapes(args.shapes, batch)
    else:
        seen = []
        for stage in sched.stages:
            sh = MinibatchShape(batch=stage.batch, temporal=stage.temporal,
                                spatial=stage.spatial)
            if sh not in seen:
                seen.append(sh)
        shapes = seen
    params = mdl.init_params(cfg.model_cfg["seed"], cfg.model_cfg["channels"],
                             cfg.model_cfg["blocks"], dtype=dtype)
    train_clips, _ = _build_pools(cfg, dtype)
    workers = run.get("workers", 1)
    with _limit_workers(workers):
        bench = trn.bench_shapes(params, shapes, train_clips, reps=args.reps,
                                 sample_seed=run["sample_seed"], workers=workers)
    rows = [{"height": s.spatial[0], "width": s.spatial[1], "temporal": s.temporal,
             "batch": s.batch, "mean_ms": bench.shape_ms[s]} for s in shapes]
    payload = {"workers": workers, "reps": args.reps, "shapes": rows}
    payload["predicted_total_ms"] = trn.predicted_ms(sched, bench) \
        if all(MinibatchShape(batch=st.batch, temporal=st.temporal,
                              spatial=st.spatial) in bench.shape_ms
               for st in sched.stages) else None
    out_dir = Path(run.get("out_dir", "run_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2))
    print(json.dumps(payload, indent=2))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    raw = _effective(cfg, args)
    cfg = ExperimentConfig(raw=raw)
    run = cfg.run_cfg
    dtype = _dtype(run.get("precision", "f32"))
    ckpt = Path(args.ckpt)
    if not (ckpt / "manifest.json").exists():
        raise CliError(f"no checkpoint manifest under {ckpt}")
    params = mdl.load_checkpoint(ckpt, dtype=dtype)
    train_clips, val_clips = _build_pools(cfg, dtype)
    clips = val_clips if args.split == "val" else train_clips
    with _limit_workers(run.get("workers")):
        report = trn.evaluate_model(params, clips)
    out_dir = Path(run.get("out_dir", "run_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_metrics_csv(out_dir / "metrics.csv", [(0, report)])
    print(f"{args.split} PSNR {report.psnr_db:.3f} dB, SSIM {report.ssim:.4f} "
          f"over {report.frame_count} frames")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vsrgrid",
        description="Multigrid schedules and large-minibatch training for a "
                    "tiny recurrent video super-resolution model")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override run.sample_seed")
        p.add_argument("--workers", type=int, default=None,
                       help="cap BLAS threads for compute sections")
        p.add_argument("--precision", choices=["f32", "f64"], default=None)

    p = sub.add_parser("schedule-dump", help="write the per-iteration schedule CSV")
    common(p)
    p.add_argument("--stride", type=int, default=1, help="row every k iterations")
    p.set_defaults(func=cmd_schedule_dump)

    p = sub.add_parser("train", help="run schedule-driven training")
    common(p)
    p.add_argument("--dry-run", action="store_true",
                   help="validate config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("equivalence", help="large-minibatch equivalence checks")
    common(p)
    p.add_argument("--m", type=int, default=4, help="number of small batches")
    p.add_argument("--eta-list", default="0.008,0.004,0.002",
                   help="comma-separated rates for the drift sweep")
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("bench", help="per-shape iteration timing")
    common(p)
    p.add_argument("--shapes", default=None,
                   help="comma-separated HxWxT list; default: schedule shapes")
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScheduleError, ShapeError, NonFiniteError, CliError,
            dat.DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
