"""Loss, optimizers, the schedule-driven training loop, the large-minibatch
equivalence harness, and per-shape iteration timing.

The equivalence harness demonstrates why linear learning-rate scaling works:
with plain SGD and frozen weights, m small-batch steps collapse into one
m-times-larger step at m times the rate, exactly up to float rounding; with
weights actually moving, the two diverge at second order in the rate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as mdl
from . import tensor as tz
from .data import VideoClip, sample_minibatch
from .metrics import MetricReport, evaluate
from .schedule import LrSpec, MinibatchShape, MultigridSchedule, lr_at, shape_at

OPTIMIZERS = ("sgd", "sgd-momentum", "adam")


class NanLossError(RuntimeError):
    """Training aborted on a non-finite loss; carries the iteration index
    and the partial run record."""

    def __init__(self, iteration: int, record: "RunRecord"):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.record = record


def loss_charbonnier(pred: np.ndarray, target: np.ndarray,
                     eps_sq: float = 1e-12) -> tuple[float, np.ndarray]:
    """Smooth-L1-like loss: mean of sqrt(d^2 + eps^2) plus its gradient."""
    if pred.shape != target.shape:
        raise tz.ShapeError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.astype(np.float64) - target.astype(np.float64)
    root = np.sqrt(d * d + eps_sq)
    loss = float(root.mean())
    grad = (d / root / d.size).astype(pred.dtype)
    return loss, grad


class SgdOptimizer:
    """Plain SGD, optionally with classical momentum."""

    def __init__(self, params: mdl.TinyRvsrParams, momentum: float = 0.0):
        self.kind = "sgd-momentum" if momentum else "sgd"
        self.momentum = momentum
        self.buffers = {k: np.zeros_like(v) for k, v in params.tensors.items()} \
            if momentum else None

    def step(self, params: mdl.TinyRvsrParams, grads: dict[str, np.ndarray],
             lr: float) -> None:
        sgd_step(params, grads, lr, self.momentum, self.buffers)


class AdamOptimizer:
    kind = "adam"

    def __init__(self, params: mdl.TinyRvsrParams, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: mdl.TinyRvsrParams, grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, w in params.tensors.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            w -= np.asarray(lr * update, dtype=w.dtype)


def make_optimizer(kind: str, params: mdl.TinyRvsrParams):
    if kind == "sgd":
        return SgdOptimizer(params)
    if kind == "sgd-momentum":
        return SgdOptimizer(params, momentum=0.9)
    if kind == "adam":
        return AdamOptimizer(params)
    raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {kind!r}")


def sgd_step(params: mdl.TinyRvsrParams, grads: dict[str, np.ndarray],
             lr: float, momentum: float = 0.0,
             buffers: dict[str, np.ndarray] | None = None) -> None:
    """One in-place (momentum-)SGD update; momentum 0 is the plain rule
    w <- w - lr * grad."""
    for name, w in params.tensors.items():
        g = grads[name]
        if momentum:
            assert buffers is not None, "momentum needs persistent buffers"
            buf = buffers[name]
            buf *= momentum
            buf += g
            g = buf
        w -= np.asarray(lr * g, dtype=w.dtype)


def model_mean_grad(params: mdl.TinyRvsrParams,
                    batch: tuple[np.ndarray, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradient of the batch-mean loss (the 1/n convention the linear
    scaling rule is derived under)."""
    lr_clip, hr_clip = batch
    sr, cache = mdl.forward_sequence(params, lr_clip)
    _, grad_sr = loss_charbonnier(sr, hr_clip)
    return mdl.backward_sequence(params, cache, grad_sr)


def merge_batches(batches: Sequence[tuple[np.ndarray, np.ndarray]]
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate (lr, hr) minibatches along the sample axis."""
    return (np.concatenate([b[0] for b in batches], axis=1),
            np.concatenate([b[1] for b in batches], axis=1))


def _flat(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads.values()])


@dataclass
class EquivalenceReport:
    m: int
    n: int
    eta: float
    frozen_gap: float
    frozen_rel_gap: float
    frozen_tol: float
    frozen_pass: bool
    drift: list[tuple[float, float]] = field(default_factory=list)
    drift_slope: float | None = None

    def to_dict(self) -> dict:
        return {"m": self.m, "n": self.n, "eta": self.eta,
                "frozen_gap": self.frozen_gap,
                "frozen_rel_gap": self.frozen_rel_gap,
                "frozen_tol": self.frozen_tol, "frozen_pass": self.frozen_pass,
                "drift": [{"eta": e, "gap": g} for e, g in self.drift],
                "drift_slope": self.drift_slope}


def frozen_gap(grad_fn: Callable, merge: Callable, w0, batches: Sequence,
               eta: float) -> tuple[float, float]:
    """Norms comparing m frozen-weight small steps against one scaled big
    step: returns (gap, relative gap)."""
    m = len(batches)
    # sum of per-batch mean gradients, all evaluated at the same weights
    total = None
    for batch in batches:
        g = _flat(grad_fn(w0, batch))
        total = g if total is None else total + g
    delta_small = -eta * total
    delta_big = -(m * eta) * _flat(grad_fn(w0, merge(batches)))
    gap = float(np.linalg.norm(delta_small - delta_big))
    ref = float(np.linalg.norm(delta_small))
    return gap, gap / ref if ref > 0 else 0.0


def equivalence_frozen(params: mdl.TinyRvsrParams,
                       batches: Sequence[tuple[np.ndarray, np.ndarray]],
                       eta: float, tol: float = 1e-10,
                       optimizer: str = "sgd") -> EquivalenceReport:
    """Frozen-weight check of the linear scaling rule on the SR model.

    Only plain SGD admits the derivation, so anything else is rejected.
    Runs at float64 regardless of the incoming parameter precision.
    """
    if optimizer != "sgd":
        raise ValueError(f"equivalence harness requires plain sgd, got {optimizer!r}")
    w64 = params.astype(np.float64)
    batches64 = [(a.astype(np.float64), b.astype(np.float64)) for a, b in batches]
    gap, rel = frozen_gap(model_mean_grad, merge_batches, w64, batches64, eta)
    n = batches[0][0].shape[1]
    return EquivalenceReport(m=len(batches), n=n, eta=eta, frozen_gap=gap,
                             frozen_rel_gap=rel, frozen_tol=tol,
                             frozen_pass=rel <= tol)


def sequential_drift(grad_fn: Callable, merge: Callable, w0_flat_fn: Callable,
                     step_fn: Callable, w0, batches: Sequence,
                     eta_list: Sequence[float]) -> tuple[list[tuple[float, float]], float]:
    """Gap between m true sequential steps and one scaled step, per eta,
    plus the fitted log-log slope."""
    m = len(batches)
    big = merge(batches)
    gaps = []
    for eta in eta_list:
        w_seq = w0()
        for batch in batches:
            step_fn(w_seq, grad_fn(w_seq, batch), eta)
        w_big = w0()
        step_fn(w_big, grad_fn(w_big, big), m * eta)
        gaps.append((float(eta),
                     float(np.linalg.norm(w0_flat_fn(w_seq) - w0_flat_fn(w_big)))))
    if any(g == 0.0 for _, g in gaps):
        # degenerate (m=1 or exact agreement): no power law to fit
        return gaps, float("nan")
    xs = np.log([e for e, _ in gaps])
    ys = np.log([g for _, g in gaps])
    slope = float(np.polyfit(xs, ys, 1)[0])
    return gaps, slope


def equivalence_drift(params: mdl.TinyRvsrParams,
                      batches: Sequence[tuple[np.ndarray, np.ndarray]],
                      eta_list: Sequence[float],
                      optimizer: str = "sgd") -> tuple[list[tuple[float, float]], float]:
    """Sequential-vs-scaled drift for the SR model over a rate sweep."""
    if optimizer != "sgd":
        raise ValueError(f"equivalence harness requires plain sgd, got {optimizer!r}")
    base = params.astype(np.float64)
    batches64 = [(a.astype(np.float64), b.astype(np.float64)) for a, b in batches]

    def step_fn(w, grads, eta):
        sgd_step(w, grads, eta)

    return sequential_drift(model_mean_grad, merge_batches,
                            lambda w: w.flat(), step_fn,
                            lambda: base.copy(), batches64, eta_list)


def run_equivalence(params: mdl.TinyRvsrParams,
                    batches: Sequence[tuple[np.ndarray, np.ndarray]],
                    eta: float, eta_list: Sequence[float],
                    tol: float = 1e-10) -> EquivalenceReport:
    report = equivalence_frozen(params, batches, eta, tol)
    report.drift, report.drift_slope = equivalence_drift(params, batches, eta_list)
    return report


@dataclass
class RunRecord:
    """Per-iteration log plus evaluation snapshots for one training run."""

    rows: list[tuple] = field(default_factory=list)
    evals: list[tuple[int, MetricReport]] = field(default_factory=list)
    final_metrics: MetricReport | None = None
    compute_ms_total: float = 0.0
    workers: int = 1

    COLUMNS = ("t", "stage", "batch", "temporal", "height", "width",
               "lr", "loss", "wall_ms")

    def log(self, t: int, stage: int, shape: MinibatchShape, lr: float,
            loss: float, wall_ms: float) -> None:
        h, w = shape.spatial
        self.rows.append((t, stage, shape.batch, shape.temporal, h, w,
                          lr, loss, wall_ms))
        self.compute_ms_total += wall_ms

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.COLUMNS)
            for row in self.rows:
                t, s, b, tp, h, w, lr, loss, ms = row
                writer.writerow([t, s, b, tp, h, w, repr(lr), repr(loss),
                                 f"{ms:.3f}"])


def evaluate_model(params: mdl.TinyRvsrParams, clips: Sequence[VideoClip],
                   luma: bool = False) -> MetricReport:
    """PSNR/SSIM of the model over full clips against their HR frames."""
    psnrs, ssims, frames = [], [], 0
    for clip in clips:
        lr_clip = clip.lr[:, None].astype(params.dtype)
        sr, _ = mdl.forward_sequence(params, lr_clip)
        sr = np.clip(sr[:, 0], 0.0, 1.0)
        rep = evaluate(sr, clip.hr, luma=luma)
        psnrs.append(rep.psnr_db * rep.frame_count)
        ssims.append(rep.ssim * rep.frame_count)
        frames += rep.frame_count
    return MetricReport(psnr_db=sum(psnrs) / frames, ssim=sum(ssims) / frames,
                        frame_count=frames)


def train_run(sched: MultigridSchedule, lr_spec: LrSpec,
              params: mdl.TinyRvsrParams, optimizer,
              train_clips: Sequence[VideoClip], val_clips: Sequence[VideoClip],
              sample_seed: int, eval_interval: int = 0,
              workers: int = 1,
              progress: Callable[[int, int], None] | None = None) -> RunRecord:
    """Schedule-driven loop: per iteration, look up shape and rate, draw a
    batch of that shape, take one optimizer step, and log everything.

    Per-iteration wall time covers forward/backward/update only; batch
    synthesis is excluded. A non-finite loss aborts immediately with the
    partial record attached.
    """
    record = RunRecord(workers=workers)
    rng = np.random.Generator(np.random.PCG64(sample_seed))
    total = sched.total_iterations
    for t in range(total):
        shape, stage = shape_at(sched, t)
        lr = lr_at(lr_spec, sched, t)
        lr_batch, hr_batch = sample_minibatch(train_clips, shape, rng)
        lr_batch = lr_batch.astype(params.dtype, copy=False)
        hr_batch = hr_batch.astype(params.dtype, copy=False)
        tic = time.perf_counter()
        try:
            sr, cache = mdl.forward_sequence(params, lr_batch)
            loss, grad_sr = loss_charbonnier(sr, hr_batch)
            if not math.isfinite(loss):
                raise tz.NonFiniteError("non-finite loss")
            grads = mdl.backward_sequence(params, cache, grad_sr)
        except tz.NonFiniteError:
            record.log(t, stage, shape, lr, float("nan"), 0.0)
            raise NanLossError(t, record) from None
        optimizer.step(params, grads, lr)
        wall_ms = (time.perf_counter() - tic) * 1e3
        record.log(t, stage, shape, lr, loss, wall_ms)
        if progress is not None:
            progress(t, total)
        if eval_interval and (t + 1) % eval_interval == 0 and t + 1 < total:
            record.evals.append((t + 1, evaluate_model(params, val_clips)))
    record.final_metrics = evaluate_model(params, val_clips)
    record.evals.append((total, record.final_metrics))
    return record


@dataclass
class BenchResult:
    """Mean compute time per iteration for each minibatch shape."""

    shape_ms: dict[MinibatchShape, float]
    reps: int
    workers: int

    def mean_ms(self, shape: MinibatchShape) -> float:
        return self.shape_ms[shape]


def bench_shapes(params: mdl.TinyRvsrParams, shapes: Sequence[MinibatchShape],
                 clips: Sequence[VideoClip], reps: int = 5, warmup: int = 2,
                 sample_seed: int = 0, workers: int = 1) -> BenchResult:
    """Mean forward+backward+step wall time per shape; warmup reps are
    discarded and batch synthesis stays outside the timer."""
    if reps < 5:
        raise ValueError(f"need reps >= 5, got {reps}")
    rng = np.random.Generator(np.random.PCG64(sample_seed))
    out: dict[MinibatchShape, float] = {}
    for shape in shapes:
        work = params.copy()
        opt = SgdOptimizer(work)
        lr_batch, hr_batch = sample_minibatch(clips, shape, rng)
        lr_batch = lr_batch.astype(work.dtype)
        hr_batch = hr_batch.astype(work.dtype)
        times = []
        for i in range(warmup + reps):
            tic = time.perf_counter()
            sr, cache = mdl.forward_sequence(work, lr_batch)
            _, grad_sr = loss_charbonnier(sr, hr_batch)
            grads = mdl.backward_sequence(work, cache, grad_sr)
            opt.step(work, grads, 1e-6)
            times.append((time.perf_counter() - tic) * 1e3)
        out[shape] = float(np.mean(times[warmup:]))
    return BenchResult(shape_ms=out, reps=reps, workers=workers)


def predicted_ms(sched: MultigridSchedule, bench: BenchResult) -> float:
    """Total run time predicted from per-shape timings."""
    total = 0.0
    for stage in sched.stages:
        shape = MinibatchShape(batch=stage.batch, temporal=stage.temporal,
                               spatial=stage.spatial)
        total += stage.iterations * bench.mean_ms(shape)
    return total


def schedule_speedup(sched: MultigridSchedule, baseline: MultigridSchedule,
                     bench: BenchResult) -> float:
    """Predicted baseline/multigrid wall-time ratio at equal iteration
    counts, from measured per-shape costs."""
    return predicted_ms(baseline, bench) / predicted_ms(sched, bench)
