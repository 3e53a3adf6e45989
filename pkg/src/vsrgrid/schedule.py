"""Multigrid training schedules and the restarting learning-rate rule.

A schedule is an ordered list of spatial-temporal stages that partitions the
training iterations. The learning rate restarts to its base value at every
stage boundary and anneals by a cosine within the stage; ``literal-cosine``
evaluates cos on the raw iteration ratio (no pi factor, so non-final stages
never decay anywhere near zero), while ``half-cosine`` is the conventional
0.5*(1+cos(pi*x)) annealing.
"""

from __future__ import annotations

import bisect
import csv
import math
import warnings
from dataclasses import dataclass
from typing import IO, Sequence

LR_MODES = ("literal-cosine", "half-cosine")

# Spatial sizes this small degrade quality in practice; allowed but flagged.
_SMALL_SPATIAL = 8


class ScheduleError(ValueError):
    """Invalid schedule construction or out-of-range query."""


def _check_spatial(size: tuple[int, int]) -> tuple[int, int]:
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise ScheduleError(f"spatial size must be positive, got {h}x{w}")
    if h < _SMALL_SPATIAL or w < _SMALL_SPATIAL:
        warnings.warn(f"spatial size {h}x{w} is below {_SMALL_SPATIAL}x{_SMALL_SPATIAL}; "
                      "expect degraded reconstruction quality", stacklevel=3)
    return (h, w)


@dataclass(frozen=True)
class SpatialCycle:
    """Ordered spatial sizes, one per spatial stage, areas nondecreasing."""

    sizes: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if not self.sizes:
            raise ScheduleError("spatial cycle needs at least one size")
        sizes = tuple(_check_spatial(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        areas = [h * w for h, w in sizes]
        if any(a > b for a, b in zip(areas, areas[1:])):
            raise ScheduleError(f"spatial areas must be nondecreasing, got {sizes}")

    @property
    def count(self) -> int:
        return len(self.sizes)


@dataclass(frozen=True)
class TemporalCycle:
    """Ordered frame counts, one per temporal stage, nondecreasing."""

    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.sizes:
            raise ScheduleError("temporal cycle needs at least one size")
        sizes = tuple(int(t) for t in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if any(t < 1 for t in sizes):
            raise ScheduleError(f"temporal sizes must be >= 1, got {sizes}")
        if any(a > b for a, b in zip(sizes, sizes[1:])):
            raise ScheduleError(f"temporal sizes must be nondecreasing, got {sizes}")

    @property
    def count(self) -> int:
        return len(self.sizes)


@dataclass(frozen=True)
class StagePlan:
    """One contiguous block of iterations at a fixed minibatch shape."""

    spatial: tuple[int, int]
    temporal: int
    batch: int
    iterations: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "spatial", _check_spatial(self.spatial))
        if self.temporal < 1:
            raise ScheduleError(f"temporal size must be >= 1, got {self.temporal}")
        if self.batch < 1:
            raise ScheduleError(f"batch must be >= 1, got {self.batch}")
        if self.iterations < 1:
            raise ScheduleError(f"stage needs >= 1 iterations, got {self.iterations}")


@dataclass(frozen=True)
class MinibatchShape:
    """(batch, frames, height, width) of one training minibatch."""

    batch: int
    temporal: int
    spatial: tuple[int, int]

    def __post_init__(self) -> None:
        h, w = self.spatial
        if self.batch < 1 or self.temporal < 1 or h < 1 or w < 1:
            raise ScheduleError(f"minibatch shape must be positive, got {self}")


@dataclass(frozen=True)
class MultigridSchedule:
    """Ordered stages partitioning [0, total_iterations) exactly."""

    stages: tuple[StagePlan, ...]
    total_iterations: int

    def __post_init__(self) -> None:
        if not self.stages:
            raise ScheduleError("schedule needs at least one stage")
        object.__setattr__(self, "stages", tuple(self.stages))
        if sum(s.iterations for s in self.stages) != self.total_iterations:
            raise ScheduleError(
                f"stage iterations sum to {sum(s.iterations for s in self.stages)}, "
                f"expected total_iterations={self.total_iterations}")
        # starts[j] = first iteration of stage j (0-based j)
        starts = [0]
        for s in self.stages[:-1]:
            starts.append(starts[-1] + s.iterations)
        object.__setattr__(self, "_starts", tuple(starts))

    @property
    def stage_count(self) -> int:
        return len(self.stages)

    @property
    def stage_starts(self) -> tuple[int, ...]:
        return self._starts  # type: ignore[attr-defined]


@dataclass(frozen=True)
class LrSpec:
    """Base learning rate, annealing mode, and initial linear warmup."""

    base_lr: float
    mode: str = "literal-cosine"
    warmup_iters: int = 0
    warmup_start_factor: float = 0.0

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ScheduleError(f"base_lr must be > 0, got {self.base_lr}")
        if self.mode not in LR_MODES:
            raise ScheduleError(f"lr mode must be one of {LR_MODES}, got {self.mode!r}")
        if self.warmup_iters < 0:
            raise ScheduleError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        if not 0.0 <= self.warmup_start_factor <= 1.0:
            raise ScheduleError(
                f"warmup_start_factor must be in [0,1], got {self.warmup_start_factor}")


def derive_spatial_sizes(height: int, width: int) -> SpatialCycle:
    """Default 2-stage spatial cycle: half the baseline size (floored, raised
    to at least 32 but never above the baseline), then the baseline size."""
    if height < 2 or width < 2:
        raise ScheduleError(f"baseline spatial size must be >= 2, got {height}x{width}")
    first = (min(max(32, height // 2), height), min(max(32, width // 2), width))
    return SpatialCycle(sizes=(first, (height, width)))


def derive_temporal_sizes(frames: int) -> TemporalCycle:
    """Default 3-stage temporal cycle: max(6, T/2), 3T/4, T, floored and
    clamped into [previous, T] so the cycle is nondecreasing."""
    if frames < 1:
        raise ScheduleError(f"baseline temporal size must be >= 1, got {frames}")
    first = min(max(6, frames // 2), frames)
    second = min(max((3 * frames) // 4, first), frames)
    return TemporalCycle(sizes=(first, second, frames))


def _split_iterations(total: int, parts: int) -> list[int]:
    """Equal division, floor per part, remainder added to the final part."""
    base = total // parts
    counts = [base] * parts
    counts[-1] += total - base * parts
    return counts


def compose_hierarchical(spatial: SpatialCycle, temporal: TemporalCycle,
                         total_iterations: int, batch: int) -> MultigridSchedule:
    """Place the full temporal cycle inside each spatial stage: s*f stages
    ordered (sp0,tp0), (sp0,tp1), ..., (sp_{s-1},tp_{f-1})."""
    p = spatial.count * temporal.count
    if total_iterations < p:
        raise ScheduleError(
            f"total_iterations={total_iterations} is below stage count {p}")
    counts = _split_iterations(total_iterations, p)
    stages = []
    i = 0
    for sp in spatial.sizes:
        for tp in temporal.sizes:
            stages.append(StagePlan(spatial=sp, temporal=tp, batch=batch,
                                    iterations=counts[i]))
            i += 1
    return MultigridSchedule(stages=tuple(stages), total_iterations=total_iterations)


def compose_synchronous(pairs: Sequence[tuple[tuple[int, int], int]],
                        total_iterations: int, batch: int) -> MultigridSchedule:
    """One stage per (spatial, temporal) pair; sizes change simultaneously."""
    if not pairs:
        raise ScheduleError("synchronous composition needs at least one pair")
    if total_iterations < len(pairs):
        raise ScheduleError(
            f"total_iterations={total_iterations} is below stage count {len(pairs)}")
    counts = _split_iterations(total_iterations, len(pairs))
    stages = tuple(StagePlan(spatial=tuple(sp), temporal=tp, batch=batch, iterations=c)
                   for (sp, tp), c in zip(pairs, counts))
    return MultigridSchedule(stages=stages, total_iterations=total_iterations)


def append_stage(sched: MultigridSchedule, plan: StagePlan) -> MultigridSchedule:
    """Concatenate one more stage (overshoot beyond baseline sizes is fine)."""
    return MultigridSchedule(stages=sched.stages + (plan,),
                             total_iterations=sched.total_iterations + plan.iterations)


def _stage_index(sched: MultigridSchedule, t: int) -> int:
    """0-based index of the stage whose half-open interval contains t."""
    if not 0 <= t < sched.total_iterations:
        raise ScheduleError(
            f"iteration {t} outside [0, {sched.total_iterations})")
    return bisect.bisect_right(sched.stage_starts, t) - 1


def shape_at(sched: MultigridSchedule, t: int) -> tuple[MinibatchShape, int]:
    """Minibatch shape at iteration t plus the 1-based stage index."""
    j = _stage_index(sched, t)
    stage = sched.stages[j]
    shape = MinibatchShape(batch=stage.batch, temporal=stage.temporal,
                           spatial=stage.spatial)
    return shape, j + 1


def lr_at(spec: LrSpec, sched: MultigridSchedule, t: int) -> float:
    """Learning rate at iteration t.

    Every stage restarts at base_lr. Non-final stages anneal on the ratio
    (t - stage_start) / total_iterations; the final stage anneals on
    (t - stage_start) / stage_length so it alone decays over its full range.
    Warmup scales the result by a linear ramp from warmup_start_factor at
    t=0 to exactly 1 at t=warmup_iters, once, at the start of training.
    """
    j = _stage_index(sched, t)
    offset = t - sched.stage_starts[j]
    if j == sched.stage_count - 1:
        x = offset / sched.stages[j].iterations
    else:
        x = offset / sched.total_iterations
    if spec.mode == "literal-cosine":
        lr = math.cos(x) * spec.base_lr
    else:
        lr = 0.5 * (1.0 + math.cos(math.pi * x)) * spec.base_lr
    if t < spec.warmup_iters:
        f0 = spec.warmup_start_factor
        lr *= f0 + (1.0 - f0) * (t / spec.warmup_iters)
    return lr


def scaled_lr(base_lr: float, base_batch: int, actual_batch: int) -> float:
    """Linear scaling rule: lr grows by the same factor as the minibatch."""
    if base_batch <= 0:
        raise ScheduleError(f"base_batch must be > 0, got {base_batch}")
    if actual_batch <= 0:
        raise ScheduleError(f"actual_batch must be > 0, got {actual_batch}")
    return base_lr * (actual_batch / base_batch)


def dump_csv(sched: MultigridSchedule, spec: LrSpec, out: IO[str],
             stride: int = 1) -> int:
    """Write one `t,stage,batch,temporal,height,width,lr` row per `stride`
    iterations; returns the number of data rows."""
    if stride < 1:
        raise ScheduleError(f"stride must be >= 1, got {stride}")
    writer = csv.writer(out)
    writer.writerow(["t", "stage", "batch", "temporal", "height", "width", "lr"])
    rows = 0
    for t in range(0, sched.total_iterations, stride):
        shape, s = shape_at(sched, t)
        h, w = shape.spatial
        writer.writerow([t, s, shape.batch, shape.temporal, h, w,
                         repr(lr_at(spec, sched, t))])
        rows += 1
    return rows
