"""Peeling reconstruction: shrink an admissible pixel set while the test holds.

Starting from a large admissible set ``J``, frontier pixels are tested for
removal one at a time in FIFO order (seeded in ascending pixel index). A
removal is committed when the regularized test still passes, the complement
stays connected to the exterior and the volume floor is respected; the
removed pixel's untested NWSE neighbours inside ``J`` then join the queue.
A pixel that was tested once is never tested again. The last remaining
pixel is never removed, since the test is undefined on the empty set.

With ``fast_start`` the whole frontier is first removed in bulk for as long
as that passes, before switching to single pixels.
"""
from __future__ import annotations

import csv
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import FormatError, EitMonoError
from .geometry import (PixelGrid, PixelSet, complement_connected, frontier, inside_set)
from .monotonicity import MonotonicityConfig, MonotonicityTest, Outcome, TestMatrices

log = logging.getLogger(__name__)

BULK = -1


class TraceEntry(NamedTuple):
    pixel: int        # flat index, or BULK for a whole-frontier step
    decision: str     # removed | kept | vetoed
    lam_min: float
    alpha: float
    count: int = 1    # pixels involved (frontier size for bulk steps)


@dataclass
class ReconstructionResult:
    pixels: PixelSet
    part: str
    trace: list[TraceEntry] = field(default_factory=list)
    stats: dict = field(default_factory=dict)


class PredicateTester:
    """Adapter turning ``fn(PixelSet) -> bool`` into a peeling tester."""

    def __init__(self, fn: Callable[[PixelSet], bool]):
        self.fn = fn
        self._J: set[int] = set()

    def reset(self, J: PixelSet) -> None:
        self._J = set(J)

    def check(self, removed) -> Outcome:
        ok = bool(self.fn(PixelSet(self._J.difference(removed))))
        return Outcome(ok, float("nan"), float("nan"))

    def commit(self, removed) -> None:
        self._J.difference_update(removed)


class InternalError(EitMonoError, AssertionError):
    """A peeling state invariant was violated."""


def peel(ctx, grid: PixelGrid, cfg: MonotonicityConfig | None = None,
         initial: PixelSet | None = None, fast_start: bool = False,
         check_invariants: bool = False) -> ReconstructionResult:
    """Run the peeling algorithm.

    ``ctx`` is either a :class:`TestMatrices` (used with ``cfg``) or a tester
    object exposing ``reset``, ``check`` and ``commit``.
    """
    t0 = time.perf_counter()
    if isinstance(ctx, TestMatrices):
        if cfg is None:
            raise EitMonoError("a MonotonicityConfig is required with TestMatrices")
        tester = MonotonicityTest(ctx, cfg, grid)
    else:
        tester = ctx
    part = cfg.part if cfg is not None else "positive"
    floor = cfg.volume_floor if cfg is not None else 0.0
    J = initial if initial is not None else inside_set(grid)
    J.check_within(grid)
    stats = {"tests": 0, "bulk_steps": 0, "vetoed": 0}

    def done(pixels, trace):
        stats["wall_time"] = time.perf_counter() - t0
        stats["pixels"] = len(pixels)
        return ReconstructionResult(pixels, part, trace, stats)

    if len(J) == 0 or not complement_connected(J, grid):
        log.warning("initial set is empty or not admissible; returning it unchanged")
        return done(J, [])
    tester.reset(J)
    first = tester.check([])
    stats["tests"] += 1
    if not first.passed:
        log.warning("initial set fails the %s test (lambda_min=%.3e, alpha=%.3e); "
                    "returning it unchanged", part, first.lam_min, first.alpha)
        return done(J, [])

    area = grid.pixel_area
    inJ = J.mask(grid).ravel().copy()
    n_in = int(inJ.sum())
    trace: list[TraceEntry] = []

    if fast_start:
        while True:
            F = frontier(PixelSet(np.flatnonzero(inJ)), grid)
            if len(F) >= n_in or (n_in - len(F)) * area < floor:
                break
            out = tester.check(list(F))
            stats["tests"] += 1
            if not out.passed:
                trace.append(TraceEntry(BULK, "kept", out.lam_min, out.alpha, len(F)))
                break
            tester.commit(list(F))
            inJ[F.indices] = False
            n_in -= len(F)
            stats["bulk_steps"] += 1
            trace.append(TraceEntry(BULK, "removed", out.lam_min, out.alpha, len(F)))

    current = PixelSet(np.flatnonzero(inJ))
    tested = ~inJ  # Y starts as the complement of J
    queue = deque(frontier(current, grid).indices.tolist())
    queued = np.zeros_like(inJ)
    queued[list(queue)] = True

    while queue:
        i = queue.popleft()
        queued[i] = False
        if check_invariants and (not inJ[i] or tested[i]):
            raise InternalError(f"queued pixel {i} is not an untested member of J")
        tested[i] = True
        if n_in <= 1 or (n_in - 1) * area < floor:
            trace.append(TraceEntry(i, "vetoed", float("nan"), float("nan")))
            stats["vetoed"] += 1
            continue
        inJ[i] = False
        candidate = PixelSet(np.flatnonzero(inJ))
        if not complement_connected(candidate, grid):
            inJ[i] = True
            trace.append(TraceEntry(i, "vetoed", float("nan"), float("nan")))
            stats["vetoed"] += 1
            continue
        out = tester.check([i])
        stats["tests"] += 1
        if out.passed:
            tester.commit([i])
            n_in -= 1
            trace.append(TraceEntry(i, "removed", out.lam_min, out.alpha))
            for m in grid.neighbours(i):
                if inJ[m] and not tested[m] and not queued[m]:
                    queue.append(m)
                    queued[m] = True
        else:
            inJ[i] = True
            trace.append(TraceEntry(i, "kept", out.lam_min, out.alpha))
        if check_invariants and not complement_connected(PixelSet(np.flatnonzero(inJ)), grid):
            raise InternalError("current set lost admissibility")

    return done(PixelSet(np.flatnonzero(inJ)), trace)


def replay(trace, initial: PixelSet, grid: PixelGrid) -> PixelSet:
    """Re-apply the committed removals of a trace to ``initial``."""
    inJ = initial.mask(grid).ravel().copy()
    for entry in trace:
        if entry.decision != "removed":
            continue
        if entry.pixel == BULK:
            F = frontier(PixelSet(np.flatnonzero(inJ)), grid)
            inJ[F.indices] = False
        else:
            inJ[entry.pixel] = False
    return PixelSet(np.flatnonzero(inJ))


def reconstruct_both(ctx_pos, ctx_neg, grid: PixelGrid, cfg_pos: MonotonicityConfig,
                     cfg_neg: MonotonicityConfig, initial: PixelSet | None = None,
                     fast_start: bool = False):
    """Independent positive- and negative-part reconstructions and their overlap."""
    if cfg_pos.part != "positive" or cfg_neg.part != "negative":
        raise EitMonoError("cfg_pos/cfg_neg must be positive/negative part configs")
    pos = peel(ctx_pos, grid, cfg_pos, initial, fast_start)
    neg = peel(ctx_neg, grid, cfg_neg, initial, fast_start)
    return pos, neg, pos.pixels & neg.pixels


# -- serialization ------------------------------------------------------------

def write_reconstruction_csv(path, grid: PixelGrid, positive: PixelSet, negative: PixelSet,
                             comments: tuple[str, ...] = ()) -> None:
    """CSV of ``ix, iy, label`` (+1 positive, -1 negative), after ``#`` comment lines."""
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ix", "iy", "label"])
        for pset, label in ((positive, 1), (negative, -1)):
            ix, iy = grid.ixiy(pset.indices)
            w.writerows(zip(ix.tolist(), iy.tolist(), [label] * len(pset)))


def read_reconstruction_csv(path, grid: PixelGrid) -> tuple[PixelSet, PixelSet]:
    pos, neg = [], []
    seen_header = False
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            row = next(csv.reader([line]))
            if not seen_header and row == ["ix", "iy", "label"]:
                seen_header = True
                continue
            try:
                ix, iy, label = (int(v) for v in row)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: expected three integers") from None
            if not (0 <= ix < grid.nx and 0 <= iy < grid.ny) or label not in (1, -1):
                raise FormatError(f"{path}: line {lineno}: bad pixel or label")
            (pos if label == 1 else neg).append(iy * grid.nx + ix)
    p, n = PixelSet(pos), PixelSet(neg)
    try:
        p.check_within(grid)
        n.check_within(grid)
    except EitMonoError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return p, n


def write_trace(path, result: ReconstructionResult, grid: PixelGrid,
                comments: tuple[str, ...] = ()) -> None:
    """Line-oriented trace; bulk frontier steps are written with ix = iy = -1."""
    lines = [f"# {c}" for c in comments]
    lines += [f"# part {result.part}", "# ix iy decision lam_min alpha count"]
    for e in result.trace:
        if e.pixel == BULK:
            ix = iy = -1
        else:
            ix, iy = (int(v) for v in grid.ixiy(e.pixel))
        lines.append(f"{ix} {iy} {e.decision} {e.lam_min:.17g} {e.alpha:.17g} {e.count}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
