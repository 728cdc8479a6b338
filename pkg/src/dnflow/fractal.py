"""Parabolic box counting on marked space-time sets.

Space-time is cut into dyadic boxes of spatial side delta and temporal side
delta^2, the parabolic cylinder shape.  Counting occupied boxes gives an
upper bound N(delta) delta^s for the content behind the s-dimensional
parabolic Hausdorff measure (a fixed grid cover, not the true infimum), and
the slope of log N against log(1/delta) estimates the dimension.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .discretization import Grid
from .excess import (ParabolicCylinder, _ball, _excess_from_samples, _Samples, _step_indices,
                     default_p)
from .scheme import Trajectory

__all__ = [
    "SpaceTimeSet",
    "FractalEstimate",
    "ResolutionError",
    "mark_bad_set",
    "cover_count",
    "parabolic_box_count",
    "dyadic_scales",
    "default_beta",
    "estimate_dimension",
    "write_fractal",
]

COVER_NOTE = "greedy dyadic cover: every value is an upper bound on the infimum over covers"


class ResolutionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpaceTimeSet:
    """Marked (step, cell) samples; ``mask`` has shape (steps, *cells)."""

    grid: Grid
    t0: float
    tau: float
    mask: np.ndarray
    evaluated: Optional[np.ndarray] = None

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != self.grid.n + 1 or mask.shape[1:] != self.grid.cells:
            raise ValueError(f"mask shape {mask.shape} does not match (steps, *{self.grid.cells})")
        object.__setattr__(self, "mask", mask)
        if self.evaluated is not None:
            object.__setattr__(self, "evaluated", np.asarray(self.evaluated, dtype=bool))

    @classmethod
    def empty_like(cls, tr: Trajectory) -> "SpaceTimeSet":
        return cls(tr.grid, tr.t0, tr.tau, np.zeros((tr.N + 1,) + tr.grid.cells, bool))

    @property
    def steps(self) -> int:
        return self.mask.shape[0]

    @property
    def T(self) -> float:
        return self.t0 + self.tau * (self.steps - 1)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def union(self, other: "SpaceTimeSet") -> "SpaceTimeSet":
        return SpaceTimeSet(self.grid, self.t0, self.tau, self.mask | other.mask)


def mark_bad_set(tr: Trajectory, r: float, threshold: float,
                 margin: Optional[float] = None, stride: int = 1) -> SpaceTimeSet:
    """Mark cell/step samples with E(x, t, r) > threshold.

    Only samples whose cylinder lies in the domain shrunk by ``margin``
    (default h, so every gradient sample in the ball is a genuine interior
    difference) are evaluated; ``evaluated`` records which ones were.
    """
    grid = tr.grid
    margin = grid.h if margin is None else float(margin)
    ccoords = grid.cell_coords()
    ncoords = grid.node_coords()
    lo = np.array(grid.origin) + margin + r
    hi = np.array(grid.origin) + np.array(grid.extents) - margin - r
    fits_space = np.all((ccoords >= lo - 1e-12) & (ccoords <= hi + 1e-12), axis=-1)
    t = tr.times
    tol = 1e-9 * tr.tau
    fits_time = (t - 0.5 * r**2 >= tr.t0 - tol) & (t + 0.5 * r**2 <= tr.T_end + tol)
    mask = np.zeros((tr.N + 1,) + grid.cells, bool)
    evaluated = np.zeros_like(mask)
    Dv_all = tr.gradients
    cell_idx = [tuple(i) for i in np.argwhere(fits_space)[::stride]]
    balls = {}
    for ci in cell_idx:
        Q = ParabolicCylinder(ccoords[ci], 0.0, r)
        nm, cm = _ball(ncoords, Q), _ball(ccoords, Q)
        balls[ci] = (nm, cm, ncoords[nm] - ccoords[ci])
    origin = (0.0,) * grid.n
    for k in np.nonzero(fits_time)[0][::stride]:
        ks = _step_indices(tr, ParabolicCylinder(origin, t[k], r))
        V, D = tr.steps[ks], Dv_all[ks]
        for ci in cell_idx:
            nm, cm, y = balls[ci]
            s = _Samples(V[:, nm], y, D[:, cm], ks)
            E = _excess_from_samples(s, r).E
            evaluated[(k,) + ci] = True
            mask[(k,) + ci] = E > threshold
    return SpaceTimeSet(grid, tr.t0, tr.tau, mask, evaluated)


def _box_indices(S: SpaceTimeSet, delta: float) -> np.ndarray:
    grid = S.grid
    if delta < grid.h * (1 - 1e-12) or delta**2 < S.tau * (1 - 1e-12):
        raise ResolutionError(
            f"delta={delta} is below the resolution (h={grid.h}, sqrt(tau)={math.sqrt(S.tau)})")
    pts = np.argwhere(S.mask)
    if len(pts) == 0:
        return np.zeros((0, grid.n + 1), dtype=np.int64)
    k, cells = pts[:, 0], pts[:, 1:]
    cols = []
    tmax = max(int(math.ceil((S.T - S.t0) / delta**2 - 1e-9)) - 1, 0)
    cols.append(np.minimum(np.floor(k * S.tau / delta**2 + 1e-9).astype(np.int64), tmax))
    for a in range(grid.n):
        xmax = max(int(math.ceil(grid.extents[a] / delta - 1e-9)) - 1, 0)
        x = (cells[:, a] + 0.5) * grid.h
        cols.append(np.minimum(np.floor(x / delta).astype(np.int64), xmax))
    return np.stack(cols, axis=1)


def cover_count(S: SpaceTimeSet, delta: float) -> int:
    """Number of occupied parabolic boxes of radius delta."""
    idx = _box_indices(S, delta)
    return 0 if len(idx) == 0 else len(np.unique(idx, axis=0))


def parabolic_box_count(S: SpaceTimeSet, s: float, delta: float) -> float:
    """N(delta) delta^s, an upper bound for the delta-content."""
    return cover_count(S, delta) * delta**s


def dyadic_scales(S: SpaceTimeSet, count: Optional[int] = None) -> np.ndarray:
    """delta_j = L / 2^j from the shortest side L (spatial, or sqrt of the
    time span) down to the finest admissible scale."""
    L = min(min(S.grid.extents), math.sqrt(max(S.T - S.t0, S.tau)))
    finest = max(S.grid.h, math.sqrt(S.tau))
    out = []
    d = L
    while d >= finest * (1 - 1e-12) and (count is None or len(out) < count):
        out.append(d)
        d /= 2
    return np.array(out)


def default_beta(p: float) -> float:
    """Midpoint of the admissible interval (0, 1/2 - 1/p)."""
    return 0.5 * (0.5 - 1.0 / p)


@dataclass
class FractalEstimate:
    scales: np.ndarray
    counts: np.ndarray
    sums: Dict[float, np.ndarray]
    dim_hat: float
    beta: float
    target: float
    empty: bool = False
    degenerate: bool = False
    slack: np.ndarray = field(default_factory=lambda: np.zeros(0))
    note: str = COVER_NOTE


def _samples_per_box(S: SpaceTimeSet, delta: float) -> float:
    per_axis = [delta / S.grid.h] * S.grid.n
    return max(1.0, delta**2 / S.tau) * math.prod(per_axis)


def estimate_dimension(S: SpaceTimeSet, scales: Optional[Sequence[float]] = None,
                       s_values: Sequence[float] = (), beta: Optional[float] = None,
                       p: Optional[float] = None) -> FractalEstimate:
    scales = dyadic_scales(S) if scales is None else np.asarray(list(scales), dtype=float)
    if len(scales) < 3:
        raise ValueError("need at least three scales")
    if p is None:
        p = default_p(S.grid.n)
    beta = default_beta(p) if beta is None else float(beta)
    target = S.grid.n + 2 - 2 * beta
    counts = np.array([cover_count(S, d) for d in scales])
    sums = {float(s): counts * scales**s for s in s_values}
    marked = S.count
    if marked == 0:
        return FractalEstimate(scales, counts, sums, math.nan, beta, target, empty=True)
    slack = counts * np.array([_samples_per_box(S, d) for d in scales]) / marked
    if np.all(counts == counts[0]):
        return FractalEstimate(scales, counts, sums, 0.0, beta, target,
                               degenerate=True, slack=slack)
    slope = float(np.polyfit(np.log(1.0 / scales), np.log(counts), 1)[0])
    return FractalEstimate(scales, counts, sums, slope, beta, target, slack=slack)


def write_fractal(path, est: FractalEstimate) -> None:
    svals = sorted(est.sums)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delta", "N"] + [f"S_{s!r}" for s in svals])
        for j, d in enumerate(est.scales):
            w.writerow([repr(float(d)), int(est.counts[j])]
                       + [repr(float(est.sums[s][j])) for s in svals])
        dim = "empty" if est.empty else repr(float(est.dim_hat))
        w.writerow(["dim_hat", dim])
        w.writerow(["beta", repr(est.beta)])
        w.writerow(["target", repr(est.target)])
        w.writerow(["degenerate", str(est.degenerate).lower()])
        w.writerow(["note", est.note])
