"""Parabolic cylinders, cylinder averages and the excess of a trajectory.

A cylinder Q_r(x, t) = B_r(x) x (t - r^2/2, t + r^2/2) is realized on the
discrete data by the closed ball of nodes (for v) or cell centres (for Dv)
and the steps whose times fall in the half-open window (t - r^2/2, t + r^2/2].
All averages are plain means over those samples, since node, cell and step
weights are uniform.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .discretization import Grid
from .potentials import Integrand, Potential
from .scheme import Trajectory

__all__ = [
    "CylinderOutOfDomain",
    "EmptyCylinder",
    "DegenerateFit",
    "ParabolicCylinder",
    "ExcessReport",
    "cylinder_average",
    "oscillation",
    "compute_excess",
    "decay_probe",
    "fit_power_law",
    "campanato_fit",
    "check_poincare_excess",
    "RescaledPotential",
    "RescaleResult",
    "rescale_blowup",
    "FractionalFit",
    "fractional_fit",
    "default_p",
    "average_shift_bounds",
    "write_excess_scan",
    "write_fractional_fit",
]

_TIME_EPS = 1e-9


class CylinderOutOfDomain(ValueError):
    pass


class EmptyCylinder(ValueError):
    pass


class DegenerateFit(ValueError):
    pass


@dataclass(frozen=True)
class ParabolicCylinder:
    center: tuple
    t: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("cylinder radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))

    @property
    def window(self) -> tuple:
        return self.t - 0.5 * self.r**2, self.t + 0.5 * self.r**2

    def scaled(self, factor: float) -> "ParabolicCylinder":
        return ParabolicCylinder(self.center, self.t, factor * self.r)

    def inside(self, tr: Trajectory) -> bool:
        c = np.array(self.center)
        if len(c) != tr.grid.n:
            return False
        lo, hi = self.window
        tol = _TIME_EPS * max(1.0, abs(tr.T_end))
        return (
            tr.grid.contains_box(c - self.r, c + self.r)
            and lo >= tr.t0 - tol
            and hi <= tr.T_end + tol
        )


def _require_inside(tr: Trajectory, Q: ParabolicCylinder):
    if not Q.inside(tr):
        raise CylinderOutOfDomain(
            f"Q_{Q.r}({Q.center}, {Q.t}) is not inside the space-time domain "
            f"{tr.grid.origin}+{tr.grid.extents} x [{tr.t0}, {tr.T_end}]"
        )


def _step_indices(tr: Trajectory, Q: ParabolicCylinder, first: int = 0) -> np.ndarray:
    lo, hi = Q.window
    t = tr.times
    tol = _TIME_EPS * tr.tau
    ks = np.nonzero((t > lo + tol) & (t <= hi + tol))[0]
    return ks[ks >= first]


def _ball(coords: np.ndarray, Q: ParabolicCylinder) -> np.ndarray:
    d = coords - np.array(Q.center)
    return np.sum(d * d, axis=-1) <= Q.r**2 * (1 + 1e-12)


class _Samples(NamedTuple):
    v: np.ndarray  # (K, nodes, m)
    y: np.ndarray  # (nodes, n), positions relative to the centre
    Dv: np.ndarray  # (K, cells, m, n)
    steps: np.ndarray


def _samples(tr: Trajectory, Q: ParabolicCylinder, first_step: int = 0) -> _Samples:
    ks = _step_indices(tr, Q, first_step)
    node_mask = _ball(tr.grid.node_coords(), Q)
    cell_mask = _ball(tr.grid.cell_coords(), Q)
    if len(ks) == 0 or not node_mask.any() or not cell_mask.any():
        raise EmptyCylinder(f"no samples inside Q_{Q.r}({Q.center}, {Q.t})")
    v = tr.steps[ks][:, node_mask]
    Dv = tr.gradients[ks][:, cell_mask]
    y = tr.grid.node_coords()[node_mask] - np.array(Q.center)
    return _Samples(v, y, Dv, ks)


def cylinder_average(tr: Trajectory, Q: ParabolicCylinder, which: str = "v") -> np.ndarray:
    """Average of ``which`` over Q: "v" (in R^m), "Dv" (m x n) or "v_t" (R^m).

    "v_t" is the backward difference quotient (v^k - v^{k-1}) / tau.
    """
    if which == "v":
        return _samples(tr, Q).v.mean(axis=(0, 1))
    if which == "Dv":
        return _samples(tr, Q).Dv.mean(axis=(0, 1))
    if which == "v_t":
        s = _samples(tr, Q, first_step=1)
        node_mask = _ball(tr.grid.node_coords(), Q)
        vt = (tr.steps[s.steps] - tr.steps[s.steps - 1])[:, node_mask] / tr.tau
        return vt.mean(axis=(0, 1))
    raise ValueError(f"unknown field selector {which!r}")


def oscillation(tr: Trajectory, Q: ParabolicCylinder, which: str = "Dv") -> float:
    """Mean square deviation of ``which`` ("v" or "Dv") from its Q-average."""
    s = _samples(tr, Q)
    f = s.Dv if which == "Dv" else s.v
    d = f - f.mean(axis=(0, 1))
    return float(np.mean(np.sum(d.reshape(d.shape[:2] + (-1,)) ** 2, axis=-1)))


@dataclass(frozen=True)
class ExcessReport:
    E: float
    term_affine: float
    term_grad: float
    v_avg: np.ndarray
    Dv_avg: np.ndarray
    node_samples: int
    cell_samples: int
    step_samples: int
    cylinder: ParabolicCylinder = None


def _excess_from_samples(s: _Samples, r: float, Q=None) -> ExcessReport:
    a = s.v.mean(axis=(0, 1))
    M = s.Dv.mean(axis=(0, 1))
    model = a + s.y @ M.T  # (nodes, m)
    dev = s.v - model
    term_affine = float(np.mean(np.sum(dev * dev, axis=-1))) / r**2
    dg = s.Dv - M
    term_grad = float(np.mean(np.sum(dg * dg, axis=(-2, -1))))
    return ExcessReport(
        term_affine + term_grad, term_affine, term_grad, a, M,
        s.v.shape[1], s.Dv.shape[1], s.v.shape[0], Q,
    )


def compute_excess(tr: Trajectory, Q: ParabolicCylinder) -> ExcessReport:
    _require_inside(tr, Q)
    return _excess_from_samples(_samples(tr, Q), Q.r, Q)


def _data_scale(tr: Trajectory, Q: ParabolicCylinder) -> float:
    s = _samples(tr, Q)
    return float(np.mean(s.v**2) / Q.r**2 + np.mean(s.Dv**2))


class DecayProbe(NamedTuple):
    E_r: float
    E_theta_r: float
    ratio: float
    degenerate: bool


def decay_probe(tr: Trajectory, x, t: float, r: float, theta: float) -> DecayProbe:
    """E(x,t,r), E(x,t,theta r) and their ratio; no pass/fail is attached."""
    if not 0 < theta < 0.5 + 1e-12:
        raise ValueError("theta must lie in (0, 1/2]")
    Q = ParabolicCylinder(x, t, r)
    big = compute_excess(tr, Q).E
    small = compute_excess(tr, Q.scaled(theta)).E
    if big <= 1e-20 * max(_data_scale(tr, Q), 1e-300):
        return DecayProbe(big, small, math.nan, True)
    return DecayProbe(big, small, small / big, False)


class CampanatoFit(NamedTuple):
    alpha: float
    C: float
    residual: float
    radii: np.ndarray
    E: np.ndarray


def fit_power_law(radii: Sequence[float], values: Sequence[float]) -> CampanatoFit:
    """Least-squares fit of log values = log C + alpha log radii."""
    R = np.asarray(radii, dtype=float)
    E = np.asarray(values, dtype=float)
    if len(R) < 3:
        raise ValueError("need at least three radii")
    if np.any(E <= 0):
        raise DegenerateFit("excess vanishes at some radius (exact affine regularity)")
    X = np.column_stack([np.ones_like(R), np.log(R)])
    coef, *_ = np.linalg.lstsq(X, np.log(E), rcond=None)
    res = np.log(E) - X @ coef
    return CampanatoFit(float(coef[1]), float(math.exp(coef[0])),
                        float(np.sqrt(np.mean(res**2))), R, E)


def campanato_fit(tr: Trajectory, x, t: float, radii: Sequence[float]) -> CampanatoFit:
    radii = list(radii)
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly decreasing")
    E = [compute_excess(tr, ParabolicCylinder(x, t, r)).E for r in radii]
    return fit_power_law(radii, E)


class PoincareRatio(NamedTuple):
    ratio: float
    E: float
    time_term: float
    grad_term: float
    degenerate: bool


def check_poincare_excess(tr: Trajectory, Q: ParabolicCylinder) -> PoincareRatio:
    """E over r^2 avg|v_t|^2 + avg|Dv - (Dv)_Q|^2; finite bound expected, no value."""
    _require_inside(tr, Q)
    rep = compute_excess(tr, Q)
    ks = _step_indices(tr, Q, first=1)
    if len(ks) < 1:
        raise EmptyCylinder("need steps with a backward difference inside the window")
    node_mask = _ball(tr.grid.node_coords(), Q)
    vt = (tr.steps[ks] - tr.steps[ks - 1])[:, node_mask] / tr.tau
    time_term = Q.r**2 * float(np.mean(np.sum(vt * vt, axis=-1)))
    bound = time_term + rep.term_grad
    scale = max(_data_scale(tr, Q), 1e-300)
    if bound <= 1e-20 * scale:
        return PoincareRatio(math.nan, rep.E, time_term, rep.term_grad, True)
    return PoincareRatio(rep.E / bound, rep.E, time_term, rep.term_grad, False)


# ---------------------------------------------------------------------------
# blow-up rescaling


_GL_S, _GL_W = np.polynomial.legendre.leggauss(8)
_GL_S, _GL_W = 0.5 * (_GL_S + 1.0), 0.5 * _GL_W


def _remainders(f, b, w, er):
    """[f(b + er w) - f(b) - Df(b).(er w)] / er^2 and [Df(b + er w) - Df(b)] / er.

    The value comes from the integral form of Taylor's remainder over the
    Hessian when there is one: the plain difference quotient cancels badly as
    er shrinks, the integral is exact for quadratics.  The gradient keeps the
    difference quotient, whose rounding error is only O(|b| / er) and which
    inherits the monotonicity bounds of Df exactly.
    """
    axes = tuple(range(-f.ndim, 0))
    w = np.asarray(w, dtype=float)
    d = er * w
    inc = (f.grad(b + d) - f.grad(b)) / er
    if f.hess is None:
        return (f.eval(b + d) - f.eval(b) - np.sum(f.grad(b) * d, axis=axes)) / er**2, inc
    wb = np.broadcast_to(w, np.broadcast_shapes(np.shape(b), w.shape))
    val = 0.0
    for s, q in zip(_GL_S, _GL_W):
        val = val + q * (1.0 - s) * np.sum(wb * f.hess_apply(b + s * d, wb), axis=axes)
    return val, inc


class RescaledPotential:
    """psi'(y, w) = [psi(b + e r w) - psi(b) - Dpsi(b).(e r w)] / (e r)^2, b = a + r M y."""

    def __init__(self, psi: Potential, a, M, r: float, eps: float):
        self.psi = psi
        self.a = np.asarray(a, dtype=float)
        self.M = np.asarray(M, dtype=float)
        self.r = float(r)
        self.eps = float(eps)

    def base(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self.a + self.r * (y @ self.M.T)

    def eval(self, y, w) -> np.ndarray:
        return _remainders(self.psi, self.base(y), w, self.eps * self.r)[0]

    def grad(self, y, w) -> np.ndarray:
        return _remainders(self.psi, self.base(y), w, self.eps * self.r)[1]

    def at(self, y) -> Potential:
        """The frozen-y potential w -> psi'(y, w), checked for the same constants."""
        b = self.base(y)
        er = self.eps * self.r
        p = self.psi
        hess_ = None if p.hess is None else (lambda w: p.hess(b + er * w))
        return Potential(p.m, lambda w: _remainders(p, b, w, er)[0],
                         lambda w: _remainders(p, b, w, er)[1], hess_, p.theta, p.Theta,
                         key=f"rescaled({p.key})")


def rescale_integrand(F: Integrand, M, eps: float) -> Integrand:
    """F'(xi) = [F(M + e xi) - F(M) - DF(M).(e xi)] / e^2 with the constants of F."""
    M = np.asarray(M, dtype=float)
    hess_ = None if F.hess is None else (lambda xi: F.hess(M + eps * xi))
    return Integrand(F.m, F.n, lambda xi: _remainders(F, M, xi, eps)[0],
                     lambda xi: _remainders(F, M, xi, eps)[1], hess_, F.lam, F.Lam,
                     key=f"rescaled({F.key})")


@dataclass
class RescaleResult:
    field: Trajectory
    shift: np.ndarray
    tilt: np.ndarray
    eps: float
    r: float
    potential: Optional[RescaledPotential]
    integrand: Optional[Integrand]

    def normalization(self) -> float:
        """avg_{Q_1}|v'|^2 + avg_{Q_1}|Dv'|^2."""
        Q1 = ParabolicCylinder((0.0,) * self.field.grid.n, 0.0, 1.0)
        s = _samples(self.field, Q1)
        return float(np.mean(np.sum(s.v**2, axis=-1)) + np.mean(np.sum(s.Dv**2, axis=(-2, -1))))


def rescale_blowup(tr: Trajectory, x, t: float, r: float, eps: float,
                   spacing: Optional[float] = None) -> RescaleResult:
    """Zoom into Q_r(x,t): v'(y,s) = (v(x + r y, t + r^2 s) - a - M r y) / (eps r).

    Space is sampled multilinearly on a grid of ``spacing`` (default h / r,
    so that samples coincide with original nodes when x is a node) covering
    [-1 - 2 spacing, 1 + 2 spacing]^n; time uses the original steps inside
    the window, mapped to s = (t_k - t) / r^2.
    """
    if not eps > 1e-150:
        raise ValueError("blow-up amplitude eps is below the machine threshold")
    grid = tr.grid
    Q = ParabolicCylinder(x, t, r)
    _require_inside(tr, Q)
    hs = grid.h / r if spacing is None else float(spacing)
    half = int(math.ceil(1.0 / hs)) + 2
    ugrid = Grid((2 * half * hs,) * grid.n, (2 * half,) * grid.n, (-half * hs,) * grid.n)
    reach = r * half * hs
    c = np.array(Q.center)
    if not grid.contains_box(c - reach, c + reach):
        raise CylinderOutOfDomain("rescaling box leaves the spatial domain")

    a = cylinder_average(tr, Q, "v")
    M = cylinder_average(tr, Q, "Dv")
    ks = _step_indices(tr, Q)
    y = ugrid.node_coords()
    X = c + r * y
    axes = [grid.origin[d] + grid.h * np.arange(grid.cells[d] + 1) for d in range(grid.n)]
    out = []
    for k in ks:
        interp = RegularGridInterpolator(axes, grid.pad(tr.steps[k]), method="linear")
        vals = interp(X.reshape(-1, grid.n)).reshape(X.shape[:-1] + (tr.m,))
        out.append((vals - a - r * (y @ M.T)) / (eps * r))
    s0 = (tr.times[ks[0]] - t) / r**2
    field = Trajectory(ugrid, np.stack(out), tr.tau / r**2, t0=s0)
    psi_r = None if tr.potential is None else RescaledPotential(tr.potential, a, M, r, eps)
    F_r = None if tr.integrand is None else rescale_integrand(tr.integrand, M, eps)
    field.potential = None if psi_r is None else psi_r.at(np.zeros(grid.n))
    field.integrand = F_r
    return RescaleResult(field, a, M, eps, r, psi_r, F_r)


# ---------------------------------------------------------------------------
# fractional time differences


def default_p(n: int) -> float:
    """Higher-integrability exponent 2 + 4/n for n = 1, midpoint 3 of [2, 4) for n = 2."""
    return {1: 4.0, 2: 3.0}[n]


@dataclass(frozen=True)
class FractionalFit:
    offsets: np.ndarray
    integrals: np.ndarray
    slope: float
    target: float
    p: float
    margin: float

    @property
    def passed(self) -> bool:
        return bool(self.slope >= self.target - self.margin)


def fractional_fit(tr: Trajectory, window: tuple, t0: float, t1: float,
                   offsets: Iterable[float], p: Optional[float] = None,
                   margin: float = 0.1) -> FractionalFit:
    """I(h) = int_{t0}^{t1} int_V |Dv(t+h) - Dv(t)|^2 for offsets h = j tau.

    ``window`` is the spatial box ``(lo, hi)`` with one entry per axis.
    """
    offsets = np.asarray(list(offsets), dtype=float)
    if len(offsets) < 3:
        raise ValueError("need at least three offsets")
    hmax = min(1.0, t0 - tr.t0, tr.T_end - t1)
    js = np.rint(offsets / tr.tau).astype(int)
    if np.any(np.abs(js * tr.tau - offsets) > 1e-9 * tr.tau) or np.any(js <= 0):
        raise ValueError("offsets must be positive multiples of tau")
    if np.any(offsets >= hmax + 1e-12):
        raise ValueError(f"offsets must stay below min(1, t0, T - t1) = {hmax}")
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in window)
    cc = tr.grid.cell_coords()
    cmask = np.all((cc >= lo) & (cc <= hi), axis=-1)
    t = tr.times
    tol = _TIME_EPS * tr.tau
    ks = np.nonzero((t >= t0 - tol) & (t <= t1 + tol))[0]
    Dv = tr.gradients[:, cmask]
    w = tr.grid.weight * tr.tau
    I = np.array([w * float(np.sum((Dv[ks + j] - Dv[ks]) ** 2)) for j in js])
    if p is None:
        p = default_p(tr.grid.n)
    target = 0.5 - 1.0 / p
    if np.any(I <= 0):
        slope = math.nan
    else:
        slope = float(np.polyfit(np.log(offsets), np.log(I), 1)[0])
    return FractionalFit(offsets, I, slope, target, float(p), margin)


class ShiftBounds(NamedTuple):
    lhs_v: float
    lhs_Dv: float
    rhs_v: float
    rhs_Dv: float
    slack: float
    holds: bool


def average_shift_bounds(tr: Trajectory, Q: ParabolicCylinder, frac: float,
                         allowance: float = 1.1) -> ShiftBounds:
    """|(v)_{Q_fr} - (v)_{Q_r}| <= r f^{-(n/2+1)} E^{1/2} and the Dv analogue.

    ``slack`` is the largest measured lhs/rhs; the check holds when it does
    not exceed ``allowance`` (discrete sample counts only approximate the
    volume ratio f^{n+2} used in the continuum argument).
    """
    if not 0 < frac <= 1:
        raise ValueError("frac must lie in (0, 1]")
    _require_inside(tr, Q)
    n = tr.grid.n
    E = compute_excess(tr, Q).E
    inner = Q.scaled(frac)
    lhs_v = float(np.linalg.norm(cylinder_average(tr, inner, "v") - cylinder_average(tr, Q, "v")))
    lhs_Dv = float(np.linalg.norm(cylinder_average(tr, inner, "Dv") - cylinder_average(tr, Q, "Dv")))
    factor = frac ** -(n / 2 + 1) * math.sqrt(E)
    rhs_v, rhs_Dv = Q.r * factor, factor
    ratios = [l / r_ for l, r_ in ((lhs_v, rhs_v), (lhs_Dv, rhs_Dv)) if r_ > 0]
    ratios += [math.inf for l, r_ in ((lhs_v, rhs_v), (lhs_Dv, rhs_Dv)) if r_ == 0 and l > 1e-14]
    slack = max(ratios, default=0.0)
    return ShiftBounds(lhs_v, lhs_Dv, rhs_v, rhs_Dv, slack, slack <= allowance)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(x) -> str:
    return repr(float(x))


def write_excess_scan(path, reports: Iterable[ExcessReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "t", "r", "term_affine", "term_grad", "E"])
        for rep in reports:
            Q = rep.cylinder
            xs = ";".join(_fmt(c) for c in Q.center)
            w.writerow([xs, _fmt(Q.t), _fmt(Q.r), _fmt(rep.term_affine),
                        _fmt(rep.term_grad), _fmt(rep.E)])


def write_fractional_fit(path, fit: FractionalFit) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "I"])
        for h, I in zip(fit.offsets, fit.integrals):
            w.writerow([_fmt(h), _fmt(I)])
        w.writerow(["slope", _fmt(fit.slope)])
        w.writerow(["target", _fmt(fit.target)])
        w.writerow(["p", _fmt(fit.p)])
        w.writerow(["pass", str(fit.passed).lower()])
