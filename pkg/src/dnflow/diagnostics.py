"""Discrete energy identities and energy inequalities along a trajectory.

Time derivatives are backward differences, matching the scheme.  Wherever a
continuum identity contains ``v . DF(Dv) Dphi`` we use the discrete product
rule remainder ``grad(phi v) - phi_cells Dv`` in place of ``v Dphi``; with it
summation by parts is exact and the identity residuals measure only the
time discretization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .discretization import Grid
from .excess import CylinderOutOfDomain, ParabolicCylinder, _ball, _step_indices
from .potentials import Integrand, Potential, conjugate_at_gradient
from .scheme import Trajectory

__all__ = [
    "Profile",
    "Cutoff",
    "CutoffSamples",
    "EnergyReport",
    "IdentityResidual",
    "constant_energy_bound_1",
    "constant_energy_bound_2",
    "constant_caccioppoli",
    "constant_global_1",
    "constant_global_2",
    "check_identity_1",
    "check_identity_2",
    "dissipation_identity_residual",
    "check_energy_bound_1",
    "check_energy_bound_2",
    "check_caccioppoli",
    "check_global_bound_1",
    "check_global_bound_2",
    "check_sbp",
    "write_energy_reports",
]


# ---------------------------------------------------------------------------
# constants from the proofs


def constant_energy_bound_1(theta, Theta, lam, Lam) -> float:
    return (Theta + 2.0 * Lam**2 / lam) / (0.5 * min(theta, lam))


def constant_energy_bound_2(theta, lam, Lam) -> float:
    return Lam * (1.0 + 2.0 / theta) / (0.5 * min(theta, lam))


def constant_caccioppoli(theta, lam, Lam) -> float:
    """Energy bound 2 constant times sup(eta |eta_t| + |D eta|^2) r^2 <= 2 + 4."""
    return 6.0 * constant_energy_bound_2(theta, lam, Lam)


def constant_global_1(theta, Theta, lam) -> float:
    return (0.5 * Theta) / min(0.5 * theta, lam)


def constant_global_2(theta, lam, Lam) -> float:
    return (0.5 * Lam) / min(0.5 * lam, theta)


def _constants(tr: Trajectory):
    if tr.potential is None or tr.integrand is None:
        raise ValueError("trajectory carries no potential/integrand")
    p, F = tr.potential, tr.integrand
    return p.theta, p.Theta, F.lam, F.Lam


# ---------------------------------------------------------------------------
# cutoffs


def _smoothstep(s):
    # C-infinity transition from 1 (s <= 0) to 0 (s >= 1) and its derivative
    s = np.clip(s, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
        b = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        val = a / (a + b)
        da = np.where(s < 1, -a / np.where(s < 1, (1.0 - s) ** 2, 1.0), 0.0)
        db = np.where(s > 0, b / np.where(s > 0, s**2, 1.0), 0.0)
        der = (da * (a + b) - a * (da + db)) / (a + b) ** 2
    inside = (s > 0) & (s < 1)
    return val, np.where(inside, der, 0.0)


@dataclass(frozen=True)
class Profile:
    """Radial profile of the distance d to ``center``.

    kind "flat" is identically one; "tent" ramps linearly from 1 at
    d <= inner to 0 at d >= outer; "bump" does the same with a smooth step.
    """

    kind: str = "flat"
    center: tuple = (0.0,)
    inner: float = 0.0
    outer: float = math.inf

    def __post_init__(self):
        if self.kind not in ("flat", "tent", "bump"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        if self.kind != "flat" and not 0 <= self.inner < self.outer < math.inf:
            raise ValueError("need 0 <= inner < outer < inf")

    def value_and_slope(self, d: np.ndarray):
        """eta(d) and d eta / d d."""
        d = np.asarray(d, dtype=float)
        if self.kind == "flat":
            return np.ones_like(d), np.zeros_like(d)
        s = (d - self.inner) / (self.outer - self.inner)
        if self.kind == "tent":
            val = np.clip(1.0 - s, 0.0, 1.0)
            slope = np.where((s > 0) & (s < 1), -1.0, 0.0)
        else:
            val, slope = _smoothstep(s)
        return val, slope / (self.outer - self.inner)

    def evaluate(self, x: np.ndarray):
        """Value and gradient at points x of shape (..., n)."""
        x = np.asarray(x, dtype=float)
        y = x - np.array(self.center)
        d = np.sqrt(np.sum(y * y, axis=-1))
        val, slope = self.value_and_slope(d)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(d[..., None] > 0, y / np.where(d > 0, d, 1.0)[..., None], 0.0)
        return val, slope[..., None] * unit


class CutoffSamples(NamedTuple):
    eta_n: np.ndarray  # (K, *I)
    eta_t_n: np.ndarray
    Deta_n: np.ndarray  # (K, *I, n)
    eta_c: np.ndarray  # (K, *cells)
    eta_t_c: np.ndarray
    Deta_c: np.ndarray


@dataclass(frozen=True)
class Cutoff:
    """eta(x, t) = space(x) * time(t), with derivatives taken analytically."""

    space: Profile = Profile()
    time: Profile = Profile()

    @classmethod
    def flat(cls) -> "Cutoff":
        return cls()

    @classmethod
    def centered(cls, grid: Grid, t0: float, T: float, kind: str = "tent",
                 plateau: float = 0.0, collar: float = 0.0) -> "Cutoff":
        """Profile centred in the box and the time interval, vanishing
        ``collar`` before the boundary; ``plateau`` is the fraction of the
        radius where eta is one."""
        c = tuple(o + 0.5 * e for o, e in zip(grid.origin, grid.extents))
        R = 0.5 * min(grid.extents) - collar
        tc, Rt = 0.5 * (t0 + T), 0.5 * (T - t0) - collar
        return cls(Profile(kind, c, plateau * R, R), Profile(kind, (tc,), plateau * Rt, Rt))

    @property
    def support(self) -> dict:
        return {
            "center": self.space.center, "radius": self.space.outer,
            "time_center": self.time.center[0], "time_radius": self.time.outer,
        }

    def __call__(self, x, t):
        sv, _ = self.space.evaluate(x)
        tv, _ = self.time.evaluate(np.atleast_1d(t)[..., None])
        return sv * tv

    def sample(self, grid: Grid, times: np.ndarray) -> CutoffSamples:
        times = np.asarray(times, dtype=float)
        tv, tg = self.time.evaluate(times[:, None])
        tg = tg[:, 0]
        out = []
        for pts in (grid.node_coords(), grid.cell_coords()):
            sv, sg = self.space.evaluate(pts)
            ex = (slice(None),) + (None,) * grid.n
            out += [tv[ex] * sv, tg[ex] * sv, tv[ex + (None,)] * sg]
        return CutoffSamples(*out)

    def vanishes_on_boundary(self, grid: Grid, t0: float, T: float) -> bool:
        """True when eta = 0 on the spatial boundary and at t0 (for flat
        profiles the zero boundary datum plays this role)."""
        ok = True
        if self.space.kind != "flat":
            full = grid.all_node_coords()
            idx = tuple(grid.boundary_nodes().T)
            ok &= bool(np.all(self.space.evaluate(full[idx])[0] == 0))
        if self.time.kind != "flat":
            ok &= bool(self.time.evaluate(np.array([[t0]]))[0][0] == 0)
        return ok


# ---------------------------------------------------------------------------
# reports


@dataclass
class EnergyReport:
    name: str
    lhs: float
    rhs: float
    constant: float
    extras: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs <= 0 else math.inf

    @property
    def tol(self) -> float:
        return 1e-12 * (abs(self.lhs) + self.constant * abs(self.rhs)) + 1e-300

    @property
    def passed(self) -> bool:
        return bool(self.lhs <= self.constant * self.rhs + self.tol)


class IdentityResidual(NamedTuple):
    series: np.ndarray  # R_k for k = 1..N
    l1: float  # tau * sum |R_k|


def _sum_space(x: np.ndarray, grid: Grid, lead: int = 1) -> np.ndarray:
    """h^n sum over every axis after the first ``lead`` ones."""
    return grid.weight * np.sum(x, axis=tuple(range(lead, x.ndim)))


def _remainder(grid: Grid, phi_n: np.ndarray, phi_c: np.ndarray, v: np.ndarray,
               Dv: np.ndarray) -> np.ndarray:
    """grad(phi v) - phi_cells Dv, the discrete stand-in for v (x) Dphi."""
    return grid.grad(phi_n[..., None] * v) - phi_c[..., None, None] * Dv


# ---------------------------------------------------------------------------
# identities


def check_identity_1(tr: Trajectory, phi: Cutoff) -> IdentityResidual:
    """Residual of d/dt int psi*(Dpsi(v)) phi + int phi DF(Dv).Dv
    - int (psi*(Dpsi(v)) phi_t - v.DF(Dv)Dphi) per step."""
    grid, tau = tr.grid, tr.tau
    cs = phi.sample(grid, tr.times)
    Dv = tr.gradients
    star = conjugate_at_gradient(tr.potential, tr.steps)  # (K, *I)
    A = _sum_space(star * cs.eta_n, grid)
    R = np.empty(tr.N)
    for k in range(1, tr.N + 1):
        G = tr.integrand.grad(Dv[k])
        diss = grid.inner(cs.eta_c[k][..., None, None] * G, Dv[k])
        rem = _remainder(grid, cs.eta_n[k], cs.eta_c[k], tr.steps[k], Dv[k])
        rhs = grid.inner(star[k], cs.eta_t_n[k]) - grid.inner(G, rem)
        R[k - 1] = (A[k] - A[k - 1]) / tau + diss - rhs
    return IdentityResidual(R, float(tau * np.sum(np.abs(R))))


def check_identity_2(tr: Trajectory, phi: Cutoff) -> IdentityResidual:
    """Residual of d/dt int phi F(Dv) + int phi d_t(Dpsi(v)).v_t
    - int (phi_t F(Dv) - v_t.DF(Dv)Dphi) per step."""
    grid, tau = tr.grid, tr.tau
    cs = phi.sample(grid, tr.times)
    Dv = tr.gradients
    Fv = tr.integrand.eval(Dv)  # (K, *cells)
    B = _sum_space(Fv * cs.eta_c, grid)
    P = tr.potential.grad(tr.steps)
    R = np.empty(tr.N)
    for k in range(1, tr.N + 1):
        vt = (tr.steps[k] - tr.steps[k - 1]) / tau
        Dvt = (Dv[k] - Dv[k - 1]) / tau
        G = tr.integrand.grad(Dv[k])
        mixed = grid.inner(cs.eta_n[k][..., None] * (P[k] - P[k - 1]) / tau, vt)
        rem = _remainder(grid, cs.eta_n[k], cs.eta_c[k], vt, Dvt)
        rhs = grid.inner(cs.eta_t_c[k], Fv[k]) - grid.inner(G, rem)
        R[k - 1] = (B[k] - B[k - 1]) / tau + mixed - rhs
    return IdentityResidual(R, float(tau * np.sum(np.abs(R))))


def dissipation_identity_residual(tr: Trajectory, u) -> np.ndarray:
    """Per-step residual of d/dt int F(Dv)u = int [-DF(Dv)Du - u d_t(Dpsi(v))].v_t
    for a time-independent weight ``u(x)`` sampled at nodes and cell centres."""
    grid, tau = tr.grid, tr.tau
    u, uc = (np.asarray(u(x), dtype=float) for x in (grid.node_coords(), grid.cell_coords()))
    Dv = tr.gradients
    out = np.empty(tr.N)
    for k in range(1, tr.N + 1):
        vt = (tr.steps[k] - tr.steps[k - 1]) / tau
        dF = grid.inner(tr.integrand.eval(Dv[k]) - tr.integrand.eval(Dv[k - 1]), uc) / tau
        G = tr.integrand.grad(Dv[k])
        # DF(Dv) Du . v_t expressed through the discrete product rule
        flux = grid.inner(G, grid.grad(u[..., None] * vt) - uc[..., None, None] * grid.grad(vt))
        dpsi = (tr.potential.grad(tr.steps[k]) - tr.potential.grad(tr.steps[k - 1])) / tau
        src = grid.inner(u[..., None] * dpsi, vt)
        out[k - 1] = dF + flux + src
    return out


# ---------------------------------------------------------------------------
# inequalities


def check_energy_bound_1(tr: Trajectory, eta: Cutoff) -> EnergyReport:
    grid, tau = tr.grid, tr.tau
    cs = eta.sample(grid, tr.times)
    v2 = np.sum(tr.steps**2, axis=-1)
    Dv2 = np.sum(tr.gradients**2, axis=(-2, -1))
    sup = _sum_space(cs.eta_n**2 * v2, grid)
    dissip = tau * np.sum(_sum_space(cs.eta_c[1:] ** 2 * Dv2[1:], grid))
    weight = cs.eta_n * np.abs(cs.eta_t_n) + np.sum(cs.Deta_n**2, axis=-1)
    rhs = tau * np.sum(_sum_space(weight[1:] * v2[1:], grid))
    C = constant_energy_bound_1(*_constants(tr))
    return EnergyReport("energy_bound_1", float(np.max(sup) + dissip), float(rhs), C)


def check_energy_bound_2(tr: Trajectory, eta: Cutoff) -> EnergyReport:
    grid, tau = tr.grid, tr.tau
    cs = eta.sample(grid, tr.times)
    Dv2 = np.sum(tr.gradients**2, axis=(-2, -1))
    vt2 = np.sum(np.diff(tr.steps, axis=0) ** 2, axis=-1) / tau**2
    sup = _sum_space(cs.eta_c**2 * Dv2, grid)
    dissip = tau * np.sum(_sum_space(cs.eta_n[1:] ** 2 * vt2, grid))
    weight = cs.eta_c * np.abs(cs.eta_t_c) + np.sum(cs.Deta_c**2, axis=-1)
    rhs = tau * np.sum(_sum_space(weight[1:] * Dv2[1:], grid))
    theta, _, lam, Lam = _constants(tr)
    C = constant_energy_bound_2(theta, lam, Lam)
    return EnergyReport("energy_bound_2", float(np.max(sup) + dissip), float(rhs), C)


def check_caccioppoli(tr: Trajectory, Q: ParabolicCylinder) -> EnergyReport:
    """int_{Q_r}|v_t|^2 against (C/r^2) int_{Q_2r}|Dv - (Dv)_{Q_2r}|^2."""
    big = Q.scaled(2.0)
    if not big.inside(tr):
        raise CylinderOutOfDomain("the doubled cylinder leaves the space-time domain")
    grid, tau = tr.grid, tr.tau
    ks = _step_indices(tr, Q, first=1)
    nmask = _ball(grid.node_coords(), Q)
    vt = (tr.steps[ks] - tr.steps[ks - 1])[:, nmask] / tau
    lhs = tau * grid.weight * float(np.sum(vt**2))
    kb = _step_indices(tr, big)
    cmask = _ball(grid.cell_coords(), big)
    Dv = tr.gradients[kb][:, cmask]
    A = Dv.mean(axis=(0, 1))
    rhs = tau * grid.weight * float(np.sum((Dv - A) ** 2)) / Q.r**2
    theta, _, lam, Lam = _constants(tr)
    return EnergyReport("caccioppoli", lhs, rhs, constant_caccioppoli(theta, lam, Lam))


def _running_bound(sup_terms: np.ndarray, dissip_terms: np.ndarray, tau: float):
    """Per-j form max_j [a_j + tau sum_{k<=j} b_k] and the literal max_k a_k + tau sum_k b_k."""
    running = sup_terms[1:] + tau * np.cumsum(dissip_terms[1:])
    literal = np.max(sup_terms[1:]) + tau * np.sum(dissip_terms[1:])
    return float(np.max(running)), float(literal)


def _global_report(name, running, literal, rhs, C) -> EnergyReport:
    rep = EnergyReport(name, running, rhs, C)
    lit = EnergyReport(name + "_literal", literal, rhs, 2.0 * C)
    rep.extras = {"literal_lhs": literal, "literal_constant": 2.0 * C,
                  "literal_passed": lit.passed}
    return rep


def check_global_bound_1(tr: Trajectory) -> EnergyReport:
    """max_j (|v^j|^2 + tau sum_{k<=j}|Dv^k|^2) <= C1 |g|^2.

    The proof delivers this running form; the displayed form with the max
    and the full sum taken separately only follows with 2 C1, and that
    variant is recorded under ``extras``.
    """
    e = _norms(tr)
    theta, Theta, lam, _ = _constants(tr)
    running, literal = _running_bound(e["l2"], e["grad_l2"], tr.tau)
    return _global_report("global_bound_1", running, literal, float(e["l2"][0]),
                          constant_global_1(theta, Theta, lam))


def check_global_bound_2(tr: Trajectory) -> EnergyReport:
    """max_j (|Dv^j|^2 + tau sum_{k<=j}|(v^k - v^{k-1})/tau|^2) <= C2 |Dg|^2."""
    e = _norms(tr)
    theta, _, lam, Lam = _constants(tr)
    vt2 = np.concatenate([[0.0], _sum_space(np.diff(tr.steps, axis=0) ** 2, tr.grid)]) / tr.tau**2
    running, literal = _running_bound(e["grad_l2"], vt2, tr.tau)
    return _global_report("global_bound_2", running, literal, float(e["grad_l2"][0]),
                          constant_global_2(theta, lam, Lam))


def _norms(tr: Trajectory) -> dict:
    w = tr.grid.weight
    return {
        "l2": w * np.sum(tr.steps**2, axis=tuple(range(1, tr.steps.ndim))),
        "grad_l2": w * np.sum(tr.gradients**2, axis=tuple(range(1, tr.gradients.ndim))),
    }


def check_sbp(grid: Grid, m: int = 1, pairs: int = 100, seed: int = 0) -> float:
    """Largest |<Dv,P> + <v,div P>| / (|Dv||P| + |v||div P|) over random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        v = rng.standard_normal(grid.interior_shape + (m,))
        P = rng.standard_normal(grid.cells + (m, grid.n))
        Dv, dP = grid.grad(v), grid.div(P)
        a, b = grid.inner(Dv, P), grid.inner(v, dP)
        scale = math.sqrt(grid.inner(Dv, Dv) * grid.inner(P, P)) + math.sqrt(
            grid.inner(v, v) * grid.inner(dP, dP))
        worst = max(worst, abs(a + b) / scale)
    return worst


def write_energy_reports(path, reports: Iterable[EnergyReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "lhs", "rhs", "constant", "ratio", "pass"])
        for r in reports:
            w.writerow([r.name, repr(float(r.lhs)), repr(float(r.rhs)), repr(float(r.constant)),
                        repr(float(r.ratio)), str(r.passed).lower()])
