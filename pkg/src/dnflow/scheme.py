"""Implicit minimizing-movement scheme for d/dt Dpsi(v) = div DF(Dv).

Each step minimizes the strictly convex discrete functional

    J(u) = h^n sum_cells F(Du) + (h^n / tau) sum_nodes [psi(u) - Dpsi(v_prev).u]

whose node-scaled gradient is the Euler-Lagrange residual

    r(u) = (Dpsi(u) - Dpsi(v_prev)) / tau - div DF(Du).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, List, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .discretization import Grid, VectorField
from .potentials import Integrand, Potential, conjugate_at_gradient

logger = logging.getLogger(__name__)

__all__ = [
    "SchemeConfig",
    "SchemeError",
    "MaxIterations",
    "LineSearchFailure",
    "StepStats",
    "Trajectory",
    "Interpolants",
    "step_objective",
    "step_residual",
    "step_minimize",
    "run_scheme",
    "build_interpolants",
    "discrete_energies",
    "laplacian_eigenvalue",
    "sine_mode",
]


class SchemeError(RuntimeError):
    """A time step could not be solved; ``step`` is 1-based, ``None`` if unknown."""

    def __init__(self, msg, residual=math.nan, step=None, partial=None):
        super().__init__(msg)
        self.residual = residual
        self.step = step
        self.partial = partial


class MaxIterations(SchemeError):
    pass


class LineSearchFailure(SchemeError):
    pass


@dataclass(frozen=True)
class SchemeConfig:
    T: float
    N: int
    abs_tol: float = 1e-10
    rel_tol: float = 1e-12
    newton_max_iter: int = 50
    cg_rtol: float = 1e-13
    fallback: bool = False
    fallback_max_iter: int = 20000

    def __post_init__(self):
        if not (self.T > 0 and self.N >= 1):
            raise ValueError("need T > 0 and N >= 1")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")

    @property
    def tau(self) -> float:
        return self.T / self.N


@dataclass(frozen=True)
class StepStats:
    iterations: int
    residual: float
    objective_trace: tuple = ()


def _arr(u):
    return u.values if isinstance(u, VectorField) else np.asarray(u, dtype=float)


def step_objective(u, v_prev, tau, potential: Potential, integrand: Integrand,
                   grid: Optional[Grid] = None) -> float:
    if grid is None:
        grid = u.grid
    ua, va = _arr(u), _arr(v_prev)
    cells = integrand.eval(grid.grad(ua))
    nodes = potential.eval(ua) - np.sum(potential.grad(va) * ua, axis=-1)
    return float(grid.weight * (np.sum(cells) + np.sum(nodes) / tau))


def step_residual(u, v_prev, tau, potential: Potential, integrand: Integrand,
                  grid: Optional[Grid] = None) -> np.ndarray:
    if grid is None:
        grid = u.grid
    ua, va = _arr(u), _arr(v_prev)
    return (potential.grad(ua) - potential.grad(va)) / tau - grid.div(integrand.grad(grid.grad(ua)))


class _StepProblem:
    def __init__(self, grid, v_prev, tau, potential, integrand):
        self.grid = grid
        self.tau = tau
        self.psi = potential
        self.F = integrand
        self.w_prev = potential.grad(v_prev)

    def objective(self, u):
        g = self.grid
        nodes = self.psi.eval(u) - np.sum(self.w_prev * u, axis=-1)
        return g.weight * (np.sum(self.F.eval(g.grad(u))) + np.sum(nodes) / self.tau)

    def residual(self, u):
        g = self.grid
        return (self.psi.grad(u) - self.w_prev) / self.tau - g.div(self.F.grad(g.grad(u)))

    def hessian_operator(self, u) -> LinearOperator:
        g = self.grid
        Hpsi = self.psi.hess(u)
        Du = g.grad(u)
        HF = self.F.hess(Du)
        m, n = self.F.m, self.F.n
        HFf = HF.reshape(HF.shape[:-4] + (m * n, m * n))
        shape = u.shape
        tau = self.tau

        def matvec(x):
            d = x.reshape(shape)
            a = np.einsum("...ij,...j->...i", Hpsi, d) / tau
            Dd = g.grad(d)
            flux = np.einsum("...ij,...j->...i", HFf, Dd.reshape(Dd.shape[:-2] + (m * n,)))
            return (a - g.div(flux.reshape(Dd.shape))).ravel()

        return LinearOperator((u.size, u.size), matvec=matvec, dtype=float)


def _armijo(problem, u, J, r, p, slope, rnorm, max_halvings=60):
    eps = np.finfo(float).eps
    alpha = 1.0
    for _ in range(max_halvings):
        cand = u + alpha * p
        Jc = problem.objective(cand)
        if Jc <= J + 1e-4 * alpha * slope:
            return alpha, cand, Jc
        # at round-off level J no longer resolves progress; accept a step
        # that keeps J within rounding and lowers the residual
        if Jc <= J + 8 * eps * max(abs(J), 1e-300):
            rc = problem.residual(cand)
            if np.max(np.abs(rc)) < rnorm:
                return alpha, cand, Jc
        alpha *= 0.5
    return None, u, J


def _newton(problem: _StepProblem, u, cfg: SchemeConfig):
    r = problem.residual(u)
    rnorm = float(np.max(np.abs(r))) if r.size else 0.0
    target = max(cfg.abs_tol, cfg.rel_tol * rnorm)
    J = problem.objective(u)
    trace = [J]
    w = problem.grid.weight
    for it in range(cfg.newton_max_iter + 1):
        if rnorm <= target:
            return u, StepStats(it, rnorm, tuple(trace))
        if it == cfg.newton_max_iter:
            break
        H = problem.hessian_operator(u)
        p, info = cg(H, -r.ravel(), rtol=cfg.cg_rtol, atol=0.0, maxiter=10 * u.size + 100)
        p = p.reshape(u.shape)
        slope = w * float(np.sum(r * p))
        if info < 0 or not np.all(np.isfinite(p)) or slope >= 0:
            p = -r
            slope = -w * float(np.sum(r * r))
        alpha, u_new, J_new = _armijo(problem, u, J, r, p, slope, rnorm)
        if alpha is None:
            raise LineSearchFailure(
                f"line search failed at Newton iteration {it} (residual {rnorm:.3e}); "
                "inconsistent Hessian?", residual=rnorm
            )
        u, J = u_new, J_new
        trace.append(J)
        r = problem.residual(u)
        rnorm = float(np.max(np.abs(r)))
    raise MaxIterations(
        f"Newton did not converge in {cfg.newton_max_iter} iterations "
        f"(residual {rnorm:.3e}, target {target:.3e})", residual=rnorm
    )


def _barzilai_borwein(problem: _StepProblem, u, cfg: SchemeConfig):
    """Monotone BB gradient descent on J for Hessian-free nonlinearities."""
    w = problem.grid.weight
    r = problem.residual(u)
    rnorm = float(np.max(np.abs(r))) if r.size else 0.0
    target = max(cfg.abs_tol, cfg.rel_tol * rnorm)
    J = problem.objective(u)
    # first step length from the upper curvature bound (in node units)
    h = problem.grid.h
    n = problem.grid.n
    step = 1.0 / (problem.psi.upper / problem.tau + 4 * n * problem.F.upper / h**2)
    for it in range(cfg.fallback_max_iter + 1):
        if rnorm <= target:
            return u, StepStats(it, rnorm, ())
        if it == cfg.fallback_max_iter:
            break
        p = -step * r
        slope = -step * w * float(np.sum(r * r))
        alpha, u_new, J_new = _armijo(problem, u, J, r, p, slope, rnorm)
        if alpha is None:
            raise LineSearchFailure(f"BB line search failed (residual {rnorm:.3e})", residual=rnorm)
        r_new = problem.residual(u_new)
        s = (u_new - u).ravel()
        y = (r_new - r).ravel()
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else step
        u, J, r = u_new, J_new, r_new
        rnorm = float(np.max(np.abs(r)))
    raise MaxIterations(f"BB did not converge (residual {rnorm:.3e})", residual=rnorm)


def step_minimize(v_prev, tau, cfg: SchemeConfig, potential: Potential,
                  integrand: Integrand, grid: Optional[Grid] = None, return_stats=False):
    """Minimize the step functional starting from ``v_prev``.

    Returns the minimizer as a VectorField when ``v_prev`` is one, otherwise
    as an array; with ``return_stats`` a :class:`StepStats` is returned too.
    """
    if grid is None:
        grid = v_prev.grid
    va = _arr(v_prev)
    problem = _StepProblem(grid, va, tau, potential, integrand)
    use_bb = cfg.fallback or potential.hess is None or integrand.hess is None
    solver = _barzilai_borwein if use_bb else _newton
    u, stats = solver(problem, va.copy(), cfg)
    out = VectorField(grid, u) if isinstance(v_prev, VectorField) else u
    return (out, stats) if return_stats else out


@dataclass(eq=False)
class Trajectory:
    """Time samples v^0..v^N at t0 + k*tau on interior nodes, shape (N+1, *I, m)."""

    grid: Grid
    steps: np.ndarray
    tau: float
    potential: Optional[Potential] = None
    integrand: Optional[Integrand] = None
    stats: List[StepStats] = field(default_factory=list)
    t0: float = 0.0

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=float)
        if self.steps.shape[1: 1 + self.grid.n] != self.grid.interior_shape:
            raise ValueError("trajectory steps do not match the grid")

    @property
    def N(self) -> int:
        return self.steps.shape[0] - 1

    @property
    def m(self) -> int:
        return self.steps.shape[-1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.tau * np.arange(self.N + 1)

    @property
    def T_end(self) -> float:
        return self.t0 + self.tau * self.N

    @property
    def residuals(self) -> np.ndarray:
        return np.array([s.residual for s in self.stats])

    @property
    def iterations(self) -> np.ndarray:
        return np.array([s.iterations for s in self.stats], dtype=int)

    def field(self, k: int) -> VectorField:
        return VectorField(self.grid, self.steps[k])

    @cached_property
    def gradients(self) -> np.ndarray:
        """Dv^k on cells for every step, shape (N+1, *cells, m, n)."""
        return np.stack([self.grid.grad(v) for v in self.steps])

    @classmethod
    def from_function(cls, grid: Grid, f: Callable, times: np.ndarray, **kw) -> "Trajectory":
        """Sample ``f(x, t)`` at interior nodes for equally spaced ``times``."""
        times = np.asarray(times, dtype=float)
        tau = float(times[1] - times[0]) if len(times) > 1 else 1.0
        x = grid.node_coords()
        steps = []
        for t in times:
            v = np.asarray(f(x, t), dtype=float)
            steps.append(v[..., None] if v.ndim == grid.n else v)
        return cls(grid, np.stack(steps), tau, t0=float(times[0]), **kw)


def run_scheme(g: VectorField, cfg: SchemeConfig, potential: Potential,
               integrand: Integrand) -> Trajectory:
    grid = g.grid
    if potential.m != g.m or integrand.m != g.m or integrand.n != grid.n:
        raise ValueError("potential/integrand shapes do not match the initial datum")
    tau = cfg.tau
    steps = np.empty((cfg.N + 1,) + g.values.shape)
    steps[0] = g.values
    stats: List[StepStats] = []
    for k in range(1, cfg.N + 1):
        try:
            steps[k], st = step_minimize(steps[k - 1], tau, cfg, potential, integrand,
                                         grid=grid, return_stats=True)
        except SchemeError as exc:
            exc.step = k
            exc.partial = Trajectory(grid, steps[:k].copy(), tau, potential, integrand, stats)
            raise
        stats.append(st)
        logger.debug("step %d: %d iterations, residual %.3e", k, st.iterations, st.residual)
    return Trajectory(grid, steps, tau, potential, integrand, stats)


def discrete_energies(tr: Trajectory) -> dict:
    """Per-step integrals of psi*(Dpsi(v^k)), F(Dv^k), |v^k|^2 and |Dv^k|^2."""
    w = tr.grid.weight
    Dv = tr.gradients
    cell_axes = tuple(range(1, Dv.ndim))
    node_axes = tuple(range(1, tr.steps.ndim))
    out = {
        "l2": w * np.sum(tr.steps**2, axis=node_axes),
        "grad_l2": w * np.sum(Dv**2, axis=cell_axes),
    }
    if tr.potential is not None:
        out["psi_star"] = w * np.sum(conjugate_at_gradient(tr.potential, tr.steps),
                                     axis=tuple(range(1, tr.steps.ndim - 1)))
    if tr.integrand is not None:
        out["F"] = w * np.sum(tr.integrand.eval(Dv), axis=tuple(range(1, Dv.ndim - 2)))
        out["dissipation"] = w * np.sum(
            tr.integrand.grad(Dv) * Dv, axis=cell_axes
        )
    return out


def laplacian_eigenvalue(grid: Grid, modes) -> float:
    """Eigenvalue of -div(grad) for the sine mode prod_a sin(pi k_a (x_a - o_a) / L_a).

    In 1-D this is (2/h^2)(1 - cos(pi h)) for the first mode on the unit
    interval.  The 2-D cell stencil averages differences over cell edges,
    which gives (2/h^2)(1 - c_1 c_2) with c_a = cos(pi k_a h / L_a).
    """
    modes = tuple(int(k) for k in np.atleast_1d(modes))
    if len(modes) != grid.n:
        raise ValueError("need one mode number per axis")
    h = grid.h
    cs = [math.cos(math.pi * k * h / L) for k, L in zip(modes, grid.extents)]
    return 2.0 / h**2 * (1.0 - math.prod(cs))


def sine_mode(grid: Grid, modes) -> np.ndarray:
    """Nodal samples of the discrete Dirichlet eigenvector, shape (*I,)."""
    x = grid.node_coords()
    out = np.ones(grid.interior_shape)
    for a, k in enumerate(np.atleast_1d(modes)):
        out = out * np.sin(math.pi * int(k) * (x[..., a] - grid.origin[a]) / grid.extents[a])
    return out


class Interpolants:
    """Time interpolants of a trajectory with tau_k = t0 + k tau.

    ``v_pc`` is the right-continuous piecewise constant interpolant (v^k on
    (tau_{k-1}, tau_k], g at t0), ``u_pl`` the piecewise linear interpolant of
    v^k and ``w_pl`` the piecewise linear interpolant of Dpsi(v^k).
    """

    def __init__(self, tr: Trajectory):
        self.tr = tr
        self._w = None if tr.potential is None else tr.potential.grad(tr.steps)

    def _locate(self, t: float):
        tr = self.tr
        x = (t - tr.t0) / tr.tau
        if x < -1e-12 or x > tr.N + 1e-9:
            raise ValueError(f"time {t} outside [{tr.t0}, {tr.T_end}]")
        if x <= 1e-12:
            return 0, 1.0
        k = min(max(int(math.ceil(x - 1e-9)), 1), tr.N)
        return k, min(max(x - (k - 1), 0.0), 1.0)

    # (k, s) gives the point tau_{k-1} + s*tau of step interval k
    def v_pc_at(self, k: int, s: float) -> np.ndarray:
        return self.tr.steps[k] if s > 0 or k == 0 else self.tr.steps[k - 1]

    def u_pl_at(self, k: int, s: float) -> np.ndarray:
        st = self.tr.steps
        return st[k] if k == 0 else (1.0 - s) * st[k - 1] + s * st[k]

    def w_pl_at(self, k: int, s: float) -> np.ndarray:
        if self._w is None:
            raise ValueError("trajectory carries no potential")
        return self._w[k] if k == 0 else (1.0 - s) * self._w[k - 1] + s * self._w[k]

    def v_pc(self, t: float) -> np.ndarray:
        return self.v_pc_at(*self._locate(t))

    def u_pl(self, t: float) -> np.ndarray:
        return self.u_pl_at(*self._locate(t))

    def w_pl(self, t: float) -> np.ndarray:
        return self.w_pl_at(*self._locate(t))

    def time_integral(self, f: Callable[[int, float], float], degree: int) -> float:
        """Exact integral over [t0, T] of f, a polynomial of ``degree`` on each step."""
        npts = degree // 2 + 1
        s, wts = np.polynomial.legendre.leggauss(npts)
        s = 0.5 * (s + 1.0)
        wts = 0.5 * wts * self.tr.tau
        total = 0.0
        for k in range(1, self.tr.N + 1):
            total += sum(wj * f(k, float(sj)) for sj, wj in zip(s, wts))
        return float(total)

    def gap_l2_squared(self) -> float:
        """int_0^T int_U |u_pl - v_pc|^2 dx dt evaluated from the interpolants."""
        g = self.tr.grid

        def integrand(k, s):
            d = self.u_pl_at(k, s) - self.v_pc_at(k, s)
            return g.weight * float(np.sum(d * d))

        return self.time_integral(integrand, degree=2)

    def tau_third_sum(self) -> float:
        """(tau/3) sum_k int_U |v^k - v^{k-1}|^2 dx."""
        d = np.diff(self.tr.steps, axis=0)
        return self.tr.tau / 3.0 * self.tr.grid.weight * float(np.sum(d * d))


def build_interpolants(tr: Trajectory) -> Interpolants:
    return Interpolants(tr)
