"""Convex nonlinearities psi (on R^m) and F (on m-by-n matrices).

Both kinds are stored as vectorized callables acting on the trailing axes of
an array, so ``psi.eval(w)`` accepts ``w`` of shape ``(..., m)`` and
``F.eval(M)`` accepts ``M`` of shape ``(..., m, n)``.  Hessians are returned
as full tensors of shape ``(..., *shape, *shape)``.

Declared convexity constants are checked by sampling when an object is built;
a declaration that the samples contradict raises :class:`ConvexityError`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

__all__ = [
    "ConvexityError",
    "LegendreError",
    "Potential",
    "Integrand",
    "ConvexityReport",
    "check_convexity",
    "normalize",
    "legendre",
    "conjugate_at_gradient",
    "quadratic_potential",
    "perturbed_potential",
    "quadratic_integrand",
    "perturbed_integrand",
    "potential_preset",
    "integrand_preset",
]

ArrayFn = Callable[[np.ndarray], np.ndarray]

CONVEXITY_SAMPLES = 256
CONVEXITY_SEED = 20240229


class ConvexityError(ValueError):
    """Sampled monotonicity quotients fall outside the declared constants."""


class LegendreError(RuntimeError):
    pass


def _flat(x: np.ndarray, ndim: int) -> np.ndarray:
    lead = x.shape[: x.ndim - ndim]
    return x.reshape(lead + (-1,))


def _dot(a: np.ndarray, b: np.ndarray, ndim: int) -> np.ndarray:
    return np.sum(a * b, axis=tuple(range(-ndim, 0)))


class _ConvexBase:
    """Shared behaviour of :class:`Potential` and :class:`Integrand`."""

    shape: tuple
    eval: ArrayFn
    grad: ArrayFn
    hess: Optional[ArrayFn]
    key: str

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def __post_init__(self):
        lo, hi = self.lower, self.upper
        if not (lo > 0 and hi >= lo and math.isfinite(hi)):
            raise ConvexityError(
                f"{self.key}: need 0 < lower <= upper < inf, got ({lo}, {hi})"
            )
        report = check_convexity(self, CONVEXITY_SAMPLES, CONVEXITY_SEED)
        if not report.passed:
            raise ConvexityError(
                f"{self.key}: sampled quotients [{report.min_quotient:.6g}, "
                f"{report.max_quotient:.6g}] violate declared [{lo}, {hi}]"
            )

    def hess_apply(self, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Action of the Hessian at ``x`` on the direction ``d``."""
        if self.hess is None:
            raise NotImplementedError(f"{self.key} has no Hessian")
        H = self.hess(x)
        k = self.ndim
        Hf = H.reshape(H.shape[: H.ndim - 2 * k] + (self.size, self.size))
        out = np.einsum("...ij,...j->...i", Hf, _flat(d, k))
        return out.reshape(d.shape)


@dataclass(frozen=True, eq=False)
class Potential(_ConvexBase):
    """Uniformly convex psi: R^m -> R with constants theta <= Theta."""

    m: int
    eval: ArrayFn
    grad: ArrayFn
    hess: Optional[ArrayFn]
    theta: float
    Theta: float
    key: str = "custom"

    @property
    def shape(self) -> tuple:
        return (self.m,)

    @property
    def lower(self) -> float:
        return self.theta

    @property
    def upper(self) -> float:
        return self.Theta

    def with_constants(self, lower: float, upper: float) -> "Potential":
        return dataclasses.replace(self, theta=lower, Theta=upper)


@dataclass(frozen=True, eq=False)
class Integrand(_ConvexBase):
    """Uniformly convex F on m-by-n matrices with constants lam <= Lam."""

    m: int
    n: int
    eval: ArrayFn
    grad: ArrayFn
    hess: Optional[ArrayFn]
    lam: float
    Lam: float
    key: str = "custom"

    @property
    def shape(self) -> tuple:
        return (self.m, self.n)

    @property
    def lower(self) -> float:
        return self.lam

    @property
    def upper(self) -> float:
        return self.Lam

    def with_constants(self, lower: float, upper: float) -> "Integrand":
        return dataclasses.replace(self, lam=lower, Lam=upper)


Convex = Union[Potential, Integrand]


class ConvexityReport(NamedTuple):
    min_quotient: float
    max_quotient: float
    passed: bool


def _sample_pairs(rng: np.random.Generator, count: int, shape: tuple):
    """Half far-field Gaussian pairs (scale 10), half near-origin shell pairs."""
    n_far = count - count // 2
    n_near = count // 2
    far1 = 10.0 * rng.standard_normal((n_far,) + shape)
    far2 = 10.0 * rng.standard_normal((n_far,) + shape)
    # radii log-uniform in [1e-3, 1]; partners within a comparable distance
    radii = 10.0 ** rng.uniform(-3.0, 0.0, size=(n_near,) + (1,) * len(shape))
    dirs = rng.standard_normal((n_near,) + shape)
    dirs /= np.sqrt(_dot(dirs, dirs, len(shape)))[(...,) + (None,) * len(shape)]
    near1 = radii * dirs
    near2 = near1 + radii * rng.standard_normal((n_near,) + shape)
    return np.concatenate([far1, near1]), np.concatenate([far2, near2])


def check_convexity(
    p: Convex, sample_count: int, seed: int, tol: Optional[float] = None
) -> ConvexityReport:
    """Extreme sampled monotonicity quotients (Dp(x1)-Dp(x2)).(x1-x2)/|x1-x2|^2."""
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    k = p.ndim
    rng = np.random.default_rng(seed)
    x1, x2 = _sample_pairs(rng, sample_count, p.shape)
    for _ in range(20):
        d2 = _dot(x1 - x2, x1 - x2, k)
        scale = _dot(x1, x1, k) + _dot(x2, x2, k) + 1.0
        bad = d2 <= 1e-20 * scale
        if not bad.any():
            break
        nb = int(bad.sum())
        x2[bad] = x1[bad] + rng.standard_normal((nb,) + p.shape)
    else:
        raise RuntimeError("could not draw non-degenerate sample pairs")
    q = _dot(p.grad(x1) - p.grad(x2), x1 - x2, k) / d2
    if tol is None:
        tol = 1e-8 * max(1.0, p.upper)
    qmin, qmax = float(q.min()), float(q.max())
    passed = bool(qmin >= p.lower - tol and qmax <= p.upper + tol)
    return ConvexityReport(qmin, qmax, passed)


def normalize(p: Convex) -> Convex:
    """Subtract the affine part at the origin: x -> p(x) - p(0) - Dp(0).x."""
    zero = np.zeros(p.shape)
    p0 = float(p.eval(zero))
    g0 = np.asarray(p.grad(zero), dtype=float)
    k = p.ndim
    f, df = p.eval, p.grad

    def eval_(x):
        return f(x) - p0 - _dot(x, g0, k)

    def grad_(x):
        return df(x) - g0

    return dataclasses.replace(p, eval=eval_, grad=grad_)


def conjugate_at_gradient(p: Potential, w: np.ndarray) -> np.ndarray:
    """psi*(Dpsi(w)) through the closed form Dpsi(w).w - psi(w)."""
    return _dot(p.grad(w), w, p.ndim) - p.eval(w)


def legendre(
    p: Convex,
    q: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> np.ndarray:
    """Convex conjugate sup_x {q.x - p(x)}, vectorized over leading axes of q.

    Damped Newton (Armijo backtracking) on the strongly convex problem
    min_x p(x) - q.x, started from x = q / upper.  Without a Hessian the
    iteration falls back to gradient steps of length 1/upper.
    """
    k = p.ndim
    q = np.asarray(q, dtype=float)
    x = q / p.upper
    target = tol * np.maximum(1.0, np.sqrt(_dot(q, q, k)))

    def phi(z):
        return p.eval(z) - _dot(q, z, k)

    for _ in range(max_iter + 1):
        g = p.grad(x) - q
        gn = np.sqrt(_dot(g, g, k))
        if np.all(gn <= target):
            return _dot(q, x, k) - p.eval(x)
        if p.hess is not None:
            H = p.hess(x)
            Hf = H.reshape(H.shape[: H.ndim - 2 * k] + (p.size, p.size))
            step = -np.linalg.solve(Hf, _flat(g, k)[..., None])[..., 0]
            step = step.reshape(g.shape)
        else:
            step = -g / p.upper
        slope = _dot(g, step, k)
        f0 = phi(x)
        alpha = np.ones(gn.shape)
        for _ in range(60):
            a = alpha[(...,) + (None,) * k]
            fails = phi(x + a * step) > f0 + 1e-4 * alpha * slope + 1e-15 * np.abs(f0)
            if not np.any(fails):
                break
            alpha = np.where(fails, 0.5 * alpha, alpha)
        x = x + alpha[(...,) + (None,) * k] * step
    raise LegendreError(
        f"{p.key}: Legendre transform did not converge in {max_iter} iterations "
        "(declared lower constant may be too large)"
    )


# ---------------------------------------------------------------------------
# presets


def _quadratic_parts(shape, a, center, linear):
    k = len(shape)
    d = math.prod(shape)
    c = np.zeros(shape) if center is None else np.asarray(center, float).reshape(shape)
    b = np.zeros(shape) if linear is None else np.asarray(linear, float).reshape(shape)
    eye = np.eye(d).reshape(shape + shape)

    def eval_(x):
        y = x - c
        return 0.5 * a * _dot(y, y, k) + _dot(b, x, k)

    def grad_(x):
        return a * (x - c) + b

    def hess_(x):
        lead = x.shape[: x.ndim - k]
        return np.broadcast_to(a * eye, lead + shape + shape).copy()

    return eval_, grad_, hess_


def _perturbed_parts(shape, eps):
    # x -> |x|^2/2 + eps*(sqrt(1+|x|^2) - 1); Hessian eigenvalues in
    # [1 + min(eps,0), 1 + max(eps,0)]
    k = len(shape)
    d = math.prod(shape)

    def eval_(x):
        r2 = _dot(x, x, k)
        return 0.5 * r2 + eps * (np.sqrt(1.0 + r2) - 1.0)

    def grad_(x):
        s = np.sqrt(1.0 + _dot(x, x, k))[(...,) + (None,) * k]
        return x + eps * x / s

    def hess_(x):
        xf = _flat(x, k)
        r2 = np.sum(xf * xf, axis=-1)[..., None, None]
        s = np.sqrt(1.0 + r2)
        eye = np.eye(d)
        H = eye + eps * ((1.0 + r2) * eye - xf[..., :, None] * xf[..., None, :]) / s**3
        return H.reshape(x.shape[: x.ndim - k] + shape + shape)

    return eval_, grad_, hess_


def _perturbed_bounds(eps: float) -> tuple:
    if eps <= -1.0:
        raise ValueError("perturbation eps must exceed -1 to keep convexity")
    return 1.0 + min(eps, 0.0), 1.0 + max(eps, 0.0)


def quadratic_potential(m, a=1.0, center=None, linear=None) -> Potential:
    """psi(w) = (a/2)|w - center|^2 + linear.w (not normalized unless both are 0)."""
    e, g, h = _quadratic_parts((m,), a, center, linear)
    key = "quadratic" if a == 1.0 else f"scaled:{a!r}"
    return Potential(m, e, g, h, a, a, key=key)


def perturbed_potential(m, eps) -> Potential:
    e, g, h = _perturbed_parts((m,), eps)
    lo, hi = _perturbed_bounds(eps)
    return Potential(m, e, g, h, lo, hi, key=f"perturbed:{eps!r}")


def quadratic_integrand(m, n, a=1.0, center=None, linear=None) -> Integrand:
    e, g, h = _quadratic_parts((m, n), a, center, linear)
    key = "quadratic" if a == 1.0 else f"scaled:{a!r}"
    return Integrand(m, n, e, g, h, a, a, key=key)


def perturbed_integrand(m, n, eps) -> Integrand:
    e, g, h = _perturbed_parts((m, n), eps)
    lo, hi = _perturbed_bounds(eps)
    return Integrand(m, n, e, g, h, lo, hi, key=f"perturbed:{eps!r}")


def _parse_key(key: str) -> tuple:
    name, _, arg = key.partition(":")
    name = name.strip()
    if name == "quadratic" and not arg:
        return name, None
    if name in ("scaled", "perturbed") and arg:
        return name, float(arg)
    raise ValueError(f"unknown preset key {key!r}")


def potential_preset(key: str, m: int, constants: Optional[tuple] = None) -> Potential:
    """Build psi from a config key: "quadratic", "scaled:a" or "perturbed:eps".

    ``constants`` overrides the preset's (theta, Theta); the override is
    verified like any other declaration.
    """
    name, arg = _parse_key(key)
    if name == "quadratic":
        e, g, h = _quadratic_parts((m,), 1.0, None, None)
        lo = hi = 1.0
    elif name == "scaled":
        e, g, h = _quadratic_parts((m,), arg, None, None)
        lo = hi = arg
    else:
        e, g, h = _perturbed_parts((m,), arg)
        lo, hi = _perturbed_bounds(arg)
    if constants is not None:
        lo, hi = constants
    return Potential(m, e, g, h, float(lo), float(hi), key=key)


def integrand_preset(
    key: str, m: int, n: int, constants: Optional[tuple] = None
) -> Integrand:
    name, arg = _parse_key(key)
    if name == "quadratic":
        e, g, h = _quadratic_parts((m, n), 1.0, None, None)
        lo = hi = 1.0
    elif name == "scaled":
        e, g, h = _quadratic_parts((m, n), arg, None, None)
        lo = hi = arg
    else:
        e, g, h = _perturbed_parts((m, n), arg)
        lo, hi = _perturbed_bounds(arg)
    if constants is not None:
        lo, hi = constants
    return Integrand(m, n, e, g, h, float(lo), float(hi), key=key)
