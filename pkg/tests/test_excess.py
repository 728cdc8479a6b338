import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnflow.discretization import Grid
from dnflow.excess import (
    CylinderOutOfDomain,
    DegenerateFit,
    EmptyCylinder,
    ParabolicCylinder,
    RescaledPotential,
    average_shift_bounds,
    campanato_fit,
    check_poincare_excess,
    compute_excess,
    cylinder_average,
    decay_probe,
    fit_power_law,
    fractional_fit,
    oscillation,
    rescale_blowup,
    rescale_integrand,
    write_excess_scan,
)
from dnflow.potentials import (
    perturbed_potential,
    quadratic_integrand,
    quadratic_potential,
)
from dnflow.scheme import Trajectory

from conftest import eigen_run, parabola

TIMES = np.linspace(-0.5, 0.5, 101)
WIDE = Grid((2.0,), (512,), (-1.0,))


def field(f, grid=WIDE, times=TIMES, **kw):
    return Trajectory.from_function(grid, f, times, **kw)


def test_cylinder_validation():
    with pytest.raises(ValueError):
        ParabolicCylinder((0.0,), 0.0, 0.0)
    Q = ParabolicCylinder(0.3, 0.1, 0.2)
    assert Q.center == (0.3,)
    assert Q.window == pytest.approx((0.08, 0.12))


def test_average_of_constant_and_linear():
    tr = field(lambda x, t: 2.0 + x[..., 0])
    for c in (0.0, 0.25, -0.3125):
        Q = ParabolicCylinder((c,), 0.0, 0.2)
        assert cylinder_average(tr, Q, "v")[0] == pytest.approx(2.0 + c, abs=1e-12)
        assert cylinder_average(tr, Q, "Dv")[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert oscillation(tr, Q) == pytest.approx(0.0, abs=1e-20)


def test_time_derivative_average():
    a = lambda x: np.cos(x[..., 0])
    tr = field(lambda x, t: t * a(x))
    Q = ParabolicCylinder((0.0,), 0.0, 0.3)
    ref = np.mean(a(WIDE.node_coords()[np.abs(WIDE.node_coords()[..., 0]) <= 0.3]))
    assert cylinder_average(tr, Q, "v_t")[0] == pytest.approx(ref, rel=1e-10)
    with pytest.raises(ValueError):
        cylinder_average(tr, Q, "w")


@pytest.mark.parametrize("r", [0.25, 0.5])
def test_parabola_closed_form(parabola_tr, r):
    rep = compute_excess(parabola_tr, ParabolicCylinder((0.0,), 0.0, r))
    assert rep.E == pytest.approx(64 * r**2 / 45, rel=0.02)
    assert rep.term_affine == pytest.approx(4 * r**2 / 45, rel=0.05)
    assert rep.term_grad == pytest.approx(4 * r**2 / 3, rel=0.02)


def test_parabola_error_decreases_with_resolution():
    errs = [abs(compute_excess(parabola(c), ParabolicCylinder((0.0,), 0.0, 0.25)).E
                / (64 * 0.0625 / 45) - 1) for c in (128, 256, 512)]
    assert errs[0] > errs[1] > errs[2]


def test_excess_invariant_under_affine_shift(parabola_tr):
    Q = ParabolicCylinder((0.0,), 0.0, 0.5)
    base = compute_excess(parabola_tr, Q)
    shifted = compute_excess(field(lambda x, t: x[..., 0] ** 2 + 3 - 2 * x[..., 0]), Q)
    assert shifted.E == pytest.approx(base.E, rel=1e-10)


@pytest.mark.parametrize("c", [0.5, 2.0, -3.0])
def test_excess_scales_quadratically(parabola_tr, c):
    Q = ParabolicCylinder((0.0,), 0.0, 0.5)
    scaled = compute_excess(field(lambda x, t: c * x[..., 0] ** 2), Q)
    assert scaled.E == pytest.approx(c**2 * compute_excess(parabola_tr, Q).E, rel=1e-12)


def test_decay_ratio_parabola(parabola_tr):
    probe = decay_probe(parabola_tr, (0.0,), 0.0, 0.5, 0.5)
    assert not probe.degenerate
    assert probe.ratio == pytest.approx(0.25, rel=0.05)
    with pytest.raises(ValueError):
        decay_probe(parabola_tr, (0.0,), 0.0, 0.5, 0.7)


def test_campanato_recovers_exponent_two(parabola_tr):
    fit = campanato_fit(parabola_tr, (0.0,), 0.0, [0.5, 0.4, 0.3, 0.25])
    assert fit.alpha == pytest.approx(2.0, abs=0.05)
    assert fit.C == pytest.approx(64 / 45, rel=0.05)
    with pytest.raises(ValueError):
        campanato_fit(parabola_tr, (0.0,), 0.0, [0.25, 0.3, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.5, 3.0))
def test_power_law_fit_tolerates_noise(seed, alpha):
    rng = np.random.default_rng(seed)
    R = 0.5 ** np.arange(1, 7)
    E = 1.7 * R**alpha * (1 + rng.uniform(-0.05, 0.05, R.size))
    assert fit_power_law(R, E).alpha == pytest.approx(alpha, abs=0.05)


def test_affine_data_is_degenerate():
    tr = field(lambda x, t: 1 + x[..., 0])
    with pytest.raises(DegenerateFit):
        campanato_fit(tr, (0.0,), 0.0, [0.4, 0.3, 0.2])
    assert decay_probe(tr, (0.0,), 0.0, 0.4, 0.5).degenerate
    assert check_poincare_excess(tr, ParabolicCylinder((0.0,), 0.0, 0.4)).degenerate


def test_poincare_ratio_parabola():
    ratios = [check_poincare_excess(parabola(c), ParabolicCylinder((0.0,), 0.0, 0.5)).ratio
              for c in (256, 512)]
    assert ratios[1] == pytest.approx(16 / 15, rel=0.02)
    assert abs(ratios[0] - ratios[1]) <= 0.01 * ratios[1]


@pytest.mark.parametrize("tr_name", ["eigen_tr", "perturbed_tr"])
def test_poincare_ratio_bounded_on_runs(tr_name, request):
    tr = request.getfixturevalue(tr_name)
    res = check_poincare_excess(tr, ParabolicCylinder((0.5,), 0.05, 0.25))
    assert 0 < res.ratio < 10


@pytest.mark.parametrize("frac", [0.5, 0.75])
def test_average_shift_bounds(eigen_tr, perturbed_tr, frac):
    for tr in (eigen_tr, perturbed_tr):
        b = average_shift_bounds(tr, ParabolicCylinder((0.4,), 0.05, 0.25), frac)
        assert b.holds, b


def test_out_of_domain_and_empty(eigen_tr):
    with pytest.raises(CylinderOutOfDomain):
        compute_excess(eigen_tr, ParabolicCylinder((0.1,), 0.1, 0.25))
    with pytest.raises(CylinderOutOfDomain):
        compute_excess(eigen_tr, ParabolicCylinder((0.5,), 0.19, 0.25))
    with pytest.raises(EmptyCylinder):
        cylinder_average(eigen_tr, ParabolicCylinder((3.0,), 0.1, 0.1))


def test_blowup_identity_transform():
    g = Grid((4.0,), (256,), (-2.0,))
    tr = field(lambda x, t: np.sin(x[..., 0]) * (1 + t), grid=g, times=np.linspace(-0.6, 0.6, 25),
               potential=quadratic_potential(1), integrand=quadratic_integrand(1, 1))
    res = rescale_blowup(tr, (0.0,), 0.0, 1.0, 1.0)
    Q = ParabolicCylinder((0.0,), 0.0, 1.0)
    a, M = cylinder_average(tr, Q, "v"), cylinder_average(tr, Q, "Dv")
    y = res.field.grid.node_coords()
    k0 = np.argmin(np.abs(tr.times - res.field.t0))
    orig = np.sin(y[..., 0]) * (1 + tr.times[k0])
    assert np.allclose(res.field.steps[0, :, 0], orig - a[0] - M[0, 0] * y[..., 0], atol=1e-12)
    assert res.field.tau == pytest.approx(tr.tau)


@pytest.mark.parametrize("m, n", [(1, 1), (2, 2)])
def test_quadratic_data_are_fixed_points(m, n):
    rng = np.random.default_rng(3)
    a, M = rng.standard_normal(m), rng.standard_normal((m, n))
    for r, eps in ((0.1, 0.3), (1.0, 1e-3)):
        psi = RescaledPotential(quadratic_potential(m), a, M, r, eps)
        y, w = rng.standard_normal((20, n)), rng.standard_normal((20, m))
        assert np.max(np.abs(psi.eval(y, w) - 0.5 * np.sum(w * w, axis=-1))) <= 1e-12
        assert np.max(np.abs(psi.grad(y, w) - w)) <= 1e-12
        F = rescale_integrand(quadratic_integrand(m, n), M, eps)
        xi = rng.standard_normal((20, m, n))
        assert np.max(np.abs(F.eval(xi) - 0.5 * np.sum(xi * xi, axis=(-2, -1)))) <= 1e-12
        assert np.max(np.abs(F.grad(xi) - xi)) <= 1e-12


def test_rescaled_potential_keeps_convexity():
    psi = RescaledPotential(perturbed_potential(1, 0.3), [0.2], [[1.5]], 0.2, 0.1).at([0.0])
    assert (psi.theta, psi.Theta) == (perturbed_potential(1, 0.3).theta,
                                      perturbed_potential(1, 0.3).Theta)


@pytest.mark.parametrize("tr_name", ["eigen_tr", "perturbed_tr"])
def test_blowup_normalization(tr_name, request):
    tr = request.getfixturevalue(tr_name)
    x, t, r = (0.5,), 0.05, 0.25
    E = compute_excess(tr, ParabolicCylinder(x, t, r)).E
    res = rescale_blowup(tr, x, t, r, math.sqrt(E))
    assert res.normalization() == pytest.approx(1.0, abs=0.05)


def test_blowup_rejects_tiny_amplitude(eigen_tr):
    with pytest.raises(ValueError):
        rescale_blowup(eigen_tr, (0.5,), 0.05, 0.25, 0.0)


def test_fractional_fit_linear_in_time():
    g = Grid.unit(1, 64)
    tau = 1e-3
    tr = field(lambda x, t: t * np.sin(3 * x[..., 0]), grid=g, times=np.arange(201) * tau)
    fit = fractional_fit(tr, ([0.1], [0.9]), 0.05, 0.1, [tau, 2 * tau, 4 * tau, 8 * tau])
    assert fit.slope == pytest.approx(2.0, abs=0.01)
    assert fit.passed


def test_fractional_fit_eigen_run(eigen_tr):
    tau = eigen_tr.tau
    fit = fractional_fit(eigen_tr, ([0.1], [0.9]), 0.05, 0.1, [j * tau for j in (1, 2, 4, 8, 16)])
    assert fit.target == 0.25
    assert fit.passed


def test_fractional_fit_rejects_bad_offsets(eigen_tr):
    tau = eigen_tr.tau
    win = ([0.1], [0.9])
    with pytest.raises(ValueError):
        fractional_fit(eigen_tr, win, 0.05, 0.1, [tau, 2 * tau])
    with pytest.raises(ValueError):
        fractional_fit(eigen_tr, win, 0.05, 0.1, [tau, 1.5 * tau, 3 * tau])
    with pytest.raises(ValueError):
        fractional_fit(eigen_tr, win, 0.05, 0.1, [tau, 2 * tau, 0.06])


def test_write_excess_scan(tmp_path, parabola_tr):
    reps = [compute_excess(parabola_tr, ParabolicCylinder((0.0,), 0.0, r)) for r in (0.5, 0.25)]
    path = tmp_path / "excess.csv"
    write_excess_scan(path, reps)
    rows = list(csv.DictReader(open(path)))
    assert [float(r["r"]) for r in rows] == [0.5, 0.25]
    assert float(rows[0]["E"]) == reps[0].E


def test_parabola_average(parabola_tr):
    for r in (0.25, 0.5):
        avg = cylinder_average(parabola_tr, ParabolicCylinder((0.0,), 0.0, r), "v")[0]
        # node sums over the inclusive ball give h^2 J(J+1)/3 = r^2/3 + r h/3
        assert avg == pytest.approx(r**2 / 3 + r * (2 / 512) / 3, abs=1e-12)


def test_decay_ratio_on_smooth_run(eigen_tr):
    probe = decay_probe(eigen_tr, (0.5,), 0.1, 0.125, 0.5)
    assert probe.ratio <= 0.5


def test_power_law_exact_data():
    R = np.array([0.5, 0.3, 0.2, 0.1])
    fit = fit_power_law(R, 3.0 * R**2)
    assert abs(fit.alpha - 2) <= 1e-6 and fit.C == pytest.approx(3.0)


def test_poincare_ratio_stable_under_h_refinement():
    Q = ParabolicCylinder((0.5,), 0.05, 0.25)
    a, b = (check_poincare_excess(eigen_run(c, 0.1, 100), Q).ratio for c in (32, 64))
    assert abs(a - b) <= 0.2 * b


def test_fractional_fit_time_constant(parabola_tr):
    tau = parabola_tr.tau
    fit = fractional_fit(parabola_tr, ([-0.5], [0.5]), -0.2, 0.2, [tau, 2 * tau, 4 * tau])
    assert np.all(fit.integrals == 0) and math.isnan(fit.slope) and not fit.passed


def test_shift_bounds_trivial_fields():
    Q = ParabolicCylinder((0.0,), 0.0, 0.4)
    const = average_shift_bounds(field(lambda x, t: 2.0 + 0 * x[..., 0]), Q, 0.5)
    assert const.lhs_v == pytest.approx(0, abs=1e-14) and const.rhs_v == pytest.approx(0, abs=1e-6)
    assert const.holds
    affine = average_shift_bounds(field(lambda x, t: 1 + 2 * x[..., 0]), Q, 0.5)
    assert affine.lhs_Dv == pytest.approx(0, abs=1e-12) and affine.rhs_Dv >= 0


def test_shift_bounds_parabola(parabola_tr):
    for frac in (0.25, 0.5, 0.75):
        b = average_shift_bounds(parabola_tr, ParabolicCylinder((0.0,), 0.0, 0.5), frac)
        assert b.slack <= 1.1
