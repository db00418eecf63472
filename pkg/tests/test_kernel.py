import math

import numpy as np
import pytest

from oracles import ball_quadrature_force
from stochks.kernel import (DomainError, KernelTable, MollifierSpec,
                            UnsupportedDimensionError, bessel_potential,
                            bessel_potential_derivative, build_kernel_table, eval_force,
                            fourier_inversion_potential, grad_bessel_potential, kernel_report,
                            mollifier_value, newtonian_part)


def test_closed_form_d3():
    assert bessel_potential(1.0, 3) == pytest.approx(0.02927491, abs=2e-8)  # truncated literal
    assert bessel_potential(1.0, 3) == pytest.approx(math.exp(-1) / (4 * math.pi), rel=1e-15)


def test_fourier_inversion_matches_closed_form():
    r = np.linspace(0.05, 5.0, 12)
    got = np.array([fourier_inversion_potential(v) for v in r])
    assert np.max(np.abs(got / bessel_potential(r, 3) - 1)) <= 1e-6


def test_d2_small_radius_limit():
    r = np.geomspace(1e-8, 1e-3, 10)
    approx = -(np.log(r / 2) + 0.5772156649015329) / (2 * math.pi)
    assert np.max(np.abs(bessel_potential(r, 2) / approx - 1)) <= 1e-6


def test_domain_and_dimension_errors():
    with pytest.raises(DomainError):
        bessel_potential(0.0, 3)
    with pytest.raises(DomainError):
        newtonian_part(-1.0, 2)
    with pytest.raises(UnsupportedDimensionError):
        bessel_potential(1.0, 4)
    with pytest.raises(DomainError):
        grad_bessel_potential(np.zeros(2))


def test_newtonian_part_values():
    assert newtonian_part(1.0, 2) == 0.0
    assert newtonian_part(2.0, 2) == pytest.approx(-0.110318, abs=1e-6)
    assert newtonian_part(2.0, 3) == pytest.approx(1 / (8 * math.pi))


def test_newtonian_residual_bounded_d3():
    r = np.geomspace(1e-6, 1e-2, 50)
    resid = bessel_potential(r, 3) - newtonian_part(r, 3)
    assert np.max(np.abs(resid)) < 0.1
    assert resid[0] == pytest.approx(-1 / (4 * math.pi), rel=1e-4)


def test_newtonian_residual_derivative_bounded_d2():
    r = np.geomspace(1e-6, 1e-2, 50)
    slope = bessel_potential_derivative(r, 2) + 1 / (2 * math.pi * r)
    assert np.max(np.abs(slope)) < 0.1


def test_gradient_values_and_oddness():
    g = grad_bessel_potential(np.array([0.0, 0.0, 1.0]))
    assert np.linalg.norm(g) == pytest.approx(0.05854982, abs=2e-8)
    assert np.linalg.norm(g) == pytest.approx(2 * math.exp(-1) / (4 * math.pi), rel=1e-15)
    rng = np.random.default_rng(0)
    for d in (2, 3):
        x = rng.normal(size=(50, d))
        assert np.array_equal(grad_bessel_potential(-x), -grad_bessel_potential(x))
    # Newtonian part only at x = (1, 0): -(1/2pi) e_1
    newton = -1 / (2 * math.pi)
    assert newton == pytest.approx(-0.15915494309189535)


@pytest.mark.parametrize("d", [2, 3])
def test_gradient_matches_finite_differences(d):
    r = np.random.default_rng(d).uniform(0.1, 5.0, 100)
    h = 1e-6
    fd = (bessel_potential(r + h, d) - bessel_potential(r - h, d)) / (2 * h)
    assert np.max(np.abs(fd - bessel_potential_derivative(r, d))) <= 1e-6


@pytest.mark.parametrize("d", [2, 3])
def test_mollifier(d):
    spec = MollifierSpec(0.3, d)
    assert abs(spec.mass() - 1) <= 1e-8
    assert mollifier_value(np.array([0.3] + [0.0] * (d - 1)), spec) == 0.0
    assert mollifier_value(np.array([0.6] + [0.0] * (d - 1)), spec) == 0.0
    at0 = mollifier_value(np.zeros(d), spec)
    unit = MollifierSpec(1.0, d)
    assert at0 == pytest.approx(0.3 ** -d * unit.normalization * math.exp(-1), rel=1e-14)
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, (1000, d))
    assert np.all(mollifier_value(pts, spec) >= 0)


@pytest.mark.parametrize("d", [2, 3])
def test_table_invariants(d, table2, table3):
    t = table2 if d == 2 else table3
    assert t.f_samples[0] == 0.0
    assert np.all(np.isfinite(t.f_samples))
    assert np.all(np.diff(t.r_samples) > 0)
    assert t.tail_bound <= 1e-10
    # beyond r_cut the exact force is below the tail bound
    r = np.linspace(t.r_cut, t.r_cut + 20, 50)
    assert np.all(np.abs(bessel_potential_derivative(r, d)) <= t.tail_bound)
    x = np.zeros((1, d))
    x[0, 0] = t.r_cut + 0.1
    assert np.all(eval_force(t, x) == 0)
    assert np.all(eval_force(t, np.zeros(d)) == 0)


@pytest.mark.parametrize("d", [2, 3])
def test_eval_force_knots_and_oddness(d, table2, table3):
    t = table2 if d == 2 else table3
    rng = np.random.default_rng(2)
    k = rng.integers(1, t.r_samples.size - 1, 200)
    u = rng.normal(size=(200, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x = t.r_samples[k, None] * u
    want = t.f_samples[k, None] * u
    assert np.max(np.abs(eval_force(t, x) - want)) <= 1e-15 * np.max(np.abs(t.f_samples)) * 10
    y = rng.normal(size=(500, d))
    assert np.array_equal(eval_force(t, -y), -eval_force(t, y))


@pytest.mark.parametrize("d, radii", [(2, [0.07, 0.23, 0.41, 0.77]), (3, [0.05, 0.2, 0.45, 0.9])])
def test_table_matches_ball_quadrature(d, radii, table2, table3):
    # off-sample radii, independent 2D quadrature over the ball
    t = table2 if d == 2 else table3
    for r in radii:
        want = ball_quadrature_force(r, t.epsilon, d, epsrel=1e-9)
        assert abs(t.radial(r) - want) <= 1e-6 * abs(want)


@pytest.mark.parametrize("d", [2, 3])
def test_mollification_second_order(d):
    # |grad G| itself grows like eps^{1-d} on [2 eps, 5 eps], so the eps^2 law
    # holds for the error relative to |grad G|
    eps_list = [0.4, 0.2, 0.1, 0.05]
    errs = []
    for eps in eps_list:
        t = build_kernel_table(eps, d, 128)
        r = np.linspace(2 * eps, 5 * eps, 30)
        exact = bessel_potential_derivative(r, d)
        errs.append(np.max(np.abs(t.radial(r) / exact - 1)))
    order = np.polyfit(np.log(eps_list), np.log(errs), 1)[0]
    assert order >= 1.9


def test_table_round_trip(tmp_path, table2):
    p = tmp_path / "k.bin"
    table2.save(p)
    back = KernelTable.load(p)
    assert np.array_equal(back.r_samples, table2.r_samples)
    assert np.array_equal(back.f_samples, table2.f_samples)
    assert back.r_cut == table2.r_cut
    r = np.linspace(0, 3, 101)
    assert np.array_equal(back.radial(r), table2.radial(r))
    raw = p.read_bytes()
    header = raw[: raw.index(b"\n")].decode()
    assert '"epsilon"' in header and '"r_cut"' in header and '"samples"' in header


def test_build_rejects_bad_input():
    with pytest.raises(UnsupportedDimensionError):
        build_kernel_table(0.2, 4)
    with pytest.raises((DomainError, ValueError)):
        build_kernel_table(-0.2, 2)
    with pytest.raises(ValueError):
        build_kernel_table(0.2, 2, resolution=16)


def test_kernel_report_keys(table3):
    rep = kernel_report(table3, resolution=64)
    assert set(rep) == {"epsilon", "d", "max_force", "fitted_exponent", "tail_bound",
                        "mollifier_mass_error"}
    assert abs(rep["fitted_exponent"] + 2) <= 0.15
