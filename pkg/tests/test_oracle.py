import math

import numpy as np
import pytest

from helmpinn.analysis import relative_l2
from helmpinn.oracle import (FieldOnPoints, OracleError, ResonanceError, analytic_coefficients,
                             analytic_infty, complex_wavenumber, default_modes, evaluation_grid,
                             gf_convolve, greens_function, modal_solve)
from helmpinn.physics import HelmholtzProblem, SourceSpec, bc_residual, make_problem, pde_residual


def test_coefficients_undamped():
    assert analytic_coefficients(0.0) == pytest.approx(1.0)


def test_coefficients_damped_closed_form():
    eta = -0.04
    c = analytic_coefficients(eta)
    assert c.real == pytest.approx((4 + 6 * eta ** 2) / (4 + 9 * eta ** 2), rel=1e-14)
    assert c.imag == pytest.approx(-2 * eta / (4 + 9 * eta ** 2), rel=1e-14)
    assert c.real == pytest.approx(0.998804, abs=5e-7)
    assert c.imag == pytest.approx(0.019928, abs=5e-7)
    # small-damping approximation 1 - 3 eta^2 / 4 agrees to four decimals
    assert round(c.real, 4) == round(1 - 3 * eta ** 2 / 4, 4)


def test_coefficients_2d():
    # complex form (1 + i eta) Lap p / k0^2 + p = -(1 + i eta) g with
    # p = c p0, g = 2 p0 and Lap p0 = -2 k0^2 p0
    eta = 0.3
    c = analytic_coefficients(eta, dim=2)
    assert (1 + 1j * eta) * (-2) * c + c == pytest.approx(-2 * (1 + 1j * eta), rel=1e-14)


def test_analytic_requires_plane_source():
    with pytest.raises(OracleError):
        analytic_infty(make_problem(dim=3, nu=2, sharpness=1.0))


def test_analytic_precondition_names_axis():
    pb = make_problem(dim=3, nu=2, upper=(1.3, 1.0, 0.7))
    with pytest.raises(OracleError, match="axis x"):
        analytic_infty(pb)


@pytest.mark.parametrize("dim,nu", [(2, 2), (3, 1), (3, 2)])
def test_analytic_residuals(dim, nu):
    pb = make_problem(dim=dim, nu=nu, eta=-0.04)
    f = analytic_infty(pb)
    x = np.random.default_rng(0).uniform(0, 1, (100, dim))
    rr, ri = pde_residual(f.derivatives(x), pb.medium, pb.forcing(x))
    assert max(np.abs(rr).max(), np.abs(ri).max()) < 1e-10
    for face in pb.domain.faces():
        y = x.copy()
        y[:, face.axis] = face.coordinate
        br, bi = bc_residual(f.derivatives(y), face.normal(dim))
        assert max(np.abs(br).max(), np.abs(bi).max()) < 1e-10


def test_analytic_undamped_imaginary_part_zero():
    f = analytic_infty(make_problem(dim=3, nu=1, eta=0.0))
    x = np.random.default_rng(1).uniform(0, 1, (10, 3))
    assert np.all(f(x).p_i == 0)


@pytest.mark.parametrize("nu", [1, 2])
def test_modal_matches_closed_form(nu):
    pb = make_problem(dim=3, nu=nu, eta=-0.04)
    sol = modal_solve(pb)
    x = np.random.default_rng(2).uniform(0, 1, (200, 3))
    assert relative_l2(sol.values(x), analytic_infty(pb).values(x)) < 1e-8
    # a single mode (2 nu, 2 nu, 2 nu) carries the field
    big = np.argwhere(np.abs(sol.coefficients) > 1e-10 * np.abs(sol.coefficients).max())
    assert big.tolist() == [[2 * nu] * 3]


class ZeroSource(SourceSpec):
    def axis_factor(self, axis, x):
        return np.zeros_like(np.asarray(x, dtype=float))


def zero_problem():
    pb = make_problem(dim=3, nu=1, sharpness=1.0)
    return HelmholtzProblem(pb.domain, pb.medium, ZeroSource(1.0, (0.5, 0.5, 0.5)))


def test_modal_zero_forcing():
    sol = modal_solve(zero_problem(), 8)
    assert np.all(sol.coefficients == 0)
    assert np.all(sol.values(evaluation_grid(zero_problem(), 5)) == 0)


def test_modal_derivatives_match_finite_differences():
    pb = make_problem(dim=3, nu=1, sharpness=0.3, location=(0.4, 0.5, 0.6))
    sol = modal_solve(pb, 48)
    x = np.array([[0.31, 0.47, 0.72]])
    ev = sol.derivatives(x)
    h = 1e-4
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (sol.values(x + e) - sol.values(x - e)) / (2 * h)
        assert ev.gradient[0, 0, j] == pytest.approx(fd[0].real, rel=1e-6, abs=1e-8)
        assert ev.gradient[0, 1, j] == pytest.approx(fd[0].imag, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("s", [math.inf, 1.0, 0.1])
def test_modal_self_convergence(s):
    pb = make_problem(dim=3, nu=2, sharpness=s)
    modes = default_modes(pb)
    g9 = evaluation_grid(pb, 9)
    a = modal_solve(pb, modes)
    b = modal_solve(pb, tuple(2 * m for m in modes))
    assert relative_l2(a.values(g9), b.values(g9)) / 100 < 1e-6
    assert a.tail_energy_fraction() < 1e-8


def test_modal_on_grid_matches_points():
    pb = make_problem(dim=3, nu=1, sharpness=0.5, upper=(1.3, 1.0, 0.7), location=(0.6, 0.5, 0.3))
    sol = modal_solve(pb, (24, 20, 16))
    axes = [np.linspace(0, L, 4) for L in (1.3, 1.0, 0.7)]
    grid = sol.on_grid(axes)
    pts = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    assert np.allclose(grid.ravel(), sol.values(pts), rtol=1e-12, atol=1e-14)


def test_modal_resonance_when_undamped():
    # eta = 0, k0 = 2 pi: mode (0, 0, 2) has lambda = k0^2 and is excited
    with pytest.raises(ResonanceError):
        modal_solve(make_problem(dim=3, nu=1, eta=0.0, sharpness=1.0))


def test_greens_function_values():
    assert abs(greens_function(5.0, [0, 0, 0], [1, 0, 0])) == pytest.approx(1 / (4 * math.pi))
    g = greens_function(0.0, [0, 0, 0], [0, 2, 0])
    assert g.imag == 0 and g.real == pytest.approx(1 / (8 * math.pi))
    pb = make_problem(dim=3, nu=2, eta=-0.04)
    k = complex_wavenumber(pb)
    assert k.real > 0 and k.imag > 0
    assert abs(greens_function(k, [0, 0, 0], [0, 0, 1])) < 1 / (4 * math.pi)
    with pytest.raises(OracleError):
        greens_function(k, [0.1, 0.2, 0.3], [0.1, 0.2, 0.3])


def test_gf_zero_forcing(monkeypatch):
    import helmpinn.oracle as oracle

    pb = make_problem(dim=3, nu=1, sharpness=1.0)
    q = evaluation_grid(pb, 3)
    monkeypatch.setattr(oracle, "eval_forcing", lambda src, x: (np.zeros(len(x)), np.zeros(len(x))))
    f = gf_convolve(pb, 8, q)
    assert np.all(f.complex == 0)


def test_gf_preconditions():
    pb = make_problem(dim=3, nu=1, sharpness=1.0)
    q = evaluation_grid(pb, 3)
    with pytest.raises(OracleError):
        gf_convolve(make_problem(dim=2, nu=1, sharpness=1.0), 8, q[:, :2])
    with pytest.raises(ValueError):
        gf_convolve(pb, 4, q)


def test_gf_mirror_symmetry():
    pb = make_problem(dim=3, nu=2, sharpness=1.0)
    a = np.array([[0.2, 0.35, 0.6], [0.1, 0.8, 0.45]])
    b = 1.0 - a
    fa, fb = gf_convolve(pb, 12, a), gf_convolve(pb, 12, b)
    assert np.allclose(fa.complex, fb.complex, rtol=0, atol=1e-12)


def test_gf_grid_refinement_is_second_order():
    # the self-cell exclusion leaves an O(h^2) error: doubling the grid cuts
    # the change by roughly four
    pb = make_problem(dim=3, nu=2, sharpness=1.0)
    q = 0.05 + 0.9 * evaluation_grid(pb, 5)
    f = {n: gf_convolve(pb, n, q, chunk=16) for n in (16, 32, 64)}
    d1 = relative_l2(f[16], f[32])
    d2 = relative_l2(f[32], f[64])
    assert d2 < d1 / 3


def test_field_csv_roundtrip(tmp_path):
    pb = make_problem(dim=3, nu=1)
    f = analytic_infty(pb)(evaluation_grid(pb, 3))
    f.to_csv(tmp_path / "f.csv")
    g = FieldOnPoints.from_csv(tmp_path / "f.csv")
    assert np.array_equal(f.points, g.points) and np.array_equal(f.p_r, g.p_r)
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "x,y,z,p_r,p_i"


def test_field_length_check():
    with pytest.raises(ValueError):
        FieldOnPoints(np.zeros((3, 3)), np.zeros(3), np.zeros(2))


def test_modal_save(tmp_path):
    sol = modal_solve(make_problem(dim=2, nu=1), 8)
    sol.save(tmp_path / "m.npz")
    with np.load(tmp_path / "m.npz") as d:
        assert tuple(d["modes"]) == (8, 8) and np.array_equal(d["coefficients"], sol.coefficients)
