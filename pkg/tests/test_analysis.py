import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helmpinn.analysis import (FILTER_NORM, GLOBAL_NORM, hessian_top_eigenvalue, landscape_grid,
                               meaningful_check, normalize_direction, pinn_grad_fn, random_direction,
                               relative_l2)
from helmpinn.model import NetworkSpec, init_glorot
from helmpinn.oracle import FieldOnPoints
from helmpinn.physics import LossWeights, make_problem, total_loss
from helmpinn.sampling import sample
from helmpinn.training import FreezePolicy


def field(p, n=None):
    p = np.asarray(p, dtype=complex)
    pts = np.arange(3 * len(p), dtype=float).reshape(-1, 3)
    return FieldOnPoints.from_complex(pts, p)


REF = np.array([1 + 2j, -0.5 + 0.1j, 3.0, 0.2j])


def test_relative_l2_basics():
    assert relative_l2(field(REF), field(REF)) == 0.0
    assert relative_l2(field(np.zeros(4)), field(REF)) == pytest.approx(100.0)
    assert relative_l2(field(1.01 * REF), field(REF)) == pytest.approx(1.0, rel=1e-12)


@given(c=st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False))
def test_relative_l2_scale_covariance(c):
    assert relative_l2(c * REF, REF) == pytest.approx(abs(c - 1) * 100, rel=1e-9, abs=1e-9)


def test_relative_l2_errors():
    with pytest.raises(ValueError):
        relative_l2(field(REF), field(np.zeros(4)))
    with pytest.raises(ValueError):
        relative_l2(REF[:3], REF)
    other = FieldOnPoints.from_complex(np.ones((4, 3)), REF)
    with pytest.raises(ValueError):
        relative_l2(field(REF), other)


def test_meaningful_check():
    gf = 0.8 * REF + 0.1
    r = meaningful_check(REF, REF, gf)
    assert r.e_rel_ref == 0 and r.e_rel_gf > 0 and r.meaningful and r.n_points == 4
    r = meaningful_check(gf, REF, gf)
    assert r.e_rel_gf == 0 and r.e_rel_ref > 0 and not r.meaningful


@pytest.fixture(scope="module")
def tiny():
    problem = make_problem(dim=2, nu=1, sharpness=0.5)
    samples = sample(problem, 4, 0)
    spec = NetworkSpec.uniform(2, 8, 2, init_seed=2)
    return problem, samples, spec, init_glorot(spec), LossWeights(0.1, 0.1, 1.0, 0.5)


def test_filter_norm_matches_neuron_norms(tiny):
    _, _, spec, p, _ = tiny
    d = random_direction(p, 5)
    for l, ls in enumerate(spec.layout):
        W = p.weight(l)
        D = d[ls.w_start:ls.w_stop].view(ls.fan_in, ls.fan_out)
        assert torch.allclose(D.norm(dim=0), W.norm(dim=0), rtol=1e-9)
        # zero biases give zero bias directions
        assert torch.all(d[ls.b_start:ls.b_stop] == 0)


def test_global_norm_and_mask(tiny):
    _, _, spec, p, _ = tiny
    d = random_direction(p, 5, GLOBAL_NORM)
    assert d.norm() == pytest.approx(float(p.values.norm()), rel=1e-9)
    frozen = FreezePolicy("all_but_last", 1).apply(p)
    d = random_direction(frozen, 5)
    assert torch.all(d[~frozen.trainable_mask] == 0)
    with pytest.raises(ValueError):
        normalize_direction(d, p, "weird")


def test_landscape_single_cell(tiny):
    problem, samples, spec, p, w = tiny
    g = landscape_grid(p, spec, problem, samples, w, 0.5, 1)
    assert g.loss.shape == (1, 1)
    assert g.loss[0, 0] == total_loss(p, spec, problem, samples, w).total


def test_landscape_center_exact(tiny):
    problem, samples, spec, p, w = tiny
    g = landscape_grid(p, spec, problem, samples, w, 0.5, 5, seeds=(3, 4))
    assert g.alphas[2] == 0.0 and g.betas[2] == 0.0
    assert g.loss[2, 2] == g.baseline == total_loss(p, spec, problem, samples, w).total


def test_landscape_collinear_directions(tiny):
    problem, samples, spec, p, w = tiny
    d1 = random_direction(p, 7)
    g = landscape_grid(p, spec, problem, samples, w, 0.5, 5, directions=(d1, -d1))
    # loss depends on alpha - beta only: constant along the diagonals
    for i in range(4):
        for j in range(4):
            assert g.loss[i, j] == pytest.approx(g.loss[i + 1, j + 1], rel=1e-10)


def test_landscape_nan_cells_become_inf(tiny):
    problem, samples, spec, p, w = tiny
    d1 = torch.zeros(len(p), dtype=torch.float64)
    d1[0] = float("inf")  # sin(inf) is NaN
    d2 = random_direction(p, 1)
    g = landscape_grid(p, spec, problem, samples, w, 1.0, 3, directions=(d1, d2))
    assert np.all(np.isinf(g.loss[[0, 2], :]))
    assert np.all(np.isfinite(g.loss[1, :]))


def test_landscape_validation(tiny):
    problem, samples, spec, p, w = tiny
    with pytest.raises(ValueError):
        landscape_grid(p, spec, problem, samples, w, 0.5, 4)
    with pytest.raises(ValueError):
        landscape_grid(p, spec, problem, samples, w, 0.0, 3)


def test_landscape_save(tiny, tmp_path):
    problem, samples, spec, p, w = tiny
    g = landscape_grid(p, spec, problem, samples, w, 0.5, 3, seeds=(1, 2))
    g.save(tmp_path / "l.csv")
    rows = (tmp_path / "l.csv").read_text().splitlines()
    assert len(rows) == 4 and len(rows[0].split(",")) == 4
    side = json.loads((tmp_path / "l.json").read_text())
    assert side["direction_seeds"] == [1, 2] and side["normalization"] == FILTER_NORM


def test_hessian_quadratic_hook():
    spec = NetworkSpec.uniform(2, 3, 1)
    p = init_glorot(spec)
    est = hessian_top_eigenvalue(p, grad_fn=lambda t: 3.5 * t, iters=50, tol=1e-10)
    assert est.converged and est.eigenvalue == pytest.approx(3.5, rel=1e-8)


def test_hessian_frozen_entries_do_not_contribute():
    spec = NetworkSpec.uniform(2, 3, 1)
    p = FreezePolicy("all_but_last", 1).apply(init_glorot(spec))
    diag = torch.linspace(1.0, 2.0, p.n_trainable, dtype=torch.float64)
    est = hessian_top_eigenvalue(p, grad_fn=lambda t: diag * t, iters=2000, tol=1e-9)
    assert est.eigenvalue == pytest.approx(2.0, rel=1e-6)


def dense_fd_hessian(grad, theta, h):
    n = len(theta)
    H = np.zeros((n, n))
    for i in range(n):
        e = torch.zeros(n, dtype=torch.float64)
        e[i] = h
        H[:, i] = ((grad(theta + e) - grad(theta - e)) / (2 * h)).numpy()
    return 0.5 * (H + H.T)


def test_hessian_matches_dense_fd_on_tiny_pinn(tiny):
    problem, samples, spec, p, w = tiny
    grad = pinn_grad_fn(p, spec, problem, samples, w)
    H = dense_fd_hessian(grad, p.values.clone(), 1e-5)
    top = np.linalg.eigvalsh(H).max()
    est = hessian_top_eigenvalue(p, spec, problem, samples, w, iters=500, tol=1e-7)
    assert est.eigenvalue == pytest.approx(top, rel=0.01)


def test_hessian_estimate_bounds_probe_rayleigh():
    p = init_glorot(NetworkSpec.uniform(2, 1, 1))
    n = len(p)
    B = torch.from_numpy(np.random.default_rng(0).normal(size=(n, n)))
    B = B @ B.T
    est = hessian_top_eigenvalue(p, grad_fn=lambda t: B @ t, iters=3, tol=0, seed=0)
    # the first probe is the seeded start vector
    v = torch.from_numpy(np.random.default_rng(0).standard_normal(n))
    v /= v.norm()
    assert est.eigenvalue >= float(v @ B @ v) - 1e-9
    assert not est.converged and est.iterations == 3
