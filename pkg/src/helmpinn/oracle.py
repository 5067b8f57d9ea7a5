"""Reference fields: closed-form plane-source solution, Neumann modal
expansion on boxes, and the free-field Green's-function sum.

All oracles work in the complex form Lap p + kc2 p = -k0^2 g.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .model import EvalWithDerivatives
from .physics import HelmholtzProblem, eval_forcing


class OracleError(ValueError):
    pass


class ResonanceError(OracleError):
    pass


@dataclass
class FieldOnPoints:
    points: np.ndarray
    p_r: np.ndarray
    p_i: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.p_r = np.asarray(self.p_r, dtype=float)
        self.p_i = np.asarray(self.p_i, dtype=float)
        if not (len(self.points) == len(self.p_r) == len(self.p_i)):
            raise ValueError("points, p_r and p_i must have equal lengths")

    @classmethod
    def from_complex(cls, points, p) -> "FieldOnPoints":
        p = np.asarray(p)
        return cls(points, p.real, p.imag)

    @property
    def complex(self) -> np.ndarray:
        return self.p_r + 1j * self.p_i

    def __len__(self) -> int:
        return len(self.p_r)

    def subset(self, idx) -> "FieldOnPoints":
        return FieldOnPoints(self.points[idx], self.p_r[idx], self.p_i[idx])

    def to_csv(self, path) -> None:
        d = self.points.shape[1]
        cols = list("xyz"[:d]) + ["p_r", "p_i"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for p, a, b in zip(self.points, self.p_r, self.p_i):
                w.writerow([repr(float(v)) for v in p] + [repr(float(a)), repr(float(b))])

    @classmethod
    def from_csv(cls, path) -> "FieldOnPoints":
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(arr[:, :-2], arr[:, -2], arr[:, -1])


def evaluation_grid(problem: HelmholtzProblem, n: int = 41) -> np.ndarray:
    """Uniform tensor grid including the walls, flattened in ij order."""
    axes = [np.linspace(lo, hi, n) for lo, hi in zip(problem.domain.lower, problem.domain.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


# -- closed-form solution for the plane (s -> inf) source -------------------

@dataclass(frozen=True)
class AnalyticField:
    """p = coefficient * prod_j cos(k x_j)."""

    coefficient: complex
    wavenumber: float
    dim: int

    def values(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.coefficient * np.prod(np.cos(self.wavenumber * x), axis=1)

    def __call__(self, x) -> FieldOnPoints:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return FieldOnPoints.from_complex(x, self.values(x))

    def derivatives(self, x) -> EvalWithDerivatives:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k, c = self.wavenumber, self.coefficient
        cs, sn = np.cos(k * x), np.sin(k * x)
        p0 = np.prod(cs, axis=1)
        grad0 = np.empty_like(x)
        for j in range(self.dim):
            others = np.prod(np.delete(cs, j, axis=1), axis=1)
            grad0[:, j] = -k * sn[:, j] * others
        lap0 = -self.dim * k * k * p0
        return _complex_eval(c * p0, c * grad0, c * lap0)


def _complex_eval(p, grad, lap) -> EvalWithDerivatives:
    value = np.stack([p.real, p.imag], axis=-1)
    gradient = np.stack([grad.real, grad.imag], axis=1)
    laplacian = np.stack([lap.real, lap.imag], axis=-1)
    return EvalWithDerivatives(value, gradient, laplacian)


def analytic_coefficients(eta: float, dim: int = 3, k_ratio2: float = 1.0) -> complex:
    """Amplitude c of p = c p0 for g_r = 2 p0, g_i = 0.

    Substituting p = c p0 (Lap p0 = -dim k^2 p0) gives
    c = 2 (1 + i eta) / (dim (k/k0)^2 (1 + i eta) - 1); for dim = 3 and k = k0
    this is ((4 + 6 eta^2) - 2 i eta) / (4 + 9 eta^2).
    """
    denom = dim * k_ratio2 * (1.0 + 1j * eta) - 1.0
    if abs(denom) < 1e-14:
        raise ResonanceError("plane-source solution is resonant for this wavenumber")
    return 2.0 * (1.0 + 1j * eta) / denom


def analytic_infty(problem: HelmholtzProblem, tol: float = 1e-9) -> AnalyticField:
    src = problem.source
    if not src.is_plane:
        raise OracleError("closed-form solution requires sharpness = inf")
    k = src.cosine_wavenumber
    for ax, (lo, hi) in enumerate(zip(problem.domain.lower, problem.domain.upper)):
        for bound in (lo, hi):
            q = k * bound / math.pi
            if abs(q - round(q)) > tol:
                raise OracleError(
                    f"axis {'xyz'[ax]}: k*{bound:g}/pi = {q:.6g} is not an integer, "
                    "so cos(k x) violates the sound-hard wall condition")
    c = analytic_coefficients(problem.medium.eta, problem.dim, (k / problem.medium.k0) ** 2)
    return AnalyticField(complex(c), float(k), problem.dim)


# -- modal expansion ---------------------------------------------------------

def _axis_modes_needed(problem: HelmholtzProblem, axis: int) -> int:
    src = problem.source
    lo, hi = problem.domain.lower[axis], problem.domain.upper[axis]
    L = hi - lo
    k = src.cosine_wavenumber
    base = int(math.ceil(k * L / math.pi))
    # forcing slope at the walls decides spectral vs algebraic coefficient decay
    slope = max(abs(src.axis_slope(axis, lo)), abs(src.axis_slope(axis, hi)))
    if slope / max(k, 1.0) > 1e-10:
        return 128 if problem.dim == 3 else 512
    width = 0 if src.is_plane else int(math.ceil(7.5 * L / (math.pi * src.sharpness)))
    return max(16, base + width + 8)


def default_modes(problem: HelmholtzProblem) -> tuple[int, ...]:
    return tuple(_axis_modes_needed(problem, ax) for ax in range(problem.dim))


def _axis_projection(problem: HelmholtzProblem, axis: int, m: int, quad: int | None = None) -> np.ndarray:
    """Cosine-series coefficients of the 1D forcing factor by the midpoint rule."""
    src = problem.source
    lo, hi = problem.domain.lower[axis], problem.domain.upper[axis]
    L = hi - lo
    scales = [2 * math.pi / src.cosine_wavenumber if src.cosine_wavenumber else L]
    if not src.is_plane:
        scales.append(math.pi * src.sharpness)
    q = quad or max(4096, 64 * m, int(math.ceil(8 * L / min(scales))))
    xq = lo + (np.arange(q) + 0.5) * (L / q)
    modes = np.arange(m)
    basis = np.cos(np.outer(modes, xq - lo) * (math.pi / L))
    norm = np.where(modes == 0, 1.0, 2.0) / q
    return norm * (basis @ src.axis_factor(axis, xq))


@dataclass
class ModalSolution:
    modes: tuple[int, ...]
    coefficients: np.ndarray  # complex, shape == modes
    problem: HelmholtzProblem

    def _axis_basis(self, axis: int, x: np.ndarray, deriv: bool = False) -> np.ndarray:
        lo, hi = self.problem.domain.lower[axis], self.problem.domain.upper[axis]
        w = np.arange(self.modes[axis]) * (math.pi / (hi - lo))
        arg = np.outer(x - lo, w)
        return -np.sin(arg) * w if deriv else np.cos(arg)

    def eigenvalues(self) -> np.ndarray:
        d = self.problem.domain
        lam = 0.0
        for ax in range(d.dim):
            w = (np.arange(self.modes[ax]) * math.pi / d.lengths[ax]) ** 2
            shape = [1] * d.dim
            shape[ax] = -1
            lam = lam + w.reshape(shape)
        return lam

    def _contract(self, coeffs: np.ndarray, bases: list[np.ndarray]) -> np.ndarray:
        # coeffs (M1, ..., Md); bases[j] (N, Mj) -> (N,)
        t = np.einsum("nk,...k->n...", bases[-1], coeffs, optimize=True)
        for b in reversed(bases[:-1]):
            if t.ndim == 2:
                return np.einsum("nj,nj->n", b, t)
            t = np.einsum("nj,n...j->n...", b, t, optimize=True)
        return t

    def _eval_points(self, x: np.ndarray, what: str) -> np.ndarray:
        dim = self.problem.dim
        chunk = max(1, int(4e6 // max(1, int(np.prod(self.modes[:-1])))))
        out = []
        lap_coeffs = -self.eigenvalues() * self.coefficients if what == "lap" else None
        for s in range(0, len(x), chunk):
            xc = x[s:s + chunk]
            cos_b = [self._axis_basis(ax, xc[:, ax]) for ax in range(dim)]
            if what == "value":
                out.append(self._contract(self.coefficients, cos_b))
            elif what == "lap":
                out.append(self._contract(lap_coeffs, cos_b))
            else:
                cols = []
                for j in range(dim):
                    b = list(cos_b)
                    b[j] = self._axis_basis(j, xc[:, j], deriv=True)
                    cols.append(self._contract(self.coefficients, b))
                out.append(np.stack(cols, axis=1))
        return np.concatenate(out)

    def values(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self._eval_points(x, "value")

    def __call__(self, x) -> FieldOnPoints:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return FieldOnPoints.from_complex(x, self.values(x))

    def derivatives(self, x) -> EvalWithDerivatives:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return _complex_eval(self._eval_points(x, "value"), self._eval_points(x, "grad"),
                             self._eval_points(x, "lap"))

    def on_grid(self, axes: list[np.ndarray]) -> np.ndarray:
        """Values on a tensor grid given per-axis coordinates (shape n1 x ... x nd)."""
        t = self.coefficients
        for ax, xa in enumerate(axes):
            t = np.tensordot(self._axis_basis(ax, np.asarray(xa, dtype=float)), t, axes=([1], [ax]))
            t = np.moveaxis(t, 0, ax)
        return t

    def tail_energy_fraction(self) -> float:
        """Energy in the outermost mode shell relative to the total.

        The shell is two indices thick so that sources symmetric about the
        box centre (whose odd modes vanish) are not reported as converged
        for free.
        """
        e = np.abs(self.coefficients) ** 2
        inner = e[tuple(slice(0, max(m - 2, 0)) for m in self.modes)].sum()
        total = e.sum()
        return float((total - inner) / total) if total > 0 else 0.0

    def save(self, path) -> None:
        np.savez(path, modes=np.array(self.modes), coefficients=self.coefficients)


def modal_solve(problem: HelmholtzProblem, modes=None, quad: int | None = None) -> ModalSolution:
    """Project the forcing on prod_j cos(m_j pi (x_j - lo_j) / L_j) and divide
    by (lambda_m - kc2)."""
    if modes is None:
        modes = default_modes(problem)
    elif np.isscalar(modes):
        modes = (int(modes),) * problem.dim
    modes = tuple(int(m) for m in modes)
    if len(modes) != problem.dim or min(modes) < 1:
        raise ValueError("need one positive mode count per axis")
    med = problem.medium
    factors = [_axis_projection(problem, ax, m, quad) for ax, m in enumerate(modes)]
    g_hat = 2.0 * factors[0]
    for f in factors[1:]:
        g_hat = np.multiply.outer(g_hat, f)
    sol = ModalSolution(modes, np.zeros(modes, dtype=complex), problem)
    lam = sol.eigenvalues()
    denom = lam - med.kc2
    if med.eta == 0:
        hit = np.abs(denom) < 1e-9 * med.k0 ** 2
        if np.any(hit & (np.abs(g_hat) > 1e-14)):
            idx = tuple(int(v[0]) for v in np.nonzero(hit))
            raise ResonanceError(f"undamped problem is resonant at mode {idx}")
        denom = np.where(hit, np.inf, denom)
    sol.coefficients = med.k0 ** 2 * g_hat / denom
    return sol


# -- free-field Green's function ------------------------------------------------

def complex_wavenumber(problem: HelmholtzProblem) -> complex:
    """Principal root of kc2 (Im k > 0 for eta < 0, i.e. decaying waves)."""
    return complex(np.sqrt(complex(problem.medium.kc2)))


def greens_function(k: complex, x, x0) -> complex:
    r = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(x0, dtype=float)))
    if r == 0.0:
        raise OracleError("Green's function is singular at x == x0")
    return complex(np.exp(1j * k * r) / (4.0 * math.pi * r))


def gf_convolve(problem: HelmholtzProblem, grid_n, query_points, chunk: int = 64) -> FieldOnPoints:
    """Sum G(x, x_c) k0^2 g(x_c) dV over cell centres of a uniform grid.

    The cell containing a query point is skipped.
    """
    if problem.dim != 3:
        raise OracleError("the Green's-function field is only available in 3D")
    if np.isscalar(grid_n):
        grid_n = (int(grid_n),) * 3
    if min(grid_n) < 8:
        raise ValueError("grid_n must be at least 8 per axis")
    d = problem.domain
    lo = np.asarray(d.lower)
    h = d.lengths / np.asarray(grid_n)
    axes = [lo[j] + (np.arange(grid_n[j]) + 0.5) * h[j] for j in range(3)]
    centers = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    gr, gi = eval_forcing(problem.source, centers)
    weights = problem.medium.k0 ** 2 * (gr + 1j * gi) * float(np.prod(h))
    k = complex_wavenumber(problem)

    q = np.atleast_2d(np.asarray(query_points, dtype=float))
    inside = np.all((q >= lo) & (q <= np.asarray(d.upper)), axis=1)
    cell = np.clip(np.floor((q - lo) / h).astype(int), 0, np.asarray(grid_n) - 1)
    self_idx = np.where(inside, np.ravel_multi_index(cell.T, grid_n), -1)

    out = np.empty(len(q), dtype=complex)
    for s in range(0, len(q), chunk):
        qc = q[s:s + chunk]
        r = cdist(qc, centers)
        rows = np.arange(len(qc))
        own = self_idx[s:s + chunk]
        mine = own >= 0
        r[rows[mine], own[mine]] = 1.0
        if np.any(r == 0.0):
            raise OracleError("query point coincides with a cell centre outside its own cell")
        G = np.exp(1j * k * r) / (4.0 * math.pi * r)
        G[rows[mine], own[mine]] = 0.0
        out[s:s + chunk] = G @ weights
    return FieldOnPoints.from_complex(q, out)


def reference_field(problem: HelmholtzProblem, modes=None):
    """Closed form when it applies, modal expansion otherwise."""
    if problem.source.is_plane:
        try:
            return analytic_infty(problem)
        except OracleError:
            pass
    return modal_solve(problem, modes)
