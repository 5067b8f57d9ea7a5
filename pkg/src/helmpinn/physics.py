"""Damped Helmholtz problem in a box with sound-hard walls, and the PINN loss.

The complex pressure p = p_r + i p_i satisfies, split into real equations,

    Lap p_r / k0^2 - eta Lap p_i / k0^2 + p_r = -g_r + eta g_i
    Lap p_i / k0^2 + eta Lap p_r / k0^2 + p_i = -eta g_r - g_i

with grad p . n = 0 on every face.  Written in complex form this is
Lap p + kc2 p = -k0^2 g with kc2 = k0^2 / (1 + i eta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .model import DTYPE, EvalWithDerivatives, NetworkSpec, ParameterVector, propagate

SINGLE_SET = "single"
PER_FACE_SETS = "per_face"
AXES = "xyz"


@dataclass(frozen=True)
class Face:
    face_id: str
    axis: int
    side: int  # -1 for the lower face, +1 for the upper face
    coordinate: float

    def normal(self, dim: int) -> np.ndarray:
        n = np.zeros(dim)
        n[self.axis] = float(self.side)
        return n


@dataclass(frozen=True)
class BoxDomain:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi) or len(lo) not in (2, 3):
            raise ValueError("box must have 2 or 3 matching lower/upper coordinates")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"upper must exceed lower on every axis: {lo} / {hi}")

    @classmethod
    def unit(cls, dim: int) -> "BoxDomain":
        return cls((0.0,) * dim, (1.0,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lengths(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))

    def faces(self) -> list[Face]:
        out = []
        for ax in range(self.dim):
            out.append(Face(f"{AXES[ax]}-", ax, -1, self.lower[ax]))
            out.append(Face(f"{AXES[ax]}+", ax, +1, self.upper[ax]))
        return out

    def contains(self, x, closed: bool = True) -> bool:
        x = np.asarray(x, dtype=float)
        if closed:
            return bool(np.all(x >= self.lower) and np.all(x <= self.upper))
        return bool(np.all(x > self.lower) and np.all(x < self.upper))


@dataclass(frozen=True)
class MediumSpec:
    """c0 in m/s, eta = c_i^2/c0^2, nu = f L_ref / c0."""

    c0: float = 1.0
    eta: float = -0.04
    nu: float = 2.0
    L_ref: float = 1.0

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not abs(self.eta) < 1:
            raise ValueError("|eta| must be below 1")
        if not self.L_ref > 0:
            raise ValueError("L_ref must be positive")

    @property
    def frequency(self) -> float:
        return self.nu * self.c0 / self.L_ref

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.frequency

    @property
    def k0(self) -> float:
        return self.omega / self.c0

    @property
    def wavelength(self) -> float:
        return self.c0 / self.frequency

    @property
    def inv_ki2(self) -> float:
        """1/k_i^2 = eta/k0^2 (negative for eta < 0)."""
        return self.eta / self.k0 ** 2

    @property
    def kc2(self) -> complex:
        return self.k0 ** 2 / (1.0 + 1j * self.eta)

    def derived(self) -> dict:
        kc2 = self.kc2
        return {
            "f": self.frequency,
            "omega": self.omega,
            "k0": self.k0,
            "wavelength": self.wavelength,
            "inv_ki2": self.inv_ki2,
            "kc2_real": kc2.real,
            "kc2_imag": kc2.imag,
        }


@dataclass(frozen=True)
class SourceSpec:
    """g_r = 2 prod_j cos(k x_j) exp(-|x - x_s|^2 / (2 s^2)), g_i = 0.

    ``sharpness=math.inf`` drops the Gaussian window.  ``cosine_wavenumber``
    of None is resolved to the medium's k0 by :class:`HelmholtzProblem`.
    """

    sharpness: float = math.inf
    location: tuple[float, ...] = (0.5, 0.5, 0.5)
    cosine_wavenumber: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "location", tuple(float(v) for v in self.location))
        if not self.sharpness > 0:
            raise ValueError("source sharpness must be positive (or inf)")

    @property
    def is_plane(self) -> bool:
        return math.isinf(self.sharpness)

    def axis_factor(self, axis: int, x: np.ndarray) -> np.ndarray:
        """1D factor of the separable forcing along one axis (without the 2)."""
        k = self.cosine_wavenumber
        out = np.cos(k * x)
        if not self.is_plane:
            out = out * np.exp(-((x - self.location[axis]) ** 2) / (2.0 * self.sharpness ** 2))
        return out

    def axis_slope(self, axis: int, x: float) -> float:
        """Derivative of :meth:`axis_factor` at a scalar coordinate."""
        k = self.cosine_wavenumber
        d = -k * math.sin(k * x)
        if not self.is_plane:
            u = x - self.location[axis]
            w = math.exp(-u * u / (2.0 * self.sharpness ** 2))
            d = d * w - math.cos(k * x) * w * u / self.sharpness ** 2
        return d


@dataclass(frozen=True)
class HelmholtzProblem:
    domain: BoxDomain
    medium: MediumSpec
    source: SourceSpec
    bc_grouping: str = SINGLE_SET

    def __post_init__(self):
        if self.bc_grouping not in (SINGLE_SET, PER_FACE_SETS):
            raise ValueError(f"bc_grouping must be {SINGLE_SET!r} or {PER_FACE_SETS!r}")
        src = self.source
        if src.cosine_wavenumber is None:
            src = replace(src, cosine_wavenumber=self.medium.k0)
            object.__setattr__(self, "source", src)
        if len(src.location) != self.domain.dim:
            raise ValueError("source location dimension does not match the domain")
        if not self.domain.contains(src.location, closed=True):
            raise ValueError("source location must lie in the closed domain")

    @property
    def dim(self) -> int:
        return self.domain.dim

    def forcing(self, x) -> tuple[np.ndarray, np.ndarray]:
        return eval_forcing(self.source, x)


@dataclass(frozen=True)
class LossWeights:
    bc_r: float = 1.0
    bc_i: float = 1.0
    pde_r: float = 1.0
    pde_i: float = 1.0

    def __post_init__(self):
        w = self.as_tuple()
        if any(v < 0 for v in w):
            raise ValueError("loss weights must be nonnegative")
        if not any(v > 0 for v in w):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.bc_r, self.bc_i, self.pde_r, self.pde_i)

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(*(c * v for v in self.as_tuple()))

    @classmethod
    def preset_3d(cls, k0: float) -> "LossWeights":
        return cls(bc_r=5.0 / k0 ** 2, bc_i=1.0 / k0 ** 2, pde_r=1.0, pde_i=0.2)

    @classmethod
    def preset_2d_complex(cls) -> "LossWeights":
        return cls(bc_r=0.01, bc_i=0.0002, pde_r=1.0, pde_i=0.02)

    @classmethod
    def preset_2d_real(cls) -> "LossWeights":
        # the real-valued 2D case carries a single [BC; PDE] = [0.01; 1] pair
        return cls(bc_r=0.01, bc_i=0.01, pde_r=1.0, pde_i=1.0)


@dataclass
class LossBreakdown:
    pde_r: float
    pde_i: float
    bc_r: float
    bc_i: float
    total: float
    per_set: dict[str, tuple[float, float]] | None = field(default=None)

    def as_row(self) -> list[float]:
        return [self.pde_r, self.pde_i, self.bc_r, self.bc_i, self.total]

    def terms(self) -> dict[str, float]:
        return {"pde_r": self.pde_r, "pde_i": self.pde_i, "bc_r": self.bc_r, "bc_i": self.bc_i}


def eval_forcing(source: SourceSpec, x) -> tuple[np.ndarray, np.ndarray]:
    """(g_r, g_i) at a point ``(d,)`` or points ``(N, d)``."""
    if source.cosine_wavenumber is None:
        raise ValueError("source has no cosine wavenumber; build it through HelmholtzProblem")
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x)
    if pts.shape[1] != len(source.location):
        raise ValueError("point dimension does not match the source")
    g = 2.0 * np.prod(np.cos(source.cosine_wavenumber * pts), axis=1)
    if not source.is_plane:
        r2 = np.sum((pts - np.asarray(source.location)) ** 2, axis=1)
        g = g * np.exp(-r2 / (2.0 * source.sharpness ** 2))
    gr = g if x.ndim > 1 else g[0]
    return gr, np.zeros_like(gr)


def pde_residual(ev: EvalWithDerivatives, medium: MediumSpec, g) -> tuple:
    """Residuals of the real and imaginary field equations.

    Accepts numpy arrays or torch tensors; ``ev.value`` and ``ev.laplacian``
    hold (p_r, p_i) in their last axis.
    """
    gr, gi = g
    pr, pi = ev.value[..., 0], ev.value[..., 1]
    lr, li = ev.laplacian[..., 0], ev.laplacian[..., 1]
    inv_k02 = 1.0 / medium.k0 ** 2
    inv_ki2 = medium.inv_ki2
    eta = medium.eta
    rr = lr * inv_k02 - li * inv_ki2 + pr + gr - eta * gi
    ri = li * inv_k02 + lr * inv_ki2 + pi + eta * gr + gi
    return rr, ri


def bc_residual(ev: EvalWithDerivatives, normal) -> tuple:
    """Normal derivatives (grad p_r . n, grad p_i . n)."""
    n = np.asarray(normal, dtype=float)
    if n.ndim == 0 or np.any(np.abs(np.linalg.norm(n.reshape(-1, n.shape[-1]), axis=1) - 1.0) > 1e-12):
        raise ValueError("boundary normal must be a unit vector")
    grad = ev.gradient
    if isinstance(grad, torch.Tensor):
        n = torch.as_tensor(n, dtype=grad.dtype)
    gr, gi = grad[..., 0, :], grad[..., 1, :]
    return (gr * n).sum(-1), (gi * n).sum(-1)


@dataclass
class CollocationData:
    """Tensors prepared once per run: interior points with forcing, boundary
    points with normals and face membership."""

    x_int: torch.Tensor
    g_r: torch.Tensor
    g_i: torch.Tensor
    x_bnd: torch.Tensor
    n_bnd: torch.Tensor
    face_slices: list[tuple[str, slice]]
    medium: MediumSpec
    grouping: str

    @classmethod
    def build(cls, problem: HelmholtzProblem, samples) -> "CollocationData":
        interior = np.asarray(samples.interior, dtype=float)
        if len(interior) == 0 or sum(len(f.points) for f in samples.boundary) == 0:
            raise ValueError("sample set must have interior and boundary points")
        if interior.shape[1] != problem.dim:
            raise ValueError("sample dimension does not match the problem")
        gr, gi = eval_forcing(problem.source, interior)
        pts, nrm, slices, start = [], [], [], 0
        for face in samples.boundary:
            m = len(face.points)
            if m == 0:
                continue
            pts.append(np.asarray(face.points, dtype=float))
            nrm.append(np.broadcast_to(np.asarray(face.normal, dtype=float), (m, problem.dim)))
            slices.append((face.face_id, slice(start, start + m)))
            start += m
        t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=DTYPE)
        return cls(t(interior), t(gr), t(gi), t(np.concatenate(pts)), t(np.concatenate(nrm)),
                   slices, problem.medium, problem.bc_grouping)


def loss_terms(values: torch.Tensor, spec: NetworkSpec, data: CollocationData):
    """Mean-squared residual terms as tensors plus per-face pairs (tensors)."""
    val, jac, lap = propagate(values, spec, data.x_int, 2)
    ev = EvalWithDerivatives(val, None, lap)
    rr, ri = pde_residual(ev, data.medium, (data.g_r, data.g_i))
    pde_r, pde_i = (rr * rr).mean(), (ri * ri).mean()

    _, jb, _ = propagate(values, spec, data.x_bnd, 1)
    # jb: (M, d, 2) -> normal derivative per output
    dn = (jb * data.n_bnd[:, :, None]).sum(1)
    sq = dn * dn
    per_set = {}
    if data.grouping == PER_FACE_SETS:
        for fid, sl in data.face_slices:
            per_set[fid] = (sq[sl, 0].mean(), sq[sl, 1].mean())
        bc_r = torch.stack([v[0] for v in per_set.values()]).mean()
        bc_i = torch.stack([v[1] for v in per_set.values()]).mean()
    else:
        bc_r, bc_i = sq[:, 0].mean(), sq[:, 1].mean()
    return (pde_r, pde_i, bc_r, bc_i), per_set


def weighted_loss(values: torch.Tensor, spec: NetworkSpec, data: CollocationData, weights: LossWeights):
    """Weighted total (tensor, differentiable) and the term tuple."""
    (pde_r, pde_i, bc_r, bc_i), per_set = loss_terms(values, spec, data)
    total = (weights.pde_r * pde_r + weights.pde_i * pde_i
             + weights.bc_r * bc_r + weights.bc_i * bc_i)
    return total, ((pde_r, pde_i, bc_r, bc_i), per_set)


def breakdown_from(total, terms) -> LossBreakdown:
    (pde_r, pde_i, bc_r, bc_i), per_set = terms
    f = lambda t: float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
    ps = {k: (f(a), f(b)) for k, (a, b) in per_set.items()} or None
    return LossBreakdown(f(pde_r), f(pde_i), f(bc_r), f(bc_i), f(total), ps)


def total_loss(params, spec: NetworkSpec, problem: HelmholtzProblem, samples, weights: LossWeights,
               data: CollocationData | None = None) -> LossBreakdown:
    data = data if data is not None else CollocationData.build(problem, samples)
    values = params.values if isinstance(params, ParameterVector) else torch.as_tensor(params, dtype=DTYPE)
    with torch.no_grad():
        total, terms = weighted_loss(values, spec, data, weights)
    return breakdown_from(total, terms)


def face_normals(domain: BoxDomain) -> dict[str, np.ndarray]:
    return {f.face_id: f.normal(domain.dim) for f in domain.faces()}


def make_problem(dim: int = 3, nu: float = 2.0, eta: float = -0.04, sharpness: float = math.inf,
                 lower: Sequence[float] | None = None, upper: Sequence[float] | None = None,
                 location: Sequence[float] | None = None, c0: float = 1.0, L_ref: float = 1.0,
                 bc_grouping: str = SINGLE_SET) -> HelmholtzProblem:
    """Convenience constructor; defaults to the unit box with a centred source."""
    lower = tuple(lower) if lower is not None else (0.0,) * dim
    upper = tuple(upper) if upper is not None else (1.0,) * dim
    domain = BoxDomain(lower, upper)
    loc = tuple(location) if location is not None else tuple(domain.center)
    return HelmholtzProblem(domain, MediumSpec(c0, eta, nu, L_ref), SourceSpec(sharpness, loc), bc_grouping)
