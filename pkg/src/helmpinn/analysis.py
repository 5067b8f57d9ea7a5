"""Error metrics, the meaningful-solution check, loss landscapes and the
dominant Hessian eigenvalue."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import DTYPE, NetworkSpec, ParameterVector, forward
from .oracle import FieldOnPoints
from .physics import CollocationData, HelmholtzProblem, LossWeights, weighted_loss

FILTER_NORM = "filter"
GLOBAL_NORM = "global"


def _as_complex(p) -> np.ndarray:
    if isinstance(p, FieldOnPoints):
        return p.complex
    return np.asarray(p, dtype=complex)


def _check_aligned(a, b) -> None:
    if isinstance(a, FieldOnPoints) and isinstance(b, FieldOnPoints):
        if a.points.shape != b.points.shape or not np.allclose(a.points, b.points, rtol=0, atol=1e-12):
            raise ValueError("fields are given on different point sets")


def relative_l2(p_pred, p_ref) -> float:
    """Relative L2 error in percent, treating p = p_r + i p_i."""
    _check_aligned(p_pred, p_ref)
    pred, ref = _as_complex(p_pred), _as_complex(p_ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    den = float(np.sum(np.abs(ref) ** 2))
    if den == 0.0:
        raise ValueError("reference field is identically zero")
    return 100.0 * float(np.sqrt(np.sum(np.abs(ref - pred) ** 2) / den))


@dataclass(frozen=True)
class ErrorReport:
    e_rel_ref: float
    e_rel_gf: float
    n_points: int
    meaningful: bool


def meaningful_check(p_pred, p_ref, p_gf) -> ErrorReport:
    """A prediction is meaningful when it beats the free-field estimate."""
    e_ref = relative_l2(p_pred, p_ref)
    e_gf = relative_l2(p_pred, p_gf)
    return ErrorReport(e_ref, e_gf, len(_as_complex(p_ref)), e_ref < e_gf)


def network_field(params, spec: NetworkSpec, points) -> FieldOnPoints:
    with torch.no_grad():
        out = forward(params, spec, points).numpy()
    return FieldOnPoints(np.asarray(points, dtype=float), out[:, 0].copy(), out[:, 1].copy())


def make_evaluator(spec: NetworkSpec, ref: FieldOnPoints, gf: FieldOnPoints | None = None):
    """Callback for the training loops returning (e_rel_ref, e_rel_gf)."""
    pts = torch.as_tensor(ref.points, dtype=DTYPE)

    def evaluate(params):
        pred = network_field(params, spec, pts)
        return relative_l2(pred.complex, ref.complex), (
            None if gf is None else relative_l2(pred.complex, gf.complex))

    return evaluate


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    loss: np.ndarray  # loss[i, j] at (alphas[i], betas[j])
    direction_seeds: tuple[int, int] | None
    normalization: str
    half_range: float
    baseline: float

    @property
    def center(self) -> tuple[int, int]:
        return len(self.alphas) // 2, len(self.betas) // 2

    def center_is_minimum(self) -> bool:
        return bool(self.loss[self.center] <= self.loss.min())

    def to_csv(self, path) -> None:
        """Matrix CSV: first row holds the betas, first column the alphas."""
        path = Path(path)
        with path.open("w") as fh:
            fh.write("alpha\\beta," + ",".join(repr(float(b)) for b in self.betas) + "\n")
            for a, row in zip(self.alphas, self.loss):
                fh.write(repr(float(a)) + "," + ",".join(repr(float(v)) for v in row) + "\n")

    def sidecar(self) -> dict:
        return {"direction_seeds": None if self.direction_seeds is None else list(self.direction_seeds),
                "half_range": self.half_range, "resolution": len(self.alphas),
                "normalization": self.normalization, "baseline_loss": self.baseline}

    def save(self, csv_path, json_path=None) -> None:
        self.to_csv(csv_path)
        json_path = Path(json_path) if json_path else Path(csv_path).with_suffix(".json")
        json_path.write_text(json.dumps(self.sidecar(), indent=2) + "\n")


def normalize_direction(direction: torch.Tensor, params: ParameterVector,
                        normalization: str = FILTER_NORM) -> torch.Tensor:
    """Rescale a raw direction to the parameter scale; frozen entries are zeroed.

    FilterNorm matches each neuron's incoming weights (one column in the
    (fan_in, fan_out) layout) to the norm of the same block of ``params``;
    each bias vector is matched to the norm of the corresponding bias.
    """
    d = torch.as_tensor(direction, dtype=DTYPE).clone()
    theta = params.values.detach()
    if normalization == FILTER_NORM:
        for ls in params.layout:
            W = theta[ls.w_start:ls.w_stop].view(ls.fan_in, ls.fan_out)
            D = d[ls.w_start:ls.w_stop].view(ls.fan_in, ls.fan_out)
            D.mul_(W.norm(dim=0) / (D.norm(dim=0) + 1e-10))
            b, db = theta[ls.b_start:ls.b_stop], d[ls.b_start:ls.b_stop]
            db.mul_(b.norm() / (db.norm() + 1e-10))
    elif normalization == GLOBAL_NORM:
        d.mul_(theta.norm() / (d.norm() + 1e-10))
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    d[~params.trainable_mask] = 0.0
    return d


def random_direction(params: ParameterVector, seed: int, normalization: str = FILTER_NORM) -> torch.Tensor:
    raw = np.random.default_rng(seed).standard_normal(len(params))
    return normalize_direction(torch.from_numpy(raw), params, normalization)


def grid_axis(half_range: float, resolution: int) -> np.ndarray:
    ax = np.linspace(-half_range, half_range, resolution)
    ax[resolution // 2] = 0.0
    return ax


def landscape_grid(params: ParameterVector, spec: NetworkSpec, problem: HelmholtzProblem, samples,
                   weights: LossWeights, half_range: float = 1.0, resolution: int = 21,
                   seeds: Sequence[int] = (0, 1), normalization: str = FILTER_NORM,
                   directions: tuple | None = None) -> LandscapeGrid:
    """Total loss on a 2D slice params + a*d1 + b*d2.

    ``directions`` overrides the seeded draw with explicit (already scaled)
    vectors.  Cells whose loss is NaN are stored as +inf.
    """
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError("resolution must be a positive odd integer")
    if not half_range > 0:
        raise ValueError("half_range must be positive")
    if directions is None:
        d1 = random_direction(params, seeds[0], normalization)
        d2 = random_direction(params, seeds[1], normalization)
        dir_seeds = (int(seeds[0]), int(seeds[1]))
    else:
        d1, d2 = (torch.as_tensor(d, dtype=DTYPE) for d in directions)
        dir_seeds = None
    data = CollocationData.build(problem, samples)
    theta = params.values.detach()
    alphas = grid_axis(half_range, resolution)
    betas = grid_axis(half_range, resolution)
    loss = np.empty((resolution, resolution))
    with torch.no_grad():
        baseline = float(weighted_loss(theta, spec, data, weights)[0])
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                v = theta
                # skip zero multiples so a non-finite direction cannot touch its own axis
                if a != 0.0:
                    v = v + a * d1
                if b != 0.0:
                    v = v + b * d2
                val = float(weighted_loss(v, spec, data, weights)[0])
                loss[i, j] = np.inf if np.isnan(val) else val
    return LandscapeGrid(alphas, betas, loss, dir_seeds, normalization, float(half_range), baseline)


@dataclass(frozen=True)
class HessianEstimate:
    eigenvalue: float
    converged: bool
    iterations: int
    residual: float


GradFn = Callable[[torch.Tensor], torch.Tensor]


def pinn_grad_fn(params: ParameterVector, spec: NetworkSpec, problem: HelmholtzProblem, samples,
                 weights: LossWeights) -> GradFn:
    """Gradient of the PINN loss as a function of the trainable entries."""
    data = CollocationData.build(problem, samples)
    base = params.values.detach().clone()
    mask = params.trainable_mask

    def grad(t: torch.Tensor) -> torch.Tensor:
        full = base.clone()
        full[mask] = t
        full.requires_grad_(True)
        total, _ = weighted_loss(full, spec, data, weights)
        (g,) = torch.autograd.grad(total, full)
        return g[mask]

    return grad


def hessian_top_eigenvalue(params: ParameterVector, spec: NetworkSpec | None = None,
                           problem: HelmholtzProblem | None = None, samples=None,
                           weights: LossWeights | None = None, iters: int = 100, tol: float = 1e-6,
                           seed: int = 0, grad_fn: GradFn | None = None) -> HessianEstimate:
    """Power iteration on finite-difference Hessian-vector products.

    Products use central differences of exact gradients with step
    1e-4 * (1 + max|theta|).  The returned value is the largest Rayleigh
    quotient seen; ``converged`` reports whether ||Hv - lv|| <= tol * |l|.
    ``grad_fn`` replaces the PINN gradient (it receives the trainable entries).
    """
    mask = params.trainable_mask
    theta = params.values.detach()[mask].clone()
    if len(theta) == 0:
        raise ValueError("no trainable entries")
    if grad_fn is None:
        grad_fn = pinn_grad_fn(params, spec, problem, samples, weights)
    h = 1e-4 * (1.0 + float(theta.abs().max()))

    def hvp(v):
        return (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2 * h)

    v = torch.from_numpy(np.random.default_rng(seed).standard_normal(len(theta)))
    v /= v.norm()
    best, res, converged, it = -np.inf, np.inf, False, 0
    for it in range(1, iters + 1):
        hv = hvp(v)
        lam = float(v @ hv)
        best = max(best, lam)
        res = float((hv - lam * v).norm())
        if res <= tol * max(abs(lam), 1e-300):
            converged = True
            break
        nrm = hv.norm()
        if nrm == 0:
            converged = True
            break
        v = hv / nrm
    return HessianEstimate(best, converged, it, res)
