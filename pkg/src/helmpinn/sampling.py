"""Seeded collocation points sized by a points-per-wavelength rule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .physics import HelmholtzProblem


@dataclass(frozen=True)
class PointCounts:
    per_axis: tuple[int, ...]
    n_interior: int
    n_boundary: int
    per_face: dict[str, int]


@dataclass
class FaceSamples:
    face_id: str
    points: np.ndarray
    normal: np.ndarray


@dataclass
class SampleSet:
    interior: np.ndarray
    boundary: list[FaceSamples]
    seed: int
    ppw: float
    counts: PointCounts

    @property
    def boundary_points(self) -> np.ndarray:
        return np.concatenate([f.points for f in self.boundary])

    def export(self, path) -> None:
        """Plain-text audit dump: one point per line with its set label."""
        path = Path(path)
        with path.open("w") as fh:
            fh.write(f"# seed={self.seed} ppw={self.ppw} n_interior={self.counts.n_interior} "
                     f"n_boundary={self.counts.n_boundary}\n")
            for p in self.interior:
                fh.write("interior " + " ".join(repr(float(v)) for v in p) + "\n")
            for face in self.boundary:
                for p in face.points:
                    fh.write(f"{face.face_id} " + " ".join(repr(float(v)) for v in p) + "\n")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def count_points(ppw: float, problem: HelmholtzProblem) -> PointCounts:
    """n_i = round(ppw * L_i / wavelength), at least 2 per axis.

    Interior gets prod(n_i) points; each face gets the product of its
    tangential counts (so a cube gets 6 n^2, a square 4 n).
    """
    if not ppw > 0:
        raise ValueError("ppw must be positive")
    lam = problem.medium.wavelength
    per_axis = tuple(max(2, _round_half_up(ppw * L / lam)) for L in problem.domain.lengths)
    per_face = {}
    for face in problem.domain.faces():
        per_face[face.face_id] = int(np.prod([n for j, n in enumerate(per_axis) if j != face.axis]))
    return PointCounts(per_axis, int(np.prod(per_axis)), sum(per_face.values()), per_face)


def _uniform_open(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    pts = rng.uniform(lo, hi, size=(n, len(lo)))
    # uniform() is half-open; redraw the (practically impossible) lower-edge hits
    bad = np.any(pts <= lo, axis=1)
    while bad.any():
        pts[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), len(lo)))
        bad = np.any(pts <= lo, axis=1)
    return pts


def sample(problem: HelmholtzProblem, ppw: float, seed: int) -> SampleSet:
    counts = count_points(ppw, problem)
    rng = np.random.default_rng(seed)
    lo = np.asarray(problem.domain.lower)
    hi = np.asarray(problem.domain.upper)
    interior = _uniform_open(rng, lo, hi, counts.n_interior)
    boundary = []
    for face in problem.domain.faces():
        m = counts.per_face[face.face_id]
        pts = rng.uniform(lo, hi, size=(m, problem.dim))
        pts[:, face.axis] = face.coordinate
        boundary.append(FaceSamples(face.face_id, pts, face.normal(problem.dim)))
    return SampleSet(interior, boundary, int(seed), float(ppw), counts)
