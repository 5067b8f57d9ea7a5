"""Dense feed-forward network x -> (p_r, p_i) with exact input derivatives.

Parameters live in one flat float64 vector.  Layer ``l`` owns a weight block
of shape ``(fan_in, fan_out)`` (row-major, so ``z = a @ W + b``) followed by
its bias block.  Input gradients and Laplacians are propagated layer by
layer alongside the activations (value, Jacobian, Laplacian), which is exact
to rounding and keeps the whole computation differentiable with respect to
the parameters through torch autograd.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

DTYPE = torch.float64

ACTIVATION_KINDS = ("sin", "tanh", "linear")


@dataclass(frozen=True)
class ActivationSpec:
    """``sin`` means ``sin(scale * z)``; ``tanh`` and ``linear`` ignore scale."""

    kind: str = "sin"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError(f"activation scale must be positive, got {self.scale}")

    def derivatives(self, z: torch.Tensor):
        """Return sigma(z), sigma'(z), sigma''(z)."""
        if self.kind == "sin":
            s = self.scale
            sz, cz = torch.sin(s * z), torch.cos(s * z)
            return sz, s * cz, -(s * s) * sz
        if self.kind == "tanh":
            t = torch.tanh(z)
            d1 = 1.0 - t * t
            return t, d1, -2.0 * t * d1
        one = torch.ones_like(z)
        return z, one, torch.zeros_like(z)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationSpec":
        return cls(kind=d["kind"], scale=float(d.get("scale", 1.0)))


SIN = ActivationSpec("sin", 1.0)
LINEAR = ActivationSpec("linear")
TANH = ActivationSpec("tanh")


@dataclass(frozen=True)
class LayerSlice:
    """Offsets of one affine layer inside the flat parameter vector."""

    fan_in: int
    fan_out: int
    w_start: int
    b_start: int

    @property
    def w_stop(self) -> int:
        return self.b_start

    @property
    def b_stop(self) -> int:
        return self.b_start + self.fan_out


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    hidden_activations: tuple[ActivationSpec, ...]
    output_activation: ActivationSpec = LINEAR
    init_seed: int = 0
    output_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "hidden_activations", tuple(self.hidden_activations))
        if self.input_dim not in (2, 3):
            raise ValueError(f"input_dim must be 2 or 3, got {self.input_dim}")
        if self.output_dim != 2:
            raise ValueError("output_dim is fixed to 2 (real and imaginary pressure)")
        if len(self.hidden_activations) != len(self.hidden_widths):
            raise ValueError("need exactly one activation per hidden layer")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("all hidden widths must be >= 1")

    @classmethod
    def uniform(cls, input_dim: int, width: int = 150, depth: int = 3, scale: float = 1.0,
                init_seed: int = 0, output_activation: ActivationSpec = LINEAR) -> "NetworkSpec":
        """``depth`` hidden layers of equal width, all ``sin(scale*z)``."""
        act = ActivationSpec("sin", scale)
        return cls(input_dim, (width,) * depth, (act,) * depth, output_activation, init_seed)

    @classmethod
    def v_family(cls, input_dim: int, variant: str, init_seed: int = 0) -> "NetworkSpec":
        """Widening 32/64/128 networks.

        ``V`` uses sin(z) everywhere with a linear output; ``Va`` and ``Vb`` use
        sin(z), sin(2z), sin(4z) in the hidden layers and a tanh (Va) or sin (Vb)
        output layer.
        """
        widths = (32, 64, 128)
        if variant == "V":
            return cls(input_dim, widths, (SIN,) * 3, LINEAR, init_seed)
        acts = tuple(ActivationSpec("sin", s) for s in (1.0, 2.0, 4.0))
        if variant == "Va":
            return cls(input_dim, widths, acts, TANH, init_seed)
        if variant == "Vb":
            return cls(input_dim, widths, acts, SIN, init_seed)
        raise ValueError(f"unknown V-family variant {variant!r}")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def activations(self) -> tuple[ActivationSpec, ...]:
        return (*self.hidden_activations, self.output_activation)

    @property
    def n_layers(self) -> int:
        """Number of affine layers (hidden layers plus the output layer)."""
        return len(self.hidden_widths) + 1

    @property
    def layout(self) -> tuple[LayerSlice, ...]:
        out, off = [], 0
        sizes = self.layer_sizes
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            out.append(LayerSlice(fi, fo, off, off + fi * fo))
            off += fi * fo + fo
        return tuple(out)

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def with_seed(self, seed: int) -> "NetworkSpec":
        return NetworkSpec(self.input_dim, self.hidden_widths, self.hidden_activations,
                           self.output_activation, int(seed), self.output_dim)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "hidden_activations": [a.to_dict() for a in self.hidden_activations],
            "output_activation": self.output_activation.to_dict(),
            "init_seed": int(self.init_seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_widths=tuple(d["hidden_widths"]),
            hidden_activations=tuple(ActivationSpec.from_dict(a) for a in d["hidden_activations"]),
            output_activation=ActivationSpec.from_dict(d.get("output_activation", {"kind": "linear"})),
            init_seed=int(d.get("init_seed", 0)),
        )

    def spec_hash(self) -> str:
        """Hash of the architecture (the seed is excluded: it does not change the layout)."""
        d = self.to_dict()
        d.pop("init_seed")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ParameterVector:
    values: torch.Tensor
    layout: tuple[LayerSlice, ...]
    trainable_mask: torch.Tensor = field(default=None)

    def __post_init__(self):
        self.values = torch.as_tensor(self.values, dtype=DTYPE)
        if self.values.ndim != 1:
            raise ValueError("parameter values must be a flat vector")
        if self.trainable_mask is None:
            self.trainable_mask = torch.ones(len(self.values), dtype=torch.bool)
        self.trainable_mask = torch.as_tensor(self.trainable_mask, dtype=torch.bool)
        if self.trainable_mask.shape != self.values.shape:
            raise ValueError("trainable_mask must match the parameter vector length")
        expected = 0
        for ls in self.layout:
            if ls.w_start != expected or ls.b_start != ls.w_start + ls.fan_in * ls.fan_out:
                raise ValueError("layout blocks must be contiguous")
            expected = ls.b_stop
        if expected != len(self.values):
            raise ValueError(f"layout covers {expected} entries, vector has {len(self.values)}")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_trainable(self) -> int:
        return int(self.trainable_mask.sum())

    def weight(self, layer: int) -> torch.Tensor:
        ls = self.layout[layer]
        return self.values[ls.w_start:ls.w_stop].view(ls.fan_in, ls.fan_out)

    def bias(self, layer: int) -> torch.Tensor:
        ls = self.layout[layer]
        return self.values[ls.b_start:ls.b_stop]

    def layer_mask(self, layers: Sequence[int]) -> torch.Tensor:
        mask = torch.zeros(len(self.values), dtype=torch.bool)
        for l in layers:
            ls = self.layout[l]
            mask[ls.w_start:ls.b_stop] = True
        return mask

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.detach().clone(), self.layout, self.trainable_mask.clone())

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(torch.as_tensor(values, dtype=DTYPE).detach().clone(), self.layout,
                               self.trainable_mask.clone())

    def with_mask(self, mask) -> "ParameterVector":
        return ParameterVector(self.values.detach().clone(), self.layout, torch.as_tensor(mask).clone())

    def save(self, path, spec: NetworkSpec, extra: dict | None = None) -> None:
        """Write an ``.npz`` checkpoint with a JSON header (spec hash, layout, seed)."""
        header = {
            "format": "helmpinn-params-v1",
            "spec_hash": spec.spec_hash(),
            "spec": spec.to_dict(),
            "init_seed": int(spec.init_seed),
            "layout": [[ls.fan_in, ls.fan_out, ls.w_start, ls.b_start] for ls in self.layout],
            "n_params": len(self),
        }
        if extra:
            header["extra"] = extra
        with open(path, "wb") as fh:
            np.savez(fh, values=self.values.detach().numpy(), mask=self.trainable_mask.numpy(),
                     header=np.array(json.dumps(header)))

    @classmethod
    def load(cls, path, spec: NetworkSpec | None = None) -> tuple["ParameterVector", dict]:
        with np.load(Path(path)) as data:
            header = json.loads(str(data["header"]))
            values, mask = data["values"], data["mask"]
        if spec is not None and header["spec_hash"] != spec.spec_hash():
            raise ValueError(
                f"checkpoint spec hash {header['spec_hash']} does not match config spec hash {spec.spec_hash()}")
        layout = tuple(LayerSlice(*row) for row in header["layout"])
        return cls(torch.from_numpy(values.copy()), layout, torch.from_numpy(mask.copy())), header


@dataclass
class EvalWithDerivatives:
    """Network outputs at N points.

    value: (N, 2) with columns (p_r, p_i); gradient: (N, 2, d) holding grad p_r
    and grad p_i; laplacian: (N, 2).  Works with numpy arrays as well, which is
    how the oracles feed exact fields into the residuals.
    """

    value: torch.Tensor
    gradient: torch.Tensor
    laplacian: torch.Tensor | None = None


def init_glorot(spec: NetworkSpec) -> ParameterVector:
    """Glorot-uniform weights, zero biases, all entries trainable."""
    rng = np.random.default_rng(spec.init_seed)
    values = np.zeros(spec.n_params)
    for ls in spec.layout:
        limit = np.sqrt(6.0 / (ls.fan_in + ls.fan_out))
        values[ls.w_start:ls.w_stop] = rng.uniform(-limit, limit, size=ls.fan_in * ls.fan_out)
    return ParameterVector(torch.from_numpy(values), spec.layout)


def _as_points(x, spec: NetworkSpec) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x, dtype=DTYPE)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected points with {spec.input_dim} coordinates, got shape {tuple(x.shape)}")
    return x, single


def _values_of(params) -> torch.Tensor:
    return params.values if isinstance(params, ParameterVector) else params


def propagate(values: torch.Tensor, spec: NetworkSpec, x: torch.Tensor, order: int = 0):
    """Push points through the network.

    ``order`` 0 returns the value; 1 adds the input Jacobian (N, d, 2);
    2 adds the input Laplacian (N, 2).  ``values`` may require grad.
    """
    n, d = x.shape
    a = x
    jac = lap = None
    for i, (ls, act) in enumerate(zip(spec.layout, spec.activations)):
        W = values[ls.w_start:ls.w_stop].view(ls.fan_in, ls.fan_out)
        b = values[ls.b_start:ls.b_stop]
        z = a @ W + b
        s0, s1, s2 = act.derivatives(z)
        if order >= 1:
            jz = W.expand(n, d, ls.fan_out) if i == 0 else jac @ W
            jac = s1[:, None, :] * jz
            if order >= 2:
                quad = (jz * jz).sum(1)
                lap = s2 * quad if i == 0 else s1 * (lap @ W) + s2 * quad
        a = s0
    return a, jac, lap


def forward(params, spec: NetworkSpec, x) -> torch.Tensor:
    """(p_r, p_i) at one point ``(d,)`` or a batch ``(N, d)``."""
    pts, single = _as_points(x, spec)
    out, _, _ = propagate(_values_of(params), spec, pts, 0)
    return out[0] if single else out


def forward_with_derivatives(params, spec: NetworkSpec, x, laplacian: bool = True) -> EvalWithDerivatives:
    pts, single = _as_points(x, spec)
    val, jac, lap = propagate(_values_of(params), spec, pts, 2 if laplacian else 1)
    grad = jac.transpose(1, 2)
    if single:
        return EvalWithDerivatives(val[0], grad[0], None if lap is None else lap[0])
    return EvalWithDerivatives(val, grad, lap)


def loss_gradient(params: ParameterVector, spec: NetworkSpec, problem, samples, weights) -> torch.Tensor:
    """Exact gradient of the weighted PINN loss over the trainable entries only."""
    from .physics import CollocationData, weighted_loss

    data = CollocationData.build(problem, samples)
    theta = params.values.detach().clone().requires_grad_(True)
    total, _ = weighted_loss(theta, spec, data, weights)
    (grad,) = torch.autograd.grad(total, theta)
    return grad[params.trainable_mask]
