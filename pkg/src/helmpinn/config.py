"""Run configuration: a strict YAML/JSON key tree validated with pydantic."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_serializer, field_validator, model_validator

from .model import ActivationSpec, NetworkSpec
from .physics import HelmholtzProblem, LossWeights, make_problem
from .training import FreezePolicy, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _parse_sharpness(v):
    if v is None:
        return math.inf
    if isinstance(v, str):
        if v.strip().lower() in ("inf", "infinity", "+inf"):
            return math.inf
        return float(v)
    return float(v)


class ProblemConfig(_Strict):
    dim: Literal[2, 3] = 3
    nu: float
    eta: float = -0.04
    c0: float = 1.0
    L_ref: float = 1.0
    lower: Optional[list[float]] = None
    upper: Optional[list[float]] = None
    sharpness: float = math.inf
    source_location: Optional[list[float]] = None
    bc_grouping: Literal["single", "per_face"] = "single"

    @field_validator("sharpness", mode="before")
    @classmethod
    def _sharpness(cls, v):
        return _parse_sharpness(v)

    @field_serializer("sharpness")
    def _ser_sharpness(self, v):
        return "inf" if math.isinf(v) else v

    @model_validator(mode="after")
    def _dims(self):
        for name in ("lower", "upper", "source_location"):
            val = getattr(self, name)
            if val is not None and len(val) != self.dim:
                raise ValueError(f"{name} must have {self.dim} coordinates")
        return self

    def build(self) -> HelmholtzProblem:
        return make_problem(self.dim, self.nu, self.eta, self.sharpness, self.lower, self.upper,
                            self.source_location, self.c0, self.L_ref, self.bc_grouping)


class ActivationConfig(_Strict):
    kind: Literal["sin", "tanh", "linear"] = "sin"
    scale: float = 1.0

    def build(self) -> ActivationSpec:
        return ActivationSpec(self.kind, self.scale)


class NetworkConfig(_Strict):
    variant: Optional[Literal["V", "Va", "Vb"]] = None
    hidden_widths: list[int] = Field(default_factory=lambda: [150, 150, 150])
    activation: ActivationConfig = Field(default_factory=ActivationConfig)
    hidden_activations: Optional[list[ActivationConfig]] = None
    output_activation: ActivationConfig = Field(default_factory=lambda: ActivationConfig(kind="linear"))
    init_seed: int = 0

    def build(self, input_dim: int) -> NetworkSpec:
        if self.variant is not None:
            return NetworkSpec.v_family(input_dim, self.variant, self.init_seed)
        acts = self.hidden_activations or [self.activation] * len(self.hidden_widths)
        if len(acts) != len(self.hidden_widths):
            raise ConfigError("network.hidden_activations must match network.hidden_widths in length")
        return NetworkSpec(input_dim, tuple(self.hidden_widths), tuple(a.build() for a in acts),
                           self.output_activation.build(), self.init_seed)


class SamplingConfig(_Strict):
    ppw: float = 10.0
    seed: int = 0


class WeightsConfig(_Strict):
    preset: Optional[Literal["3d", "2d_complex", "2d_real"]] = None
    bc_r: Optional[float] = None
    bc_i: Optional[float] = None
    pde_r: Optional[float] = None
    pde_i: Optional[float] = None

    def build(self, problem: HelmholtzProblem) -> LossWeights:
        explicit = (self.bc_r, self.bc_i, self.pde_r, self.pde_i)
        if self.preset is None and any(v is None for v in explicit):
            preset = "3d" if problem.dim == 3 else "2d_complex"
        else:
            preset = self.preset
        if preset == "3d":
            base = LossWeights.preset_3d(problem.medium.k0)
        elif preset == "2d_complex":
            base = LossWeights.preset_2d_complex()
        elif preset == "2d_real":
            base = LossWeights.preset_2d_real()
        else:
            base = LossWeights(*explicit)
        vals = [v if v is not None else b for v, b in zip(explicit, base.as_tuple())]
        return LossWeights(*vals)


class FreezeConfig(_Strict):
    kind: Literal["none", "all_but_first", "all_but_last"] = "none"
    k: int = 0

    def build(self) -> FreezePolicy:
        return FreezePolicy(self.kind, self.k)


class TrainingConfig(_Strict):
    mode: Literal["pinn", "supervised", "discrepancy"] = "pinn"
    iterations: int = 20000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 100
    loss_weights: WeightsConfig = Field(default_factory=WeightsConfig)
    freeze: FreezeConfig = Field(default_factory=FreezeConfig)

    def build(self, problem: HelmholtzProblem, seed: int) -> TrainConfig:
        return TrainConfig(self.iterations, self.learning_rate, self.adam_beta1, self.adam_beta2,
                           self.adam_eps, self.log_every, self.loss_weights.build(problem), seed,
                           self.freeze.build())


class PretrainSection(_Strict):
    iterations: int = 50000
    learning_rate: float = 1e-3
    data: Literal["gf", "reference", "analytic", "modal"] = "gf"
    data_grid_n: int = 41
    gf_grid_n: int = 20
    train_fraction: float = 0.007
    test_fraction: float = 0.003
    seed: int = 0
    log_every: int = 1000


class EvaluationConfig(_Strict):
    grid_n: int = 41
    reference: Literal["auto", "analytic", "modal"] = "auto"
    modes: Optional[list[int]] = None
    gf: bool = False
    gf_grid_n: int = 20


class OutputsConfig(_Strict):
    directory: str = "runs/default"
    checkpoint_every: int = 0


class RunConfig(_Strict):
    problem: ProblemConfig
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    pretrain: Optional[PretrainSection] = None
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    outputs: OutputsConfig = Field(default_factory=OutputsConfig)

    @model_validator(mode="after")
    def _cross(self):
        if self.training.mode in ("supervised", "discrepancy") and self.pretrain is None:
            raise ValueError(f"pretrain section required for training.mode={self.training.mode}")
        return self

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def problem_obj(self) -> HelmholtzProblem:
        try:
            return self.problem.build()
        except ValueError as exc:
            raise ConfigError(f"problem: {exc}") from exc

    def network_obj(self) -> NetworkSpec:
        try:
            return self.network.build(self.problem.dim)
        except ValueError as exc:
            raise ConfigError(f"network: {exc}") from exc


def _format_errors(exc: ValidationError) -> str:
    msgs = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "missing":
            msgs.append(f"{loc} required")
        elif err["type"] == "extra_forbidden":
            msgs.append(f"{loc}: unknown key")
        else:
            msgs.append(f"{loc}: {err['msg']}" if loc else err["msg"])
    return "; ".join(msgs)


def parse_config(data: dict) -> RunConfig:
    """Validate a key tree.  A run manifest is accepted as well."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if data.get("tool") == "helmpinn" and "config" in data:
        data = data["config"]
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parse_config(data)
