"""Full-batch Adam training of the PINN loss, supervised pretraining, layer
freezing and convergence-onset detection."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .model import DTYPE, NetworkSpec, ParameterVector, propagate
from .physics import (CollocationData, HelmholtzProblem, LossBreakdown, LossWeights,
                      breakdown_from, weighted_loss)

log = logging.getLogger(__name__)

FREEZE_KINDS = ("none", "all_but_first", "all_but_last")


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf; carries the iteration and the offending term."""

    def __init__(self, iteration: int, term: str, phase: str = "pinn"):
        super().__init__(f"non-finite loss at iteration {iteration} ({phase}): term {term}")
        self.iteration = iteration
        self.term = term
        self.phase = phase


@dataclass(frozen=True)
class FreezePolicy:
    """Which affine layers stay trainable.

    Layers are counted over hidden layers plus the output layer, so for a
    3-hidden-layer network ``all_but_last`` with k=2 trains the last hidden
    layer and the output layer.
    """

    kind: str = "none"
    k: int = 0

    def __post_init__(self):
        if self.kind not in FREEZE_KINDS:
            raise ValueError(f"freeze kind must be one of {FREEZE_KINDS}")
        if self.kind != "none" and self.k < 1:
            raise ValueError("freeze policy needs k >= 1")

    def trainable_layers(self, n_layers: int) -> list[int]:
        if self.kind == "none":
            return list(range(n_layers))
        if self.k > n_layers:
            raise ValueError(f"cannot keep {self.k} of {n_layers} layers trainable")
        if self.kind == "all_but_first":
            return list(range(self.k))
        return list(range(n_layers - self.k, n_layers))

    def apply(self, params: ParameterVector) -> ParameterVector:
        layers = self.trainable_layers(len(params.layout))
        return params.with_mask(params.layer_mask(layers))


@dataclass
class TrainConfig:
    iterations: int = 20000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 100
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    freeze_policy: FreezePolicy = field(default_factory=FreezePolicy)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass
class PretrainConfig:
    iterations: int = 50000
    learning_rate: float = 1e-3
    data: object = None  # FieldOnPoints
    train_fraction: float = 0.007
    test_fraction: float = 0.003
    seed: int = 0
    log_every: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.train_fraction <= 1 and 0 <= self.test_fraction <= 1):
            raise ValueError("train/test fractions must lie in (0, 1]")
        if self.train_fraction + self.test_fraction > 1 + 1e-12:
            raise ValueError("train_fraction + test_fraction must not exceed 1")


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=DTYPE), 0)


def adam_step(params: ParameterVector, grad: torch.Tensor, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update of the trainable entries.

    ``grad`` and the state moments are over trainable entries only.  Returns
    new (params, state); frozen entries are copied bit for bit.
    """
    grad = torch.as_tensor(grad, dtype=DTYPE)
    n = params.n_trainable
    if grad.shape != (n,) or state.m.shape != (n,):
        raise ValueError(f"gradient/state length must equal the {n} trainable entries")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    values = params.values.detach().clone()
    values[params.trainable_mask] -= lr * m_hat / (torch.sqrt(v_hat) + eps)
    return ParameterVector(values, params.layout, params.trainable_mask), AdamState(m, v, t)


class _Adam:
    """In-place variant of :func:`adam_step` for the hot loop."""

    def __init__(self, n: int, lr: float, b1: float, b2: float, eps: float):
        self.m = torch.zeros(n, dtype=DTYPE)
        self.v = torch.zeros(n, dtype=DTYPE)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def update(self, theta: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
        self.t += 1
        self.m.mul_(self.b1).add_(grad, alpha=1.0 - self.b1)
        self.v.mul_(self.b2).addcmul_(grad, grad, value=1.0 - self.b2)
        denom = (self.v / (1.0 - self.b2 ** self.t)).sqrt_().add_(self.eps)
        return theta - (self.lr / (1.0 - self.b1 ** self.t)) * self.m / denom


@dataclass
class ErrorPoint:
    iteration: int
    e_rel_ref: float
    e_rel_gf: float | None = None


@dataclass
class PretrainRecord:
    params: ParameterVector
    mse_history: list[tuple[int, float, float]]  # (iteration, train mse, test mse)
    train_mse: float
    test_mse: float
    wall_time_s: float
    error_history: list[ErrorPoint] = field(default_factory=list)


@dataclass
class TrainingRecord:
    loss_history: list[tuple[int, LossBreakdown]]
    final_params: ParameterVector
    onset_iteration: int | None
    wall_time_s: float
    error_history: list[ErrorPoint] = field(default_factory=list)
    pretrain: PretrainRecord | None = None
    initial_params: ParameterVector | None = None

    @property
    def final_loss(self) -> LossBreakdown:
        return self.loss_history[-1][1]

    def totals(self) -> np.ndarray:
        return np.array([b.total for _, b in self.loss_history])


# evaluation callback: params -> (e_rel_ref, e_rel_gf or None)
Evaluator = Callable[[ParameterVector], tuple[float, float | None]]


def _nonfinite_term(total, terms) -> str:
    names = ("pde_r", "pde_i", "bc_r", "bc_i")
    for name, v in zip(names, terms[0]):
        if not math.isfinite(float(v.detach() if isinstance(v, torch.Tensor) else v)):
            return name
    return "total"


def train_pinn(spec: NetworkSpec, problem: HelmholtzProblem, samples, config: TrainConfig,
               init_params: ParameterVector, evaluator: Evaluator | None = None,
               data: CollocationData | None = None,
               checkpoint: Callable[[int, ParameterVector], None] | None = None,
               checkpoint_every: int = 0) -> TrainingRecord:
    """Minimise the weighted PINN loss with full-batch Adam.

    The loss breakdown is logged every ``log_every`` steps and at the end;
    ``evaluator`` (if given) is called at the same cadence.  ``checkpoint``
    receives the parameters every ``checkpoint_every`` iterations.
    """
    data = data if data is not None else CollocationData.build(problem, samples)
    params = init_params
    if config.freeze_policy.kind != "none":
        params = config.freeze_policy.apply(init_params)
    mask = params.trainable_mask
    theta = params.values.detach().clone()
    opt = _Adam(int(mask.sum()), config.learning_rate, config.adam_beta1, config.adam_beta2,
                config.adam_eps)
    w = config.loss_weights
    history, errors = [], []
    t0 = time.perf_counter()

    def record(it, total, terms, th):
        history.append((it, breakdown_from(total, terms)))
        if evaluator is not None:
            e_ref, e_gf = evaluator(ParameterVector(th.detach().clone(), params.layout, mask))
            errors.append(ErrorPoint(it, e_ref, e_gf))

    for it in range(config.iterations + 1):
        last = it == config.iterations
        th = theta.requires_grad_(not last)
        total, terms = weighted_loss(th, spec, data, w)
        if not torch.isfinite(total):
            raise TrainingDiverged(it, _nonfinite_term(total, terms))
        if it % config.log_every == 0 or last:
            record(it, total, terms, th)
        if checkpoint is not None and checkpoint_every > 0 and it % checkpoint_every == 0:
            checkpoint(it, ParameterVector(th.detach().clone(), params.layout, mask))
        if last:
            break
        (grad,) = torch.autograd.grad(total, th)
        with torch.no_grad():
            new = theta.detach().clone()
            new[mask] = opt.update(new[mask], grad[mask])
            theta = new

    final = ParameterVector(theta.detach().clone(), params.layout, mask.clone())
    onset = detect_onset(history) if len(history) >= 2 else None
    return TrainingRecord(history, final, onset, time.perf_counter() - t0, errors,
                          initial_params=params)


def split_indices(n: int, train_fraction: float, test_fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_train = max(1, int(round(train_fraction * n)))
    n_test = int(round(test_fraction * n))
    n_test = min(n_test, n - n_train)
    return perm[:n_train], perm[n_train:n_train + n_test]


def pretrain_supervised(spec: NetworkSpec, cfg: PretrainConfig, init_params: ParameterVector | None = None,
                        evaluator: Evaluator | None = None) -> PretrainRecord:
    """Fit the network to (p_r, p_i) data by mean squared error with Adam."""
    from .model import init_glorot

    data = cfg.data
    if data is None or len(data) == 0:
        raise ValueError("pretraining needs a nonempty data set")
    params = init_params if init_params is not None else init_glorot(spec)
    tr, te = split_indices(len(data), cfg.train_fraction, cfg.test_fraction, cfg.seed)
    x_tr = torch.as_tensor(data.points[tr], dtype=DTYPE)
    y_tr = torch.as_tensor(np.stack([data.p_r[tr], data.p_i[tr]], axis=1), dtype=DTYPE)
    x_te = torch.as_tensor(data.points[te], dtype=DTYPE)
    y_te = torch.as_tensor(np.stack([data.p_r[te], data.p_i[te]], axis=1), dtype=DTYPE)

    mask = params.trainable_mask
    theta = params.values.detach().clone()
    opt = _Adam(int(mask.sum()), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history, errors = [], []
    t0 = time.perf_counter()

    def test_mse(th):
        if len(te) == 0:
            return float("nan")
        with torch.no_grad():
            out, _, _ = propagate(th, spec, x_te, 0)
            return float(((out - y_te) ** 2).mean())

    mse = float("nan")
    for it in range(cfg.iterations + 1):
        last = it == cfg.iterations
        th = theta.requires_grad_(not last)
        out, _, _ = propagate(th, spec, x_tr, 0)
        loss = ((out - y_tr) ** 2).mean()
        mse = float(loss.detach())
        if not math.isfinite(mse):
            raise TrainingDiverged(it, "mse", phase="pretrain")
        if it % cfg.log_every == 0 or last:
            history.append((it, mse, test_mse(th.detach())))
            if evaluator is not None:
                e_ref, e_gf = evaluator(ParameterVector(th.detach().clone(), params.layout, mask))
                errors.append(ErrorPoint(it, e_ref, e_gf))
        if last:
            break
        (grad,) = torch.autograd.grad(loss, th)
        with torch.no_grad():
            new = theta.detach().clone()
            new[mask] = opt.update(new[mask], grad[mask])
            theta = new

    final = ParameterVector(theta.detach().clone(), params.layout, mask.clone())
    return PretrainRecord(final, history, mse, test_mse(final.values), time.perf_counter() - t0, errors)


def run_discrepancy(spec: NetworkSpec, problem: HelmholtzProblem, samples, pre_cfg: PretrainConfig,
                    pinn_cfg: TrainConfig, evaluator: Evaluator | None = None,
                    init_params: ParameterVector | None = None) -> TrainingRecord:
    """Supervised pretraining, then the freeze policy, then PINN training."""
    pre = pretrain_supervised(spec, pre_cfg, init_params, evaluator)
    start = pre.params.with_mask(torch.ones(len(pre.params), dtype=torch.bool))
    rec = train_pinn(spec, problem, samples, pinn_cfg, start, evaluator)
    rec.pretrain = pre
    return rec


def windowed_medians(values, window: int = 5) -> np.ndarray:
    """Centred running median; the window is truncated at both ends."""
    v = np.asarray(values, dtype=float)
    h = window // 2
    return np.array([np.median(v[max(0, i - h): i + h + 1]) for i in range(len(v))])


def detect_onset(loss_history, window: int = 5, drop: float = 0.01) -> int | None:
    """First logged iteration whose windowed median total loss is below
    ``drop`` times the median of the first window; None if it never is."""
    if len(loss_history) < 2:
        raise ValueError("onset detection needs at least two logged points")
    its = [it for it, _ in loss_history]
    totals = [b.total if isinstance(b, LossBreakdown) else float(b) for _, b in loss_history]
    med = windowed_medians(totals, window)
    initial = float(np.median(totals[:window]))
    for it, m in zip(its, med):
        if m < drop * initial:
            return int(it)
    return None
