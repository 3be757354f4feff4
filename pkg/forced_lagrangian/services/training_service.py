"""Service for training learned dynamics with Adam and validation-based checkpoint selection"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from ..domain.baselines import BaselineKind, GlnnBaseline, baseline_loss, glnn_accel, midpoint_state
from ..domain.diffcore import ParameterStore, eval_value_and_param_grad
from ..domain.discretization import Scheme, windows
from ..domain.errors import EmptyDatasetError, TrainingAbortedError
from ..domain.mechanics import ForceModel, LagrangianModel, set_training_mode
from ..domain.models import TrajectoryDataset
from ..domain.networks import ShapeList, init_params
from ..domain.objective import (
    LossBatch,
    LossBreakdown,
    LossWeights,
    RegPoint,
    regularity_determinants,
    stack_reg_points,
    total_loss,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings; batch_size None means full batch"""
    lr: float = 1e-3
    epochs: int = 20000
    batch_size: Optional[int] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.1
    log_every: int = 100
    grad_clip: Optional[float] = None

    def __post_init__(self):
        # lr = 0 is accepted so a run can be replayed without moving the parameters
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")


@dataclass(frozen=True)
class DiagnosticEvent:
    epoch: int
    kind: str
    message: str


@dataclass
class TrainReport:
    """Per-epoch loss series, the selected epoch and diagnostics events"""
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    min_abs_det_s: List[float] = field(default_factory=list)
    best_epoch: int = 0
    events: List[DiagnosticEvent] = field(default_factory=list)

    def record_event(self, epoch: int, kind: str, message: str) -> None:
        logger.warning("epoch %d: %s: %s", epoch, kind, message)
        self.events.append(DiagnosticEvent(epoch, kind, message))

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.epochs.index(self.best_epoch)] if self.best_epoch else math.inf

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"epoch": self.epochs, "train_loss": self.train_loss, "val_loss": self.val_loss}
        )

    def diagnostics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": [e.epoch for e in self.events],
                "kind": [e.kind for e in self.events],
                "message": [e.message for e in self.events],
            }
        )

    def regularity_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"epoch": self.epochs, "min_abs_det_s": self.min_abs_det_s})


class AdamOptimizer:
    """torch Adam over the flat parameter leaf, skipping non-finite gradients"""

    def __init__(self, params: ParameterStore, config: TrainConfig):
        if not (params.values.requires_grad and params.values.is_leaf):
            raise ValueError("Adam needs a trainable parameter store (use ParameterStore.trainable())")
        self.params = params
        self.optimizer = torch.optim.Adam([params.values], lr=config.lr, betas=config.betas, eps=config.eps)
        self.skipped = 0

    def step(self, grad: torch.Tensor) -> bool:
        if not torch.isfinite(grad).all():
            self.skipped += 1
            return False
        self.params.values.grad = grad.detach().clone()
        self.optimizer.step()
        self.params.values.grad = None
        return True


def adam_step(optimizer: AdamOptimizer, grad: torch.Tensor) -> bool:
    """Apply one bias-corrected Adam update; returns False when the step was skipped"""
    return optimizer.step(grad)


Diagnosis = Callable[[ParameterStore, Optional[torch.Tensor], LossBreakdown], Tuple[str, str]]


def default_diagnosis(params: ParameterStore, indices: Optional[torch.Tensor], breakdown: LossBreakdown) -> Tuple[str, str]:
    if not torch.isfinite(breakdown.reg):
        return "degenerate_regularity", f"reg {float(breakdown.reg)}"
    return "non_finite_loss", f"physics {float(breakdown.physics)}"


def describe_degenerate_points(points: Sequence[RegPoint], determinants: torch.Tensor, limit: int = 10) -> str:
    """Name the regularization pairs whose |det S| is zero or not finite"""
    bad = [
        point for point, det in zip(points, determinants.tolist()) if not (math.isfinite(det) and det > 0)
    ]
    if not bad:
        return "no single degenerate regularization pair found"
    named = ", ".join(f"(trajectory {p.trajectory}, index {p.index})" for p in bad[:limit])
    more = f" and {len(bad) - limit} more" if len(bad) > limit else ""
    return f"|det S| vanishes at {named}{more}"


@dataclass
class TrainingProblem:
    """
    What `fit` optimizes.

    Attributes:
        train_loss: Loss on a subset of window indices (None = all windows)
        validation_loss: Loss on held-out data, evaluated with dropout off
        window_count: Number of training windows available for batching
        set_training_mode: Toggles dropout in the models
        regularity: Minimum |det S| over the regularization points
        diagnose: Names the kind and cause of a non-finite training loss
    """
    train_loss: Callable[[ParameterStore, Optional[torch.Tensor]], LossBreakdown]
    validation_loss: Callable[[ParameterStore], float]
    window_count: int
    set_training_mode: Callable[[bool], None] = lambda training: None
    regularity: Optional[Callable[[ParameterStore], float]] = None
    diagnose: Diagnosis = default_diagnosis


def _clip(grad: torch.Tensor, max_norm: Optional[float]) -> torch.Tensor:
    if max_norm is None:
        return grad
    norm = float(grad.norm())
    return grad * (max_norm / norm) if norm > max_norm else grad


def fit(problem: TrainingProblem, params: ParameterStore, config: TrainConfig) -> Tuple[ParameterStore, TrainReport]:
    """
    Minimize the problem's training loss and keep the epoch with the lowest validation loss.

    Raises:
        TrainingAbortedError: If an epoch produced no finite training loss
    """
    params = params.trainable()
    optimizer = AdamOptimizer(params, config)
    generator = torch.Generator().manual_seed(config.seed)
    report = TrainReport()
    best_values = params.values.detach().clone()
    best_val = math.inf

    for epoch in range(1, config.epochs + 1):
        problem.set_training_mode(True)
        if config.batch_size is None or config.batch_size >= problem.window_count:
            batches: Sequence[Optional[torch.Tensor]] = [None]
        else:
            batches = torch.randperm(problem.window_count, generator=generator).split(config.batch_size)

        finite_losses = []
        for batch in batches:
            captured = {}

            def objective(p: ParameterStore) -> torch.Tensor:
                captured["breakdown"] = problem.train_loss(p, batch)
                return captured["breakdown"].total

            value, grad = eval_value_and_param_grad(objective, params)
            breakdown: LossBreakdown = captured["breakdown"]
            if not torch.isfinite(value):
                kind, detail = problem.diagnose(params.detached(), batch, breakdown)
                report.record_event(epoch, kind, f"loss {float(value)}, {detail}; step skipped")
                continue
            finite_losses.append(float(value))
            if not adam_step(optimizer, _clip(grad, config.grad_clip)):
                report.record_event(epoch, "non_finite_gradient", "gradient contains NaN or inf; step skipped")

        problem.set_training_mode(False)
        if not finite_losses:
            raise TrainingAbortedError(f"epoch {epoch} produced no finite training loss", report=report)

        train_value = float(np.mean(finite_losses))
        val_value = float(problem.validation_loss(params.detached()))
        det_value = float(problem.regularity(params.detached())) if problem.regularity else math.nan

        report.epochs.append(epoch)
        report.train_loss.append(train_value)
        report.val_loss.append(val_value)
        report.min_abs_det_s.append(det_value)

        if math.isfinite(val_value) and val_value < best_val:
            best_val = val_value
            best_values = params.values.detach().clone()
            report.best_epoch = epoch

        if epoch == 1 or epoch % config.log_every == 0 or epoch == config.epochs:
            logger.info(
                "epoch %d: train %.6e, val %.6e, min |det S| %.3e",
                epoch, train_value, val_value, det_value,
            )

    if report.best_epoch == 0:
        report.record_event(config.epochs, "no_finite_validation", "keeping the final parameters")
        best_values = params.values.detach().clone()
        report.best_epoch = config.epochs
    logger.info("best epoch %d with validation loss %.6e", report.best_epoch, best_val)
    return params.with_values(best_values), report


def split_by_trajectory(
    dataset: TrajectoryDataset,
    fraction: float,
    rng: np.random.Generator,
) -> Tuple[TrajectoryDataset, TrajectoryDataset]:
    """Hold out round(fraction·N_T) whole trajectories (at least one when N_T ≥ 2)"""
    count = len(dataset)
    if count == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    held_out = int(round(fraction * count))
    if fraction > 0 and count >= 2:
        held_out = min(max(held_out, 1), count - 1)
    else:
        held_out = 0
    order = rng.permutation(count)
    validation = sorted(order[:held_out].tolist())
    training = sorted(order[held_out:].tolist())
    return dataset.select(training), dataset.select(validation)


def select_reg_points(dataset: TrajectoryDataset, R: int, rng: np.random.Generator) -> List[RegPoint]:
    """R distinct consecutive pairs drawn uniformly without replacement"""
    pairs = [(t, n) for t, trajectory in enumerate(dataset.trajectories) for n in range(trajectory.steps)]
    if R > len(pairs):
        logger.warning("requested %d regularization pairs but only %d exist; using all", R, len(pairs))
        chosen = list(range(len(pairs)))
    else:
        chosen = rng.choice(len(pairs), size=R, replace=False).tolist() if R > 0 else []
    points = []
    for index in chosen:
        t, n = pairs[index]
        positions = dataset.trajectories[t].positions
        points.append(RegPoint(first=positions[n], second=positions[n + 1], trajectory=t, index=n))
    return points


def model_parameter_shapes(*models) -> ShapeList:
    shapes: ShapeList = []
    for model in models:
        shapes.extend(model.parameter_shapes())
    return shapes


def initial_params(shapes: ShapeList, seed: int) -> ParameterStore:
    return init_params(shapes, np.random.default_rng(seed))


class DflnnTrainingService:
    """
    Service for training a Lagrangian and force model on position-only data.
    Splits by trajectory, fixes the regularization pairs and runs `fit`.
    """

    def __init__(
        self,
        lagrangian: LagrangianModel,
        force: ForceModel,
        weights: LossWeights,
        scheme: Scheme,
    ):
        self.lagrangian = lagrangian
        self.force = force
        self.weights = weights
        self.scheme = scheme

    def build_problem(
        self,
        train_set: TrajectoryDataset,
        validation_set: TrajectoryDataset,
        reg_points: List[RegPoint],
    ) -> TrainingProblem:
        reg_pairs = stack_reg_points(reg_points, train_set.dim)
        train_batch = LossBatch.from_trajectories(train_set.positions(), self.scheme, reg_pairs)
        validation_batch = (
            LossBatch.from_trajectories(validation_set.positions(), self.scheme, reg_pairs)
            if len(validation_set)
            else train_batch
        )
        if train_batch.windows.shape[0] == 0:
            raise EmptyDatasetError(f"trajectories are too short for {self.scheme.window_size}-point windows")

        def train_loss(params: ParameterStore, indices: Optional[torch.Tensor]) -> LossBreakdown:
            batch = train_batch if indices is None else train_batch.subset(indices)
            return total_loss(self.lagrangian, self.force, params, batch, self.weights, self.scheme)

        def validation_loss(params: ParameterStore) -> float:
            return float(
                total_loss(self.lagrangian, self.force, params, validation_batch, self.weights, self.scheme).total
            )

        def regularity(params: ParameterStore) -> float:
            determinants = regularity_determinants(self.lagrangian, params, reg_pairs, self.scheme.h)
            return float(determinants.min()) if determinants.numel() else math.nan

        def diagnose(params: ParameterStore, indices: Optional[torch.Tensor], breakdown: LossBreakdown):
            if torch.isfinite(breakdown.reg):
                return default_diagnosis(params, indices, breakdown)
            determinants = regularity_determinants(self.lagrangian, params, reg_pairs, self.scheme.h)
            return "degenerate_regularity", describe_degenerate_points(reg_points, determinants)

        return TrainingProblem(
            train_loss=train_loss,
            validation_loss=validation_loss,
            window_count=train_batch.windows.shape[0],
            set_training_mode=lambda training: set_training_mode(self.force, training),
            regularity=regularity,
            diagnose=diagnose,
        )

    def train(
        self,
        config: TrainConfig,
        data: TrajectoryDataset,
        params: Optional[ParameterStore] = None,
    ) -> Tuple[ParameterStore, TrainReport]:
        """
        Train on `data`, holding out whole trajectories for validation

        Args:
            config: Optimizer and loop settings
            data: Training trajectories (the validation split is taken from here)
            params: Initial parameters; Glorot-initialized from the seed when omitted

        Returns:
            Parameters of the epoch with the lowest validation loss, and the report
        """
        rng = np.random.default_rng(config.seed)
        train_set, validation_set = split_by_trajectory(data, config.validation_fraction, rng)
        reg_points = select_reg_points(train_set, self.weights.reg_points, rng)
        if params is None:
            params = initial_params(model_parameter_shapes(self.lagrangian, self.force), config.seed)
        logger.info(
            "Training on %d trajectories (%d held out), %d parameters, %d regularization pairs",
            len(train_set), len(validation_set), len(params), len(reg_points),
        )
        problem = self.build_problem(train_set, validation_set, reg_points)
        return fit(problem, params, config)


class BaselineTrainingService:
    """
    Service for training GLNN and NeuralODE baselines on midpoint-state transitions.
    A singular GLNN velocity Hessian turns the affected loss NaN; that step is skipped and reported.
    """

    def __init__(self, kind: BaselineKind, h: float):
        if isinstance(kind, GlnnBaseline) and not kind.nan_on_singular:
            kind = replace(kind, nan_on_singular=True)
        self.kind = kind
        self.h = h

    def _diagnose(self, transitions: torch.Tensor):
        def diagnose(params: ParameterStore, indices: Optional[torch.Tensor], breakdown: LossBreakdown):
            if not isinstance(self.kind, GlnnBaseline):
                return default_diagnosis(params, indices, breakdown)
            selected = transitions if indices is None else transitions[indices]
            states = midpoint_state(selected[:, 0], selected[:, 1], self.h)
            d = self.kind.dim
            with torch.no_grad():
                accel = glnn_accel(
                    self.kind.lagrangian, self.kind.force, params, states[:, :d], states[:, d:], nan_on_singular=True
                )
            singular = ~torch.isfinite(accel).all(-1)
            if not singular.any():
                return "singular_hessian", "velocity Hessian singular inside an RK4 stage"
            first = states[int(torch.nonzero(singular)[0])]
            return "singular_hessian", (
                f"velocity Hessian singular at {int(singular.sum())} of {len(selected)} window(s), "
                f"first at q={first[:d].tolist()}, v={first[d:].tolist()}"
            )

        return diagnose

    def _set_training_mode(self, training: bool) -> None:
        if isinstance(self.kind, GlnnBaseline):
            set_training_mode(self.kind.force, training)

    def train(
        self,
        config: TrainConfig,
        data: TrajectoryDataset,
        params: Optional[ParameterStore] = None,
    ) -> Tuple[ParameterStore, TrainReport]:
        rng = np.random.default_rng(config.seed)
        train_set, validation_set = split_by_trajectory(data, config.validation_fraction, rng)
        train_windows = torch.cat([windows(p, 3) for p in train_set.positions()])
        validation_windows = (
            torch.cat([windows(p, 3) for p in validation_set.positions()]) if len(validation_set) else train_windows
        )
        if train_windows.shape[0] == 0:
            raise EmptyDatasetError("baseline training needs trajectories of at least three points")
        if params is None:
            params = initial_params(self.kind.parameter_shapes(), config.seed)

        def train_loss(p: ParameterStore, indices: Optional[torch.Tensor]) -> LossBreakdown:
            selected = train_windows if indices is None else train_windows[indices]
            value = baseline_loss(self.kind, p, selected, self.h)
            zero = torch.zeros((), dtype=value.dtype)
            return LossBreakdown(total=value, physics=value, reg=zero, ae=zero)

        problem = TrainingProblem(
            train_loss=train_loss,
            validation_loss=lambda p: float(baseline_loss(self.kind, p, validation_windows, self.h)),
            window_count=train_windows.shape[0],
            set_training_mode=self._set_training_mode,
            diagnose=self._diagnose(train_windows),
        )
        logger.info("Training %s baseline on %d windows", self.kind.kind, train_windows.shape[0])
        return fit(problem, params, config)
