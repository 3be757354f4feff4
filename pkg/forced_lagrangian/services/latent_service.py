"""Joint autoencoder and latent-dynamics training, reconstruction gate and decoded rollouts"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from ..domain.diffcore import ParameterStore, as_tensor
from ..domain.discretization import Scheme, windows
from ..domain.errors import DimensionMismatchError, EmptyDatasetError, ReconstructionGateError
from ..domain.mechanics import ForceModel, LagrangianModel, set_training_mode
from ..domain.models import TrajectoryDataset
from ..domain.networks import Autoencoder
from ..domain.objective import (
    LossBreakdown,
    LossWeights,
    physics_loss,
    reconstruction_loss,
    reg_loss,
    regularity_determinants,
    stack_reg_points,
)
from ..domain.rollout import NewtonConfig, RolloutResult, rollout
from .training_service import (
    TrainConfig,
    TrainingProblem,
    TrainReport,
    default_diagnosis,
    describe_degenerate_points,
    fit,
    initial_params,
    model_parameter_shapes,
    select_reg_points,
    split_by_trajectory,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatentPipeline:
    """Autoencoder plus a Lagrangian and force acting on its latent coordinates"""
    autoencoder: Autoencoder
    lagrangian: LagrangianModel
    force: ForceModel
    weights: LossWeights

    def __post_init__(self):
        latent_dim = self.autoencoder.spec.latent_dim
        if self.lagrangian.dim != latent_dim or self.force.dim != latent_dim:
            raise DimensionMismatchError(
                f"latent dynamics dimension ({self.lagrangian.dim}, {self.force.dim}) "
                f"must equal the latent dimension {latent_dim}"
            )

    @property
    def data_dim(self) -> int:
        return self.autoencoder.spec.data_dim

    @property
    def latent_dim(self) -> int:
        return self.autoencoder.spec.latent_dim

    def parameter_shapes(self):
        return model_parameter_shapes(self.autoencoder, self.lagrangian, self.force)

    def encode(self, params: ParameterStore, frames) -> torch.Tensor:
        frames = as_tensor(frames)
        if frames.shape[-1] != self.data_dim:
            raise DimensionMismatchError(f"frames have {frames.shape[-1]} values, expected {self.data_dim}")
        return self.autoencoder.encode(params, frames)

    def decode(self, params: ParameterStore, latents) -> torch.Tensor:
        return self.autoencoder.decode(params, as_tensor(latents))


@dataclass(frozen=True)
class LatentBatch:
    """Frame windows, every frame for the reconstruction term and raw regularization pairs"""
    windows: torch.Tensor  # (W, size, d)
    frames: torch.Tensor  # (M, d)
    reg_pairs: torch.Tensor  # (R, 2, d)

    @classmethod
    def from_trajectories(
        cls,
        trajectories: Sequence[np.ndarray],
        scheme: Scheme,
        reg_pairs: torch.Tensor,
    ) -> "LatentBatch":
        if not trajectories:
            raise EmptyDatasetError("no frame trajectories to build a latent loss from")
        return cls(
            windows=torch.cat([windows(frames, scheme.window_size) for frames in trajectories]),
            frames=torch.cat([as_tensor(frames) for frames in trajectories]),
            reg_pairs=reg_pairs,
        )

    def subset(self, indices: torch.Tensor) -> "LatentBatch":
        """Sampled windows; the reconstruction term then covers the frames of those windows"""
        selected = self.windows[indices]
        return LatentBatch(selected, selected.reshape(-1, selected.shape[-1]), self.reg_pairs)


def latent_total_loss(
    pipeline: LatentPipeline,
    params: ParameterStore,
    batch: LatentBatch,
    scheme: Scheme,
) -> LossBreakdown:
    """
    Physics on encoded windows, regularity on encoded pairs and the (d/l)-scaled reconstruction term.

    Each term is averaged over its own items: windows (N_T(N-1) for the midpoint
    scheme), regularization pairs and frames (N_T(N+1)).
    """
    if batch.frames.shape[-1] != pipeline.data_dim:
        raise DimensionMismatchError(
            f"frames have {batch.frames.shape[-1]} values, pipeline expects {pipeline.data_dim}"
        )
    weights = pipeline.weights
    zero = torch.zeros((), dtype=batch.frames.dtype)

    physics = zero
    if batch.windows.shape[0] > 0 and weights.physics > 0:
        latent_windows = pipeline.encode(params, batch.windows)
        per_window = physics_loss(
            pipeline.lagrangian, pipeline.force, params, latent_windows, scheme, weights.squared_residual
        )
        physics = per_window.mean()

    reg = zero
    if batch.reg_pairs.shape[0] > 0 and weights.reg > 0:
        latent_pairs = pipeline.encode(params, batch.reg_pairs)
        reg = reg_loss(pipeline.lagrangian, params, latent_pairs[:, 0], latent_pairs[:, 1], scheme.h).mean()

    ae = zero
    if batch.frames.shape[0] > 0:
        reconstruction = pipeline.autoencoder.reconstruct(params, batch.frames)
        ae = reconstruction_loss(batch.frames, reconstruction, pipeline.latent_dim).mean()

    total = weights.physics * physics + weights.ae * ae
    if weights.reg > 0:
        total = total + weights.reg * reg
    return LossBreakdown(total=total, physics=physics, reg=reg, ae=ae)


def reconstruction_mse(pipeline: LatentPipeline, params: ParameterStore, frames) -> float:
    """Per-pixel mean squared reconstruction error"""
    frames = as_tensor(frames)
    with torch.no_grad():
        reconstruction = pipeline.autoencoder.reconstruct(params.detached(), frames)
    return float(((frames - reconstruction) ** 2).mean())


def reconstruction_gate(pipeline: LatentPipeline, params: ParameterStore, frames, target: float) -> float:
    """
    Check the autoencoder before any latent rollout is evaluated

    Raises:
        ReconstructionGateError: If the per-pixel MSE exceeds `target`
    """
    mse = reconstruction_mse(pipeline, params, frames)
    if not mse <= target:
        raise ReconstructionGateError(f"autoencoder reconstruction MSE {mse:.3e} exceeds target {target:.3e}")
    logger.info("Reconstruction gate passed: per-pixel MSE %.3e <= %.3e", mse, target)
    return mse


def latent_rollout(
    pipeline: LatentPipeline,
    params: ParameterStore,
    frame0,
    frame1,
    N: int,
    scheme: Scheme,
    force_on: bool = True,
    cfg: Optional[NewtonConfig] = None,
) -> Tuple[np.ndarray, RolloutResult]:
    """
    Encode the two seed frames, roll out in latent space and decode every step

    Returns:
        Decoded frames of shape (N+1, d) (or (B, N+1, d)) and the latent rollout
    """
    params = params.detached()
    with torch.no_grad():
        z0 = pipeline.encode(params, frame0)
        z1 = pipeline.encode(params, frame1)
    latent = rollout(pipeline.lagrangian, pipeline.force, params, z0, z1, N, scheme, force_on, cfg)
    with torch.no_grad():
        decoded = pipeline.decode(params, torch.from_numpy(latent.positions))
    return decoded.numpy(), latent


class LatentTrainingService:
    """
    Service for jointly training the autoencoder and latent dynamics on frame trajectories.
    Regularization pairs are raw consecutive frames, encoded inside every loss evaluation.
    """

    def __init__(self, pipeline: LatentPipeline, scheme: Scheme):
        self.pipeline = pipeline
        self.scheme = scheme

    def train(
        self,
        config: TrainConfig,
        data: TrajectoryDataset,
        params: Optional[ParameterStore] = None,
    ) -> Tuple[ParameterStore, TrainReport]:
        """
        Train on frame trajectories, holding out whole trajectories for validation

        Args:
            config: Optimizer and loop settings
            data: Flattened frame trajectories of dimension data_dim
            params: Initial parameters; Glorot-initialized from the seed when omitted

        Returns:
            Parameters of the epoch with the lowest validation loss, and the report
        """
        if data.dim != self.pipeline.data_dim:
            raise DimensionMismatchError(f"dataset dimension {data.dim} != autoencoder input {self.pipeline.data_dim}")
        rng = np.random.default_rng(config.seed)
        train_set, validation_set = split_by_trajectory(data, config.validation_fraction, rng)
        reg_points = select_reg_points(train_set, self.pipeline.weights.reg_points, rng)
        reg_pairs = stack_reg_points(reg_points, train_set.dim)
        train_batch = LatentBatch.from_trajectories(train_set.positions(), self.scheme, reg_pairs)
        validation_batch = (
            LatentBatch.from_trajectories(validation_set.positions(), self.scheme, reg_pairs)
            if len(validation_set)
            else train_batch
        )
        if params is None:
            params = initial_params(self.pipeline.parameter_shapes(), config.seed)

        def train_loss(p: ParameterStore, indices: Optional[torch.Tensor]) -> LossBreakdown:
            batch = train_batch if indices is None else train_batch.subset(indices)
            return latent_total_loss(self.pipeline, p, batch, self.scheme)

        def regularity(p: ParameterStore) -> float:
            if reg_pairs.shape[0] == 0:
                return math.nan
            with torch.no_grad():
                latent = self.pipeline.encode(p, reg_pairs)
            return float(regularity_determinants(self.pipeline.lagrangian, p, latent, self.scheme.h).min())

        def diagnose(p: ParameterStore, indices: Optional[torch.Tensor], breakdown: LossBreakdown):
            if torch.isfinite(breakdown.reg):
                return default_diagnosis(p, indices, breakdown)
            with torch.no_grad():
                latent = self.pipeline.encode(p, reg_pairs)
            determinants = regularity_determinants(self.pipeline.lagrangian, p, latent, self.scheme.h)
            return "degenerate_regularity", describe_degenerate_points(reg_points, determinants)

        problem = TrainingProblem(
            train_loss=train_loss,
            validation_loss=lambda p: float(latent_total_loss(self.pipeline, p, validation_batch, self.scheme).total),
            window_count=train_batch.windows.shape[0],
            set_training_mode=lambda training: set_training_mode(self.pipeline.force, training),
            regularity=regularity,
            diagnose=diagnose,
        )
        logger.info(
            "Joint training on %d frame trajectories (%d held out), latent dimension %d",
            len(train_set), len(validation_set), self.pipeline.latent_dim,
        )
        return fit(problem, params, config)
