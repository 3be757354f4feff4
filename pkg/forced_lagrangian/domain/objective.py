"""Loss terms: physics residual, regularity barrier, reconstruction and their weighted total"""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .diffcore import DTYPE, ParameterStore, as_tensor, eval_input_hessian
from .discretization import Scheme, del_residual, midpoint_pair, windows
from .errors import DimensionMismatchError, EmptyDatasetError
from .mechanics import ForceModel, LagrangianModel
from .networks import Autoencoder

NORM_SMOOTHING = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the loss terms and the number R of regularization pairs"""
    physics: float = 0.5
    reg: float = 0.5
    ae: float = 0.0
    reg_points: int = 100
    squared_residual: bool = False

    def __post_init__(self):
        if min(self.physics, self.reg, self.ae) < 0 or self.reg_points < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")

    @classmethod
    def for_task(cls, task: str) -> "LossWeights":
        if task == "pixel":
            return cls(physics=0.9, reg=0.1, ae=1.0, reg_points=20)
        return cls()


@dataclass(frozen=True)
class RegPoint:
    """Consecutive training positions (q_r, q_{r+1}) where regularity is enforced"""
    first: np.ndarray
    second: np.ndarray
    trajectory: int = -1
    index: int = -1


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted total plus the unweighted, normalized terms it is built from"""
    total: torch.Tensor
    physics: torch.Tensor
    reg: torch.Tensor
    ae: torch.Tensor

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total))


def stack_reg_points(points: Sequence[RegPoint], dim: int) -> torch.Tensor:
    """(R, 2, d) tensor of regularization pairs"""
    if not points:
        return torch.zeros(0, 2, dim, dtype=DTYPE)
    return torch.from_numpy(np.stack([np.stack([p.first, p.second]) for p in points]).astype(np.float64))


def residual_norm_loss(residual: torch.Tensor, h: float, squared: bool = False) -> torch.Tensor:
    """(h/2)·sqrt(‖r‖² + 1e-12) per row, or its square for the squared ablation"""
    smoothed = (h / 2) * torch.sqrt((residual ** 2).sum(-1) + NORM_SMOOTHING)
    return smoothed ** 2 if squared else smoothed


def physics_loss(
    L: LagrangianModel,
    F: ForceModel,
    params: ParameterStore,
    window,
    scheme: Scheme,
    squared: bool = False,
) -> torch.Tensor:
    """Physics term of each window, shape (...,)"""
    return residual_norm_loss(del_residual(L, F, params, window, scheme), scheme.h, squared)


def regularity_hessian(L: LagrangianModel, params: ParameterStore, first, second, h: float) -> torch.Tensor:
    """S = ∂²L/∂v̄² at the midpoint pair of each (first, second), shape (..., d, d)"""
    q, v = midpoint_pair(first, second, h)
    x = torch.cat([q, v], dim=-1)
    d = L.dim
    return eval_input_hessian(L.as_function(), params, x, wrt=range(d, 2 * d))


def reg_loss(L: LagrangianModel, params: ParameterStore, first, second, h: float) -> torch.Tensor:
    """
    Log-barrier |log|det S|| on the velocity Hessian.

    A singular S yields +inf; callers treat that as a diagnostics event.
    """
    _, logabsdet = torch.linalg.slogdet(regularity_hessian(L, params, first, second, h))
    return logabsdet.abs()


def regularity_determinants(L: LagrangianModel, params: ParameterStore, pairs: torch.Tensor, h: float) -> torch.Tensor:
    """|det S| at each of the (R, 2, d) pairs, without keeping a graph"""
    if pairs.shape[0] == 0:
        return pairs.new_zeros(0)
    S = regularity_hessian(L, params.detached(), pairs[:, 0, :], pairs[:, 1, :], h)
    return torch.linalg.det(S.detach()).abs()


def reconstruction_loss(q: torch.Tensor, reconstruction: torch.Tensor, latent_dim: int) -> torch.Tensor:
    """(d/l)·‖q − reconstruction‖² per row"""
    if q.shape != reconstruction.shape:
        raise DimensionMismatchError(f"reconstruction shape {tuple(reconstruction.shape)} != {tuple(q.shape)}")
    return (q.shape[-1] / latent_dim) * ((q - reconstruction) ** 2).sum(-1)


def ae_loss(autoencoder: Autoencoder, params: ParameterStore, q) -> torch.Tensor:
    q = as_tensor(q)
    if q.shape[-1] != autoencoder.spec.data_dim:
        raise DimensionMismatchError(
            f"autoencoder expects data dimension {autoencoder.spec.data_dim}, got {q.shape[-1]}"
        )
    return reconstruction_loss(q, autoencoder.reconstruct(params, q), autoencoder.spec.latent_dim)


@dataclass(frozen=True)
class LossBatch:
    """
    Windows and regularization pairs feeding one loss evaluation.

    `physics_normalizer` divides the summed physics term; for full-batch
    training it is N_T(N+1) summed over trajectories. `window_scale`
    rescales a sampled mini-batch to the full window count.
    """
    windows: torch.Tensor
    reg_pairs: torch.Tensor
    physics_normalizer: float
    window_scale: float = 1.0

    @classmethod
    def from_trajectories(
        cls,
        trajectories: Sequence[np.ndarray],
        scheme: Scheme,
        reg_pairs: Optional[torch.Tensor] = None,
    ) -> "LossBatch":
        if not trajectories:
            raise EmptyDatasetError("no trajectories to build a loss from")
        dim = trajectories[0].shape[-1]
        collected = [windows(positions, scheme.window_size) for positions in trajectories]
        normalizer = float(sum(len(positions) for positions in trajectories))
        return cls(
            windows=torch.cat(collected) if collected else torch.zeros(0, scheme.window_size, dim, dtype=DTYPE),
            reg_pairs=reg_pairs if reg_pairs is not None else torch.zeros(0, 2, dim, dtype=DTYPE),
            physics_normalizer=normalizer,
        )

    def subset(self, indices: torch.Tensor) -> "LossBatch":
        scale = self.windows.shape[0] / max(len(indices), 1)
        return LossBatch(self.windows[indices], self.reg_pairs, self.physics_normalizer, scale)


def total_loss(
    L: LagrangianModel,
    F: ForceModel,
    params: ParameterStore,
    batch: LossBatch,
    weights: LossWeights,
    scheme: Scheme,
) -> LossBreakdown:
    """
    ω_physics/(N_T(N+1)) Σ physics + ω_reg/R Σ reg.

    Raises:
        EmptyDatasetError: If there are no windows and no regularization pairs
    """
    if batch.windows.shape[0] == 0 and batch.reg_pairs.shape[0] == 0:
        raise EmptyDatasetError("loss requested over no windows and no regularization pairs")

    zero = torch.zeros((), dtype=DTYPE)
    physics = zero
    if batch.windows.shape[0] > 0:
        per_window = physics_loss(L, F, params, batch.windows, scheme, weights.squared_residual)
        physics = batch.window_scale * per_window.sum() / batch.physics_normalizer

    reg = zero
    if batch.reg_pairs.shape[0] > 0:
        per_point = reg_loss(L, params, batch.reg_pairs[:, 0, :], batch.reg_pairs[:, 1, :], scheme.h)
        reg = per_point.mean()

    total = weights.physics * physics
    if weights.reg > 0:
        total = total + weights.reg * reg
    return LossBreakdown(total=total, physics=physics, reg=reg, ae=zero)
