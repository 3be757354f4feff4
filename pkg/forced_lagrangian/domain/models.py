"""Domain models for trajectory datasets"""
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffcore import ParameterStore
from .errors import DatasetError, EmptyDatasetError


@dataclass(frozen=True)
class Checkpoint:
    """Model description header plus the flat parameter array"""
    header: Dict[str, Any]
    params: ParameterStore


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled positions q_0..q_N with step size h"""
    h: float
    positions: np.ndarray  # (N+1, d)
    velocities: Optional[np.ndarray] = None  # generator-only, never used for training
    # Predictions may carry NaN rows where a baseline failed
    check_finite: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.ndim != 2:
            raise DatasetError(f"positions must have shape (N+1, d), got {positions.shape}")
        if not self.h > 0:
            raise DatasetError(f"step size must be positive, got {self.h}")
        if self.check_finite and not np.isfinite(positions).all():
            raise DatasetError("trajectory contains non-finite positions")
        object.__setattr__(self, "positions", positions)
        if self.velocities is not None:
            object.__setattr__(self, "velocities", np.asarray(self.velocities, dtype=np.float64))

    @property
    def steps(self) -> int:
        """N, the number of intervals"""
        return self.positions.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.steps + 1)

    def with_positions(self, positions: np.ndarray) -> "Trajectory":
        return replace(self, positions=positions)


@dataclass(frozen=True)
class DatasetManifest:
    """Reproducibility facts of a generated dataset"""
    generator: str
    h: float
    dim: int
    steps: int
    count: int
    sigma: float
    seed: int
    params: Dict[str, Any] = field(default_factory=dict)
    config_hash: str = ""
    data_hash: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "generator": self.generator,
            "h": self.h,
            "dim": self.dim,
            "steps": self.steps,
            "count": self.count,
            "sigma": self.sigma,
            "seed": self.seed,
            "params": self.params,
            "config_hash": self.config_hash,
            "data_hash": self.data_hash,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        return cls(**data)


@dataclass(frozen=True)
class TrajectoryDataset:
    """A named collection of equally spaced trajectories"""
    trajectories: Tuple[Trajectory, ...]
    manifest: DatasetManifest

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if self.trajectories:
            steps = {t.h for t in self.trajectories}
            dims = {t.dim for t in self.trajectories}
            if len(steps) > 1 or len(dims) > 1:
                raise DatasetError("all trajectories of a dataset must share h and dimension")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def h(self) -> float:
        self._require_data()
        return self.trajectories[0].h

    @property
    def dim(self) -> int:
        self._require_data()
        return self.trajectories[0].dim

    def positions(self) -> List[np.ndarray]:
        return [t.positions for t in self.trajectories]

    def stacked(self) -> np.ndarray:
        """(N_T, N+1, d); requires equal trajectory lengths"""
        self._require_data()
        lengths = {t.positions.shape[0] for t in self.trajectories}
        if len(lengths) > 1:
            raise DatasetError(f"trajectories have different lengths {sorted(lengths)}")
        return np.stack(self.positions())

    def select(self, indices: Sequence[int]) -> "TrajectoryDataset":
        chosen = tuple(self.trajectories[i] for i in indices)
        return TrajectoryDataset(chosen, replace(self.manifest, count=len(chosen)))

    def _require_data(self) -> None:
        if not self.trajectories:
            raise EmptyDatasetError("dataset holds no trajectories")
