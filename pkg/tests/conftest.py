"""Pytest configuration and fixtures"""
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import pytest
import torch

from forced_lagrangian.domain.diffcore import ParameterStore
from forced_lagrangian.domain.errors import DatasetError
from forced_lagrangian.domain.mechanics import AnalyticForce, AnalyticLagrangian, ZeroForce
from forced_lagrangian.domain.models import Checkpoint, DatasetManifest, Trajectory, TrajectoryDataset
from forced_lagrangian.domain.systems import OscillatorParams, generate_oscillator
from forced_lagrangian.ports.repositories import ArtifactRepository, CheckpointRepository, DatasetRepository


class MockDatasetRepository(DatasetRepository):
    """In-memory implementation for testing"""

    def __init__(self):
        self.datasets: Dict[str, TrajectoryDataset] = {}

    def save_dataset(self, split: str, dataset: TrajectoryDataset) -> None:
        self.datasets[split] = dataset

    def load_dataset(self, split: str) -> TrajectoryDataset:
        if split not in self.datasets:
            raise DatasetError(f"no dataset '{split}'")
        return self.datasets[split]

    def has_dataset(self, split: str) -> bool:
        return split in self.datasets


class MockCheckpointRepository(CheckpointRepository):
    """In-memory implementation for testing"""

    def __init__(self):
        self.checkpoints: Dict[str, Checkpoint] = {}

    def save_checkpoint(self, name: str, checkpoint: Checkpoint) -> None:
        self.checkpoints[name] = checkpoint

    def load_checkpoint(self, name: str) -> Checkpoint:
        if name not in self.checkpoints:
            raise DatasetError(f"no checkpoint '{name}'")
        return self.checkpoints[name]


class MockArtifactRepository(ArtifactRepository):
    """In-memory implementation for testing"""

    def __init__(self):
        self.rollouts: Dict[str, List[Trajectory]] = {}
        self.newton_stats: Dict[str, Optional[List[pd.DataFrame]]] = {}
        self.tables: Dict[str, pd.DataFrame] = {}
        self.manifest: Optional[Dict[str, Any]] = None

    def save_rollouts(self, name, trajectories, newton_stats=None) -> None:
        self.rollouts[name] = list(trajectories)
        self.newton_stats[name] = newton_stats

    def load_rollouts(self, name: str) -> List[Trajectory]:
        if name not in self.rollouts:
            raise DatasetError(f"no rollouts '{name}'")
        return self.rollouts[name]

    def save_table(self, name: str, frame: pd.DataFrame) -> None:
        self.tables[name] = frame.copy()

    def load_table(self, name: str) -> pd.DataFrame:
        return self.tables[name]

    def save_manifest(self, manifest: Dict[str, Any]) -> None:
        self.manifest = dict(manifest)

    def load_manifest(self) -> Optional[Dict[str, Any]]:
        return None if self.manifest is None else dict(self.manifest)


def harmonic(q, v):
    return 0.5 * (v ** 2).sum(-1) - 0.5 * (q ** 2).sum(-1)


def free_particle(q, v):
    return 0.5 * (v ** 2).sum(-1)


def pendulum(q, v):
    return 0.5 * (v ** 2).sum(-1) + torch.cos(q).sum(-1)


@pytest.fixture
def harmonic_lagrangian():
    """L = ½v² − ½q² in one dimension"""
    return AnalyticLagrangian(1, harmonic, "harmonic")


@pytest.fixture
def free_lagrangian():
    """L = ½v² in one dimension"""
    return AnalyticLagrangian(1, free_particle, "free_particle")


@pytest.fixture
def pendulum_lagrangian():
    """L = ½v² + cos q"""
    return AnalyticLagrangian(1, pendulum, "pendulum")


@pytest.fixture
def zero_force():
    return ZeroForce(1)


@pytest.fixture
def linear_damping():
    """F = −0.1 v"""
    return AnalyticForce(1, lambda q, v: -0.1 * v, "linear_damping")


@pytest.fixture
def empty_params():
    return ParameterStore.empty()


def make_dataset(trajectories: List[Trajectory], generator: str = "oscillator") -> TrajectoryDataset:
    first = trajectories[0]
    manifest = DatasetManifest(
        generator=generator,
        h=first.h,
        dim=first.dim,
        steps=first.steps,
        count=len(trajectories),
        sigma=0.0,
        seed=0,
    )
    return TrajectoryDataset(tuple(trajectories), manifest)


@pytest.fixture
def oscillator_dataset():
    """Eight clean damped-oscillator trajectories of 20 steps at h = 0.1"""
    trajectories = generate_oscillator(8, 20, 0.1, OscillatorParams(omega=1.0, gamma=0.1), rng=0, substeps=20)
    return make_dataset(trajectories)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
