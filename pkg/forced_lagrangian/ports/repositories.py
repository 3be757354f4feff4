"""Repository interfaces (ports) for datasets, checkpoints and experiment artifacts"""
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional

import pandas as pd

from ..domain.models import Checkpoint, Trajectory, TrajectoryDataset


class DatasetRepository(ABC):
    """Interface for storing and loading trajectory datasets"""

    @abstractmethod
    def save_dataset(self, split: str, dataset: TrajectoryDataset) -> None:
        """
        Persist every trajectory of a dataset split with its manifest

        Args:
            split: Dataset split name, e.g. "train" or "test"
            dataset: Trajectories and manifest to store
        """
        pass

    @abstractmethod
    def load_dataset(self, split: str) -> TrajectoryDataset:
        """
        Load a previously stored dataset split

        Args:
            split: Dataset split name

        Returns:
            The dataset with its manifest
        """
        pass

    @abstractmethod
    def has_dataset(self, split: str) -> bool:
        pass


class CheckpointRepository(ABC):
    """Interface for model checkpoints"""

    @abstractmethod
    def save_checkpoint(self, name: str, checkpoint: Checkpoint) -> None:
        pass

    @abstractmethod
    def load_checkpoint(self, name: str) -> Checkpoint:
        """
        Load a checkpoint by model name

        Args:
            name: Model name the checkpoint was saved under

        Returns:
            Header and parameters, bit-identical to what was saved
        """
        pass


class ArtifactRepository(ABC):
    """Interface for rollouts, tables and the experiment manifest"""

    @abstractmethod
    def save_rollouts(
        self,
        name: str,
        trajectories: List[Trajectory],
        newton_stats: Optional[List[pd.DataFrame]] = None,
    ) -> None:
        """
        Persist predicted trajectories, optionally with per-step Newton statistics

        Args:
            name: Rollout set name, e.g. "dflnn/force_on"
            trajectories: Predicted trajectories in test-set order
            newton_stats: One sidecar table per trajectory
        """
        pass

    @abstractmethod
    def load_rollouts(self, name: str) -> List[Trajectory]:
        pass

    @abstractmethod
    def save_table(self, name: str, frame: pd.DataFrame) -> None:
        pass

    @abstractmethod
    def load_table(self, name: str) -> pd.DataFrame:
        pass

    @abstractmethod
    def save_manifest(self, manifest: Dict[str, Any]) -> None:
        pass

    @abstractmethod
    def load_manifest(self) -> Optional[Dict[str, Any]]:
        """
        Load the experiment manifest

        Returns:
            The manifest, or None when no artifacts were written yet
        """
        pass
