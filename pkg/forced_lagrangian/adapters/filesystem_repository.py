"""Filesystem adapter implementations: pandas CSV for tables, JSON for headers"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from ..domain.diffcore import ParameterSlice, ParameterStore
from ..domain.errors import DatasetError
from ..domain.models import Checkpoint, DatasetManifest, Trajectory, TrajectoryDataset
from ..ports.repositories import ArtifactRepository, CheckpointRepository, DatasetRepository

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
MANIFEST_FILE = "manifest.json"


def trajectory_frame(trajectory: Trajectory) -> pd.DataFrame:
    """Columns t, q0, ..., q{d-1}"""
    frame = pd.DataFrame(trajectory.positions, columns=[f"q{i}" for i in range(trajectory.dim)])
    frame.insert(0, "t", trajectory.times)
    return frame


def write_trajectory_csv(path: Path, trajectory: Trajectory) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectory_frame(trajectory).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_trajectory_csv(path: Path, h: Optional[float] = None, check_finite: bool = True) -> Trajectory:
    """
    Read a trajectory CSV

    Args:
        path: CSV file with a `t` column followed by position columns
        h: Step size; inferred from the time column when omitted
        check_finite: Reject NaN or infinite positions

    Returns:
        The trajectory, positions parsed with round-trip precision
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    if frame.columns[0] != "t" or frame.shape[1] < 2:
        raise DatasetError(f"{path} is not a trajectory file (expected columns t,q0,...)")
    if h is None:
        times = frame["t"].to_numpy()
        if len(times) < 2:
            raise DatasetError(f"{path} holds fewer than two samples; cannot infer h")
        h = float(times[1] - times[0])
    positions = frame.drop(columns="t").to_numpy(dtype=np.float64)
    return Trajectory(h=h, positions=positions, check_finite=check_finite)


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> Dict[str, Any]:
    return json.loads(path.read_text())


class FilesystemDatasetRepository(DatasetRepository):
    """Stores each split as `<root>/data/<split>/traj_XXXX.csv` plus a manifest"""

    def __init__(self, root: Path):
        self.root = Path(root) / "data"

    def save_dataset(self, split: str, dataset: TrajectoryDataset) -> None:
        directory = self.root / split
        directory.mkdir(parents=True, exist_ok=True)
        for stale in directory.glob("traj_*.csv"):
            stale.unlink()
        for index, trajectory in enumerate(dataset.trajectories):
            write_trajectory_csv(directory / f"traj_{index:04d}.csv", trajectory)
        _write_json(directory / MANIFEST_FILE, dataset.manifest.to_dict())
        logger.info("Wrote %d trajectories to %s", len(dataset), directory)

    def load_dataset(self, split: str) -> TrajectoryDataset:
        directory = self.root / split
        manifest_path = directory / MANIFEST_FILE
        if not manifest_path.exists():
            raise DatasetError(f"no dataset manifest at {manifest_path}")
        manifest = DatasetManifest.from_dict(_read_json(manifest_path))
        trajectories = [
            read_trajectory_csv(path, manifest.h) for path in sorted(directory.glob("traj_*.csv"))
        ]
        return TrajectoryDataset(tuple(trajectories), manifest)

    def has_dataset(self, split: str) -> bool:
        return (self.root / split / MANIFEST_FILE).exists()


class FilesystemCheckpointRepository(CheckpointRepository):
    """JSON checkpoints: header, slice layout and the flat parameter list"""

    def __init__(self, root: Path):
        self.root = Path(root) / "checkpoints"

    def save_checkpoint(self, name: str, checkpoint: Checkpoint) -> None:
        payload = {
            "header": checkpoint.header,
            "layout": [
                {"name": s.name, "offset": s.offset, "shape": list(s.shape)}
                for s in checkpoint.params.layout
            ],
            # json writes floats with repr, which round-trips exactly
            "values": checkpoint.params.to_list(),
        }
        _write_json(self.root / f"{name}.json", payload)

    def load_checkpoint(self, name: str) -> Checkpoint:
        path = self.root / f"{name}.json"
        if not path.exists():
            raise DatasetError(f"no checkpoint at {path}")
        payload = _read_json(path)
        layout = [ParameterSlice(s["name"], s["offset"], tuple(s["shape"])) for s in payload["layout"]]
        values = np.asarray(payload["values"], dtype=np.float64)
        return Checkpoint(header=payload["header"], params=ParameterStore(values, layout))


class FilesystemArtifactRepository(ArtifactRepository):
    """Rollouts, report tables and the experiment manifest under one output directory"""

    def __init__(self, root: Path):
        self.root = Path(root)

    def save_rollouts(
        self,
        name: str,
        trajectories: List[Trajectory],
        newton_stats: Optional[List[pd.DataFrame]] = None,
    ) -> None:
        directory = self.root / "rollouts" / name
        directory.mkdir(parents=True, exist_ok=True)
        for stale in directory.glob("*.csv"):
            stale.unlink()
        for index, trajectory in enumerate(trajectories):
            write_trajectory_csv(directory / f"traj_{index:04d}.csv", trajectory)
            if newton_stats is not None:
                newton_stats[index].to_csv(
                    directory / f"newton_{index:04d}.csv", index=False, float_format=FLOAT_FORMAT
                )

    def load_rollouts(self, name: str) -> List[Trajectory]:
        directory = self.root / "rollouts" / name
        paths = sorted(directory.glob("traj_*.csv"))
        if not paths:
            raise DatasetError(f"no rollouts under {directory}")
        return [read_trajectory_csv(path, check_finite=False) for path in paths]

    def save_table(self, name: str, frame: pd.DataFrame) -> None:
        path = self.root / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)

    def load_table(self, name: str) -> pd.DataFrame:
        path = self.root / f"{name}.csv"
        if not path.exists():
            raise DatasetError(f"no table at {path}")
        return pd.read_csv(path, float_precision="round_trip")

    def save_manifest(self, manifest: Dict[str, Any]) -> None:
        _write_json(self.root / MANIFEST_FILE, manifest)

    def load_manifest(self) -> Optional[Dict[str, Any]]:
        path = self.root / MANIFEST_FILE
        return _read_json(path) if path.exists() else None


def read_trajectory_directory(directory: Path, h: Optional[float] = None) -> List[Trajectory]:
    """Every `*.csv` trajectory in a directory, in file-name order"""
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise DatasetError(f"no trajectory CSV files in {directory}")
    return [read_trajectory_csv(path, h) for path in paths]
