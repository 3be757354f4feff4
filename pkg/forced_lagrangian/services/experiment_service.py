"""Service orchestrating dataset generation, training, rollouts and evaluation"""
import logging
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from ..config import ExperimentConfig, config_hash, data_hash
from ..domain.baselines import (
    BaselineKind,
    GlnnBaseline,
    NeuralOdeBaseline,
    baseline_from_description,
    baseline_rollout,
)
from ..domain.diffcore import ParameterStore
from ..domain.discretization import Scheme
from ..domain.errors import ArtifactMismatchError, DatasetError
from ..domain.mechanics import (
    ForceModel,
    LagrangianModel,
    build_force,
    build_lagrangian,
    force_from_description,
    lagrangian_from_description,
)
from ..domain.models import Checkpoint, DatasetManifest, Trajectory, TrajectoryDataset
from ..domain.networks import Autoencoder, AutoencoderSpec
from ..domain.rollout import (
    RolloutResult,
    extrapolation_error_curve,
    extrapolation_error_stats,
    rollout,
    rollout_energy,
)
from ..domain.systems import (
    add_noise,
    generate_charged_particle,
    generate_chain,
    generate_double_pendulum,
    generate_oscillator,
    generate_pendulum_angles,
    measurement_sigma,
    params_dict,
    render_trajectory,
    savgol_smooth,
)
from ..ports.repositories import ArtifactRepository, CheckpointRepository, DatasetRepository
from .latent_service import LatentPipeline, LatentTrainingService, latent_rollout, reconstruction_gate
from .training_service import BaselineTrainingService, DflnnTrainingService, TrainReport

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ["model", "task", "force", "k", "mean", "std", "mean_per_coordinate"]


def rollout_name(model: str, force_on: bool) -> str:
    return f"{model}/{'force_on' if force_on else 'force_off'}"


def newton_frame(result: RolloutResult, energy: np.ndarray) -> pd.DataFrame:
    """Per-step Newton statistics of one trajectory; energy is taken at the pair (q_{n-1}, q_n)"""
    steps = np.arange(2, result.positions.shape[-2])
    return pd.DataFrame(
        {
            "step": steps,
            "iterations": result.iterations,
            "converged": result.converged,
            "residual_norm": result.residual_norms,
            "energy": energy[1:],
        }
    )


class ExperimentService:
    """
    Service for running the gen/train/rollout/eval pipeline of one experiment config.
    Depends on repository interfaces (ports), not concrete implementations.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        dataset_repository: DatasetRepository,
        checkpoint_repository: CheckpointRepository,
        artifact_repository: ArtifactRepository,
    ):
        """
        Initialize the service with repository dependencies

        Args:
            config: Validated experiment configuration
            dataset_repository: Storage for train/test trajectory datasets
            checkpoint_repository: Storage for trained model checkpoints
            artifact_repository: Storage for rollouts, tables and the manifest
        """
        self.config = config
        self.dataset_repository = dataset_repository
        self.checkpoint_repository = checkpoint_repository
        self.artifact_repository = artifact_repository
        self.config_hash = config_hash(config)
        self.data_hash = data_hash(config)

    # Models

    def build_dynamics(self, dim: int) -> Tuple[LagrangianModel, ForceModel]:
        networks = self.config.networks
        lagrangian = build_lagrangian(
            networks.lagrangian,
            dim,
            networks.hidden_dim,
            networks.hidden_layers,
            networks.epsilon,
            networks.u_depends_on_velocity,
        )
        force = build_force(
            networks.force, dim, networks.hidden_dim, networks.hidden_layers, networks.dropout_rate, self.config.seed
        )
        return lagrangian, force

    def build_pipeline(self, data_dim: int) -> LatentPipeline:
        networks = self.config.networks
        spec = AutoencoderSpec.feedforward(
            data_dim, networks.latent_dim, networks.ae_hidden_dim, networks.ae_hidden_layers
        )
        lagrangian, force = self.build_dynamics(networks.latent_dim)
        return LatentPipeline(Autoencoder(spec), lagrangian, force, self.config.loss.weights())

    def build_baseline(self, dim: int) -> BaselineKind:
        if self.config.model == "glnn":
            return GlnnBaseline(*self.build_dynamics(dim))
        networks = self.config.networks
        return NeuralOdeBaseline(dim, networks.hidden_dim, networks.hidden_layers)

    # gen

    def generate(self, imported: Optional[List[Trajectory]] = None) -> Dict[str, TrajectoryDataset]:
        """
        Generate (or split imported) train and test datasets and store them

        Args:
            imported: Trajectories read from CSV for the csv-import task; a
                synthetic joint chain is generated when omitted

        Returns:
            The stored datasets keyed by split
        """
        config, data = self.config, self.config.data
        rng = np.random.default_rng(config.seed)
        sigma = measurement_sigma(data.h, data.noise_variance) if data.noise_variance > 0 else 0.0

        if config.task == "csv-import" and imported is not None:
            train, test = self._split_imported(imported, rng)
            sigma = 0.0
            params: Dict[str, Any] = {"source": data.csv_path}
        else:
            system = config.system_params()
            train = self._simulate(system, data.train_count, data.train_steps, rng)
            test = self._simulate(system, data.test_count, data.test_steps, rng)
            params = params_dict(system)

        # Measurement noise on the training positions only
        train = [add_noise(trajectory, sigma, rng) for trajectory in train]
        if config.task == "csv-import":
            train = [savgol_smooth(t, data.savgol_window, data.savgol_polyorder) for t in train]
            test = [savgol_smooth(t, data.savgol_window, data.savgol_polyorder) for t in test]

        datasets = {}
        for split, trajectories, s in (("train", train, sigma), ("test", test, 0.0)):
            manifest = DatasetManifest(
                generator=config.task,
                h=trajectories[0].h,
                dim=trajectories[0].dim,
                steps=trajectories[0].steps,
                count=len(trajectories),
                sigma=s,
                seed=config.seed,
                params=params,
                config_hash=self.config_hash,
                data_hash=self.data_hash,
            )
            datasets[split] = TrajectoryDataset(tuple(trajectories), manifest)
            self.dataset_repository.save_dataset(split, datasets[split])

        manifest = self._manifest(fresh=True)
        manifest["stages"]["gen"] = {"config_hash": self.config_hash, "sigma": sigma}
        self.artifact_repository.save_manifest(manifest)
        logger.info(
            "Generated %d train / %d test trajectories for task %s (sigma %.4g)",
            len(train), len(test), config.task, sigma,
        )
        return datasets

    def _simulate(self, system, count: int, steps: int, rng: np.random.Generator) -> List[Trajectory]:
        data, task = self.config.data, self.config.task
        if task == "dp":
            return generate_double_pendulum(count, steps, data.h, system, rng, data.angle_range, data.substeps)
        if task == "cp":
            return generate_charged_particle(count, steps, data.h, system, rng, substeps=data.substeps)
        if task == "oscillator":
            return generate_oscillator(count, steps, data.h, system, rng, substeps=data.substeps)
        if task == "csv-import":
            return generate_chain(count, steps, data.h, system, rng, data.angle_range, data.substeps)
        angles = generate_pendulum_angles(count, steps, data.h, system, rng, data.angle_range, data.substeps)
        return [render_trajectory(a, data.frame_width, data.frame_height) for a in angles]

    def _split_imported(
        self, imported: List[Trajectory], rng: np.random.Generator
    ) -> Tuple[List[Trajectory], List[Trajectory]]:
        test_count = self.config.data.test_count
        if len(imported) <= test_count:
            raise DatasetError(
                f"need more than {test_count} imported trajectories to hold out a test set, got {len(imported)}"
            )
        order = rng.permutation(len(imported))
        test = [imported[i] for i in sorted(order[:test_count])]
        train = [imported[i] for i in sorted(order[test_count:])]
        return train, test

    # train

    def train(self) -> TrainReport:
        """
        Train the configured model on the stored training split

        Returns:
            The training report; the best-validation checkpoint is stored under the model name
        """
        config = self.config
        dataset = self.dataset_repository.load_dataset("train")
        self._check_data(dataset.manifest)
        train_config = config.training.train_config(config.seed)
        scheme = config.scheme_for_training()
        header: Dict[str, Any] = {"model": config.model, "task": config.task, "h": dataset.h, "dim": dataset.dim}

        if config.task == "pixel":
            pipeline = self.build_pipeline(dataset.dim)
            params, report = LatentTrainingService(pipeline, scheme).train(train_config, dataset)
            header.update(
                autoencoder=pipeline.autoencoder.spec.to_dict(),
                lagrangian=pipeline.lagrangian.describe(),
                force=pipeline.force.describe(),
            )
        elif config.model == "dflnn":
            lagrangian, force = self.build_dynamics(dataset.dim)
            service = DflnnTrainingService(lagrangian, force, config.loss.weights(), scheme)
            params, report = service.train(train_config, dataset)
            header.update(lagrangian=lagrangian.describe(), force=force.describe())
        else:
            kind = self.build_baseline(dataset.dim)
            params, report = BaselineTrainingService(kind, dataset.h).train(train_config, dataset)
            header.update(baseline=kind.describe())

        header.update(
            scheme=asdict(config.scheme),
            best_epoch=report.best_epoch,
            config_hash=self.config_hash,
            data_hash=self.data_hash,
        )
        self.checkpoint_repository.save_checkpoint(config.model, Checkpoint(header, params.detached()))
        self.artifact_repository.save_table(f"reports/{config.model}_train", report.to_frame())
        self.artifact_repository.save_table(f"reports/{config.model}_diagnostics", report.diagnostics_frame())
        self.artifact_repository.save_table(f"reports/{config.model}_regularity", report.regularity_frame())

        manifest = self._manifest()
        manifest["stages"][f"train/{config.model}"] = {
            "config_hash": self.config_hash,
            "best_epoch": report.best_epoch,
            "events": len(report.events),
        }
        self.artifact_repository.save_manifest(manifest)
        return report

    # rollout

    def rollout(self, force_on: bool = True) -> List[Trajectory]:
        """
        Predict every test trajectory from its first two positions

        Args:
            force_on: Use the learned force; False gives conservative extrapolation

        Returns:
            Predicted trajectories in test-set order (GLNN rows may be NaN)
        """
        config = self.config
        test = self.dataset_repository.load_dataset("test")
        self._check_data(test.manifest)
        checkpoint = self.checkpoint_repository.load_checkpoint(config.model)
        if checkpoint.header.get("data_hash") != self.data_hash:
            raise ArtifactMismatchError(
                f"checkpoint '{config.model}' was trained on different data; retrain before rolling out"
            )
        header, params = checkpoint.header, checkpoint.params
        truths = torch.from_numpy(test.stacked())
        q0, q1, N, h = truths[:, 0], truths[:, 1], truths.shape[1] - 1, test.h
        scheme = Scheme.midpoint(h)
        newton_stats: Optional[List[pd.DataFrame]] = None

        if "autoencoder" in header:
            pipeline = LatentPipeline(
                Autoencoder(AutoencoderSpec.from_dict(header["autoencoder"])),
                lagrangian_from_description(header["lagrangian"]),
                force_from_description(header["force"]),
                config.loss.weights(),
            )
            training_frames = np.concatenate(self.dataset_repository.load_dataset("train").positions())
            reconstruction_gate(pipeline, params, training_frames, config.eval.ae_mse_target)
            positions, latent = latent_rollout(pipeline, params, q0, q1, N, scheme, force_on, config.newton)
            newton_stats = self._newton_stats(pipeline.lagrangian, params, latent, h)
        elif "baseline" in header:
            kind = baseline_from_description(header["baseline"], nan_on_singular=True)
            positions = baseline_rollout(kind, params, q0, q1, N, h, force_on).numpy()
            failed = int(np.isnan(positions).any(axis=(1, 2)).sum())
            if failed:
                logger.warning("%d of %d %s rollouts hit a singular Hessian (NaN rows)", failed, len(positions), config.model)
        else:
            lagrangian = lagrangian_from_description(header["lagrangian"])
            force = force_from_description(header["force"])
            result = rollout(lagrangian, force, params, q0, q1, N, scheme, force_on, config.newton)
            positions = result.positions
            newton_stats = self._newton_stats(lagrangian, params, result, h)

        predictions = [Trajectory(h=h, positions=p, check_finite=False) for p in positions]
        name = rollout_name(config.model, force_on)
        self.artifact_repository.save_rollouts(name, predictions, newton_stats)

        manifest = self._manifest()
        manifest["rollouts"][name] = {
            "model": config.model,
            "force": "on" if force_on else "off",
            "steps": N,
            "checkpoint_hash": header.get("config_hash"),
        }
        self.artifact_repository.save_manifest(manifest)
        logger.info("Rolled out %d test trajectories for %d steps (%s)", len(predictions), N, name)
        return predictions

    @staticmethod
    def _newton_stats(
        lagrangian: LagrangianModel, params: ParameterStore, result: RolloutResult, h: float
    ) -> List[pd.DataFrame]:
        frames = []
        for b in range(result.positions.shape[0]):
            single = RolloutResult(
                result.positions[b], result.iterations[b], result.converged[b], result.residual_norms[b]
            )
            frames.append(newton_frame(single, rollout_energy(lagrangian, params, single.positions, h)))
        return frames

    # eval

    def evaluate(self) -> pd.DataFrame:
        """
        Extrapolation error at step k for every stored rollout

        Returns:
            Table with columns model, task, force, k, mean, std, mean_per_coordinate
        """
        config = self.config
        manifest = self._manifest()
        test = self.dataset_repository.load_dataset("test")
        self._check_data(test.manifest)
        truths = test.stacked()
        k = config.eval.k

        rows, curves = [], []
        for name, entry in sorted(manifest["rollouts"].items()):
            self._check_rollout(name, entry)
            predictions = np.stack([t.positions for t in self.artifact_repository.load_rollouts(name)])
            mean, std = extrapolation_error_stats(predictions, truths, k)
            rows.append(
                {
                    "model": entry["model"],
                    "task": config.task,
                    "force": entry["force"],
                    "k": k,
                    "mean": mean,
                    "std": std,
                    "mean_per_coordinate": mean / truths.shape[-1],
                }
            )
            curve = extrapolation_error_curve(predictions, truths)
            curves.append(
                pd.DataFrame(
                    {"model": entry["model"], "force": entry["force"], "k": np.arange(len(curve)), "mean": curve}
                )
            )
        if not rows:
            raise DatasetError("no rollouts recorded for this experiment; run `rollout` first")

        table = pd.DataFrame(rows, columns=EVAL_COLUMNS)
        self.artifact_repository.save_table("eval", table)
        self.artifact_repository.save_table("eval_curve", pd.concat(curves, ignore_index=True))
        logger.info("Evaluated %d rollout set(s) at k=%d", len(rows), k)
        return table

    # Manifest

    def _check_data(self, manifest: DatasetManifest) -> None:
        if manifest.data_hash != self.data_hash:
            raise ArtifactMismatchError(
                f"stored dataset has data hash {manifest.data_hash[:12]}, "
                f"configuration expects {self.data_hash[:12]}; rerun `gen`"
            )

    def _check_rollout(self, name: str, entry: Dict[str, Any]) -> None:
        """Rollouts must come from the checkpoint currently stored for their model"""
        checkpoint = self.checkpoint_repository.load_checkpoint(entry["model"])
        stored = checkpoint.header.get("config_hash")
        if entry.get("checkpoint_hash") is None or entry["checkpoint_hash"] != stored:
            raise ArtifactMismatchError(
                f"rollouts '{name}' were produced by another '{entry['model']}' checkpoint; rerun `rollout`"
            )

    def _manifest(self, fresh: bool = False) -> Dict[str, Any]:
        manifest = None if fresh else self.artifact_repository.load_manifest()
        if manifest is None:
            manifest = {
                "data_hash": self.data_hash,
                "task": self.config.task,
                "seed": self.config.seed,
                "stages": {},
                "rollouts": {},
            }
        elif manifest.get("data_hash") != self.data_hash:
            raise ArtifactMismatchError("artifacts in this directory were produced from different data")
        manifest["config_hash"] = self.config_hash
        manifest["config"] = self.config.to_dict()
        return manifest
