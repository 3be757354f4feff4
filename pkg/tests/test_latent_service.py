"""Tests for joint autoencoder and latent-dynamics training"""
import math

import numpy as np
import pytest
import torch

from forced_lagrangian.domain.discretization import Scheme
from forced_lagrangian.domain.errors import DimensionMismatchError, ReconstructionGateError
from forced_lagrangian.domain.mechanics import build_force, build_lagrangian
from forced_lagrangian.domain.networks import Autoencoder, AutoencoderSpec, init_params
from forced_lagrangian.domain.objective import LossWeights
from forced_lagrangian.domain.systems import generate_pendulum_angles, render_trajectory
from forced_lagrangian.services.latent_service import (
    LatentBatch,
    LatentPipeline,
    LatentTrainingService,
    latent_rollout,
    latent_total_loss,
    reconstruction_gate,
    reconstruction_mse,
)
from forced_lagrangian.services.training_service import TrainConfig
from tests.conftest import make_dataset

WIDTH, HEIGHT = 6, 10


def make_pipeline(data_dim: int = WIDTH * HEIGHT) -> LatentPipeline:
    return LatentPipeline(
        Autoencoder(AutoencoderSpec.feedforward(data_dim, 1, hidden_dim=8)),
        build_lagrangian("mechanical", 1, hidden_dim=8, hidden_layers=1),
        build_force("linear_rayleigh", 1),
        LossWeights.for_task("pixel"),
    )


@pytest.fixture
def frame_dataset():
    """Four short damped-pendulum videos of 6×10 frames"""
    angles = generate_pendulum_angles(4, 12, 0.1, rng=0, substeps=10)
    return make_dataset([render_trajectory(a, WIDTH, HEIGHT) for a in angles], generator="pixel")


class TestLatentPipeline:
    """Test suite for the pipeline wiring"""

    def test_dimensions(self):
        """Test data and latent dimensions come from the autoencoder"""
        pipeline = make_pipeline()

        assert (pipeline.data_dim, pipeline.latent_dim) == (60, 1)

    def test_latent_dimension_must_match(self):
        """Test dynamics of another dimension are rejected"""
        with pytest.raises(DimensionMismatchError):
            LatentPipeline(
                Autoencoder(AutoencoderSpec.feedforward(60, 1)),
                build_lagrangian("mechanical", 2),
                build_force("linear_rayleigh", 2),
                LossWeights(),
            )

    def test_encode_checks_frame_size(self):
        """Test frames of the wrong size raise"""
        pipeline = make_pipeline()
        params = init_params(pipeline.parameter_shapes(), 0)

        with pytest.raises(DimensionMismatchError):
            pipeline.encode(params, np.zeros((2, 59)))


class TestLatentLoss:
    """Test suite for the joint objective"""

    def test_weighted_sum(self, frame_dataset):
        """Test total = 0.9·physics + 1.0·ae + 0.1·reg with every term finite"""
        pipeline = make_pipeline()
        params = init_params(pipeline.parameter_shapes(), 0)
        frames = frame_dataset.positions()
        reg_pairs = torch.from_numpy(np.stack([frames[0][:2], frames[1][3:5]]))
        batch = LatentBatch.from_trajectories(frames, Scheme.midpoint(0.1), reg_pairs)

        loss = latent_total_loss(pipeline, params, batch, Scheme.midpoint(0.1))

        expected = 0.9 * float(loss.physics) + 1.0 * float(loss.ae) + 0.1 * float(loss.reg)
        assert float(loss.total) == pytest.approx(expected)
        assert loss.is_finite()
        assert float(loss.ae) > 0

    def test_batch_shapes(self, frame_dataset):
        """Test windows and frames are pooled over trajectories"""
        batch = LatentBatch.from_trajectories(
            frame_dataset.positions(), Scheme.midpoint(0.1), torch.zeros(0, 2, 60, dtype=torch.float64)
        )

        assert batch.windows.shape == (4 * 11, 3, 60)
        assert batch.frames.shape == (4 * 13, 60)

    def test_subset_uses_window_frames(self, frame_dataset):
        """Test a sampled batch reconstructs the frames of its windows"""
        batch = LatentBatch.from_trajectories(
            frame_dataset.positions(), Scheme.midpoint(0.1), torch.zeros(0, 2, 60, dtype=torch.float64)
        )

        subset = batch.subset(torch.tensor([0, 5]))

        assert subset.windows.shape == (2, 3, 60)
        assert subset.frames.shape == (6, 60)

    def test_frame_size_checked(self):
        """Test a batch of the wrong frame size raises"""
        pipeline = make_pipeline()
        params = init_params(pipeline.parameter_shapes(), 0)
        batch = LatentBatch.from_trajectories(
            [np.zeros((4, 10))], Scheme.midpoint(0.1), torch.zeros(0, 2, 10, dtype=torch.float64)
        )

        with pytest.raises(DimensionMismatchError):
            latent_total_loss(pipeline, params, batch, Scheme.midpoint(0.1))


class TestReconstructionGate:
    """Test suite for the reconstruction gate"""

    def test_gate(self, frame_dataset):
        """Test the gate passes a loose target and rejects an impossible one"""
        pipeline = make_pipeline()
        params = init_params(pipeline.parameter_shapes(), 0)
        frames = frame_dataset.trajectories[0].positions
        mse = reconstruction_mse(pipeline, params, frames)

        assert reconstruction_gate(pipeline, params, frames, mse + 1.0) == pytest.approx(mse)
        with pytest.raises(ReconstructionGateError):
            reconstruction_gate(pipeline, params, frames, 0.0)


class TestLatentRollout:
    """Test suite for decoded latent rollouts"""

    def test_decoded_shapes(self, frame_dataset):
        """Test the rollout decodes every latent step back to frames"""
        pipeline = make_pipeline()
        params = init_params(pipeline.parameter_shapes(), 0)
        frames = frame_dataset.trajectories[0].positions

        decoded, latent = latent_rollout(pipeline, params, frames[0], frames[1], 8, Scheme.midpoint(0.1))

        assert decoded.shape == (9, 60)
        assert latent.positions.shape == (9, 1)
        first = pipeline.decode(params, pipeline.encode(params, frames[0])).detach().numpy()
        assert np.allclose(decoded[0], first)


class TestLatentTrainingService:
    """Test suite for joint training"""

    def test_short_run(self, frame_dataset):
        """Test a short joint run reports finite losses"""
        service = LatentTrainingService(make_pipeline(), Scheme.midpoint(0.1))

        params, report = service.train(TrainConfig(lr=1e-3, epochs=3), frame_dataset)

        assert len(report.epochs) == 3
        assert all(math.isfinite(v) for v in report.val_loss)
        assert torch.isfinite(params.values).all()

    def test_minibatch_run(self, frame_dataset):
        """Test mini-batches of windows train as well"""
        service = LatentTrainingService(make_pipeline(), Scheme.midpoint(0.1))

        _, report = service.train(TrainConfig(lr=1e-3, epochs=2, batch_size=10), frame_dataset)

        assert all(math.isfinite(v) for v in report.train_loss)

    def test_dataset_dimension_checked(self, oscillator_dataset):
        """Test data of the wrong dimension is rejected"""
        service = LatentTrainingService(make_pipeline(), Scheme.midpoint(0.1))

        with pytest.raises(DimensionMismatchError):
            service.train(TrainConfig(epochs=1), oscillator_dataset)
