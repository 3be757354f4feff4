"""Tests for the GLNN and Neural ODE baselines"""
import math

import numpy as np
import pytest
import torch

from forced_lagrangian.domain.baselines import (
    GlnnBaseline,
    NeuralOdeBaseline,
    baseline_from_description,
    baseline_loss,
    baseline_rollout,
    baseline_step,
    glnn_accel,
    midpoint_state,
    recover_position,
    rk4_step,
)
from forced_lagrangian.domain.diffcore import eval_value_and_param_grad
from forced_lagrangian.domain.discretization import windows
from forced_lagrangian.domain.errors import DimensionMismatchError, ModelVariantError, SingularHessianError
from forced_lagrangian.domain.mechanics import AnalyticLagrangian, ZeroForce, build_force, build_lagrangian
from forced_lagrangian.domain.networks import init_params


@pytest.fixture
def potential_only():
    return AnalyticLagrangian(1, lambda q, v: (q ** 2).sum(-1), "potential_only")


class TestGlnnAcceleration:
    """Test suite for the explicit forced Euler–Lagrange acceleration"""

    def test_harmonic(self, harmonic_lagrangian, zero_force, empty_params):
        """Test q̈ = −q"""
        accel = glnn_accel(harmonic_lagrangian, zero_force, empty_params, [0.5], [1.0])

        assert float(accel[0]) == pytest.approx(-0.5)

    def test_damped(self, harmonic_lagrangian, linear_damping, empty_params):
        """Test q̈ = −q − 0.1v"""
        accel = glnn_accel(harmonic_lagrangian, linear_damping, empty_params, [0.5], [1.0])

        assert float(accel[0]) == pytest.approx(-0.6)

    def test_pendulum(self, pendulum_lagrangian, zero_force, empty_params):
        """Test q̈ = −sin q"""
        accel = glnn_accel(pendulum_lagrangian, zero_force, empty_params, [[1.0], [0.2]], [[0.0], [3.0]])

        assert accel[:, 0].tolist() == pytest.approx([-math.sin(1.0), -math.sin(0.2)])

    def test_singular_raises(self, potential_only, zero_force, empty_params):
        """Test a singular velocity Hessian raises with the offending point"""
        with pytest.raises(SingularHessianError) as error:
            glnn_accel(potential_only, zero_force, empty_params, [0.5], [1.0])

        assert error.value.q.tolist() == [0.5]

    def test_singular_as_nan(self, potential_only, zero_force, empty_params):
        """Test singular rows become NaN when requested"""
        accel = glnn_accel(potential_only, zero_force, empty_params, [0.5], [1.0], nan_on_singular=True)

        assert math.isnan(float(accel[0]))


class TestIntegration:
    """Test suite for RK4 and midpoint states"""

    def test_rk4_exponential_decay(self):
        """Test one RK4 step on x′ = −x matches exp(−h) to fifth order"""
        x = torch.tensor([1.0], dtype=torch.float64)

        stepped = rk4_step(lambda y: -y, x, 0.1)

        assert float(stepped[0]) == pytest.approx(math.exp(-0.1), abs=1e-7)

    def test_recover_position_inverts_midpoint_state(self):
        """Test q̄ + (h/2)v̄ returns the second point"""
        state = midpoint_state([0.2, -1.0], [0.5, 1.0], 0.1)

        assert recover_position(state, 0.1).tolist() == pytest.approx([0.5, 1.0])

    def test_step_checks_dimension(self, harmonic_lagrangian, zero_force, empty_params):
        """Test states must hold positions and velocities"""
        kind = GlnnBaseline(harmonic_lagrangian, zero_force)

        with pytest.raises(DimensionMismatchError):
            baseline_step(kind, empty_params, torch.zeros(3, dtype=torch.float64), 0.1)

    def test_force_off_drops_damping(self, harmonic_lagrangian, linear_damping, empty_params):
        """Test the unforced GLNN field ignores the learned force"""
        kind = GlnnBaseline(harmonic_lagrangian, linear_damping)
        state = torch.tensor([0.5, 1.0], dtype=torch.float64)

        assert kind.vector_field(empty_params, state, force_on=False).tolist() == pytest.approx([1.0, -0.5])
        assert kind.vector_field(empty_params, state).tolist() == pytest.approx([1.0, -0.6])


class TestBaselineLoss:
    """Test suite for the one-step state loss"""

    def test_exact_model_has_small_loss(self, harmonic_lagrangian, zero_force, empty_params):
        """Test the true oscillator field nearly predicts the next midpoint state"""
        positions = np.cos(0.1 * np.arange(30))[:, None]
        kind = GlnnBaseline(harmonic_lagrangian, zero_force)

        loss = baseline_loss(kind, empty_params, windows(positions, 3), 0.1)

        assert 0.0 <= float(loss) < 1e-5

    def test_window_shape_checked(self, harmonic_lagrangian, zero_force, empty_params):
        """Test windows must hold three points"""
        kind = GlnnBaseline(harmonic_lagrangian, zero_force)

        with pytest.raises(DimensionMismatchError):
            baseline_loss(kind, empty_params, torch.zeros(4, 5, 1), 0.1)

    def test_neural_ode_gradient(self):
        """Test the Neural ODE loss has a finite parameter gradient"""
        kind = NeuralOdeBaseline(2, hidden_dim=8, hidden_layers=2)
        params = init_params(kind.parameter_shapes(), 0)
        batch = windows(np.random.default_rng(0).normal(size=(10, 2)), 3)

        value, grad = eval_value_and_param_grad(lambda p: baseline_loss(kind, p, batch, 0.1), params)

        assert torch.isfinite(value)
        assert torch.isfinite(grad).all()

    def test_glnn_gradient_through_hessian(self):
        """Test the GLNN loss differentiates through the velocity Hessian solve"""
        lagrangian = build_lagrangian("mechanical", 2, hidden_dim=8, hidden_layers=2)
        force = build_force("linear_rayleigh", 2)
        kind = GlnnBaseline(lagrangian, force)
        params = init_params(kind.parameter_shapes(), 1)
        batch = windows(np.random.default_rng(1).normal(size=(6, 2)), 3)

        _, grad = eval_value_and_param_grad(lambda p: baseline_loss(kind, p, batch, 0.1), params)

        assert torch.isfinite(grad).all()
        assert float(grad.abs().max()) > 0.0


class TestBaselineRollout:
    """Test suite for baseline prediction"""

    def test_harmonic_tracks_truth(self, harmonic_lagrangian, zero_force, empty_params):
        """Test the true oscillator field follows cos(t) over 50 steps"""
        h = 0.1
        truth = np.cos(h * np.arange(51))
        kind = GlnnBaseline(harmonic_lagrangian, zero_force)

        predicted = baseline_rollout(kind, empty_params, truth[:1], truth[1:2], 50, h)

        assert predicted.shape == (51, 1)
        assert predicted[:2, 0].tolist() == truth[:2].tolist()
        assert float(np.abs(predicted[:, 0].numpy() - truth).max()) < 1e-2

    def test_batched_node_rollout(self):
        """Test batched seeds give (B, N + 1, d)"""
        kind = NeuralOdeBaseline(2, hidden_dim=4, hidden_layers=1)
        params = init_params(kind.parameter_shapes(), 0)

        predicted = baseline_rollout(kind, params, np.zeros((3, 2)), np.ones((3, 2)), 4, 0.1)

        assert predicted.shape == (3, 5, 2)

    def test_singular_rows_become_nan(self, potential_only, empty_params):
        """Test predictions after a singular Hessian are NaN"""
        kind = GlnnBaseline(potential_only, ZeroForce(1), nan_on_singular=True)

        predicted = baseline_rollout(kind, empty_params, [0.0], [0.1], 3, 0.1)

        assert predicted[:2, 0].tolist() == [0.0, 0.1]
        assert torch.isnan(predicted[2:]).all()

    def test_invalid_length(self, harmonic_lagrangian, zero_force, empty_params):
        """Test N < 1 raises"""
        with pytest.raises(ValueError):
            baseline_rollout(GlnnBaseline(harmonic_lagrangian, zero_force), empty_params, [0.0], [0.1], 0, 0.1)


class TestBaselineDescription:
    """Test suite for rebuilding baselines from checkpoint headers"""

    def test_neural_ode(self):
        """Test the Neural ODE is rebuilt from its description"""
        kind = NeuralOdeBaseline(3, hidden_dim=12, hidden_layers=2)

        assert baseline_from_description(kind.describe()) == kind

    def test_glnn(self):
        """Test the GLNN keeps its Lagrangian and force variants"""
        kind = GlnnBaseline(
            build_lagrangian("mechanical", 2, hidden_dim=8, hidden_layers=1),
            build_force("free", 2, hidden_dim=8, hidden_layers=1),
        )

        rebuilt = baseline_from_description(kind.describe(), nan_on_singular=True)

        assert rebuilt.describe() == kind.describe()
        assert rebuilt.nan_on_singular

    def test_unknown_kind(self):
        """Test unknown kinds raise"""
        with pytest.raises(ModelVariantError):
            baseline_from_description({"kind": "hnn"})
