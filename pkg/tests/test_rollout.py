"""Tests for implicit stepping, rollouts and extrapolation metrics"""
import numpy as np
import pytest
import torch

from forced_lagrangian.domain.diffcore import ParameterStore
from forced_lagrangian.domain.discretization import Scheme, del_residual
from forced_lagrangian.domain.errors import DimensionMismatchError, NewtonConvergenceError
from forced_lagrangian.domain.mechanics import AnalyticLagrangian, LinearRayleighForce
from forced_lagrangian.domain.rollout import (
    NewtonConfig,
    extrapolation_error,
    extrapolation_error_curve,
    extrapolation_error_stats,
    implicit_step,
    rollout,
    rollout_energy,
    solve_step,
)


@pytest.fixture
def exponential_lagrangian():
    """L = exp(q): the residual stays positive, so Newton never converges"""
    return AnalyticLagrangian(1, lambda q, v: torch.exp(q).sum(-1), "exponential")


def quadratic_system(seed: int):
    """
    Random L = ½vᵀMv + vᵀCq − ½qᵀKq + bᵀq with F = −Dv, and the exact
    next position of the window (a, c, ·) at h = 0.1 from the affine residual
    """
    rng = np.random.default_rng(seed)
    dim, h = 1 + seed % 3, 0.1
    G = rng.normal(size=(dim, dim))
    M = np.eye(dim) + 0.1 * G @ G.T
    C = 0.3 * rng.normal(size=(dim, dim))
    K = rng.normal(size=(dim, dim))
    K = K + K.T
    b = rng.normal(size=dim)
    packed = rng.normal(size=dim * (dim + 1) // 2)
    factor = np.zeros((dim, dim))
    factor[np.tril_indices(dim)] = packed
    D = factor.T @ factor
    a, c = rng.normal(size=dim), rng.normal(size=dim)

    tensors = [torch.from_numpy(m) for m in (M, C, K, b)]

    def lagrangian(q, v):
        Mt, Ct, Kt, bt = tensors
        return (
            0.5 * torch.einsum("...i,ij,...j->...", v, Mt, v)
            + torch.einsum("...i,ij,...j->...", v, Ct, q)
            - 0.5 * torch.einsum("...i,ij,...j->...", q, Kt, q)
            + q @ bt
        )

    def residual(x):
        def grad_q(q, v):
            return C.T @ v - K @ q + b

        def grad_v(q, v):
            return M @ v + C @ q

        q_minus, v_minus = (a + c) / 2, (c - a) / h
        q_plus, v_plus = (c + x) / 2, (x - c) / h
        return (
            grad_q(q_minus, v_minus) + (2 / h) * grad_v(q_minus, v_minus)
            + grad_q(q_plus, v_plus) - (2 / h) * grad_v(q_plus, v_plus)
            - D @ v_minus - D @ v_plus
        )

    slope = C.T / h - K / 2 - (2 / h) * (M / h + C / 2) - D / h
    expected = np.linalg.solve(slope, -residual(np.zeros(dim)))

    force = LinearRayleighForce(dim)
    params = ParameterStore.from_arrays([(force.packed_name, packed)])
    return AnalyticLagrangian(dim, lagrangian, "quadratic"), force, params, a, c, h, expected


class TestImplicitStep:
    """Test suite for one Newton-solved step"""

    def test_free_particle_continues_uniformly(self, free_lagrangian, zero_force, empty_params):
        """Test seeds (0, 0.1) give 0.2"""
        q_next = implicit_step(free_lagrangian, zero_force, empty_params, [0.0], [0.1], Scheme.midpoint(0.1))

        assert float(q_next[0]) == pytest.approx(0.2, abs=1e-12)

    def test_harmonic_hand_value(self, harmonic_lagrangian, zero_force, empty_params):
        """Test seeds (1, 1) at h = 1 give 1/5"""
        q_next = implicit_step(harmonic_lagrangian, zero_force, empty_params, [1.0], [1.0], Scheme.midpoint(1.0))

        assert float(q_next[0]) == pytest.approx(0.2, abs=1e-10)

    def test_damped_hand_value(self, free_lagrangian, linear_damping, empty_params):
        """Test F = −0.1v slows the next velocity to 19.9/20.1"""
        q_next = implicit_step(free_lagrangian, linear_damping, empty_params, [0.0], [0.1], Scheme.midpoint(0.1))

        assert float(q_next[0]) == pytest.approx(0.1 + 0.1 * 19.9 / 20.1, abs=1e-10)

    def test_nonlinear_residual_within_tolerance(self, pendulum_lagrangian, linear_damping, empty_params):
        """Test the pendulum step drives the residual below the tolerance"""
        scheme = Scheme.midpoint(0.1)
        outcome = solve_step(pendulum_lagrangian, linear_damping, empty_params, [1.0], [1.05], scheme)

        window = torch.tensor([[1.0], [1.05], [float(outcome.solution[0])]], dtype=torch.float64)
        residual = del_residual(pendulum_lagrangian, linear_damping, empty_params, window, scheme)

        assert bool(outcome.converged)
        assert float(residual.abs().max()) <= 1e-10
        assert 1 <= int(outcome.iterations) <= 50

    @pytest.mark.parametrize("seed", range(100))
    def test_quadratic_matches_linear_solve(self, seed):
        """Test a random quadratic L with linear damping steps to the closed-form root"""
        lagrangian, force, params, a, c, h, expected = quadratic_system(seed)

        q_next = implicit_step(lagrangian, force, params, a, c, Scheme.midpoint(h))

        assert np.abs(q_next.numpy() - expected).max() < 1e-12

    def test_batched_seeds(self, harmonic_lagrangian, zero_force, empty_params):
        """Test several seed pairs are solved together"""
        q_prev = np.array([[1.0], [0.0], [-0.5]])
        q_curr = np.array([[1.0], [0.1], [-0.4]])

        q_next = implicit_step(harmonic_lagrangian, zero_force, empty_params, q_prev, q_curr, Scheme.midpoint(1.0))

        assert q_next.shape == (3, 1)
        assert float(q_next[0, 0]) == pytest.approx(0.2, abs=1e-10)

    def test_dimension_checked(self, harmonic_lagrangian, zero_force, empty_params):
        """Test seeds of the wrong dimension raise"""
        with pytest.raises(DimensionMismatchError):
            implicit_step(harmonic_lagrangian, zero_force, empty_params, [0.0, 1.0], [0.0, 1.0], Scheme.midpoint(0.1))

    def test_multistep_rejected(self, harmonic_lagrangian, zero_force, empty_params):
        """Test only the midpoint scheme is stepped implicitly"""
        with pytest.raises(ValueError):
            implicit_step(harmonic_lagrangian, zero_force, empty_params, [0.0], [0.1], Scheme.multistep(0.1, 2))

    def test_unsolvable_raises(self, exponential_lagrangian, zero_force, empty_params):
        """Test a residual without a root raises with the best iterate"""
        cfg = NewtonConfig(max_iters=5)

        with pytest.raises(NewtonConvergenceError) as error:
            implicit_step(exponential_lagrangian, zero_force, empty_params, [0.0], [0.0], Scheme.midpoint(0.1), cfg)

        assert error.value.residual_norm > cfg.tol
        assert error.value.best_iterate.shape == (1,)

    def test_invalid_config(self):
        """Test non-positive tolerances raise"""
        with pytest.raises(ValueError):
            NewtonConfig(tol=0.0)


class TestRollout:
    """Test suite for recursive prediction"""

    def test_shapes_and_stats(self, harmonic_lagrangian, zero_force, empty_params):
        """Test N steps give N + 1 positions and N − 1 solve records"""
        result = rollout(harmonic_lagrangian, zero_force, empty_params, [1.0], [0.995], 10, Scheme.midpoint(0.1))

        assert result.positions.shape == (11, 1)
        assert result.steps == 10
        assert result.iterations.shape == (9,)
        assert result.converged.all()
        assert (result.residual_norms <= 1e-10).all()

    def test_seeds_are_kept(self, harmonic_lagrangian, zero_force, empty_params):
        """Test the first two positions are the seeds"""
        result = rollout(harmonic_lagrangian, zero_force, empty_params, [0.3], [0.4], 3, Scheme.midpoint(0.1))

        assert result.positions[:2, 0].tolist() == [0.3, 0.4]

    def test_batched_rollout(self, harmonic_lagrangian, zero_force, empty_params):
        """Test batched seeds give (B, N + 1, d)"""
        q0 = np.array([[1.0], [0.5]])
        q1 = np.array([[0.99], [0.52]])

        result = rollout(harmonic_lagrangian, zero_force, empty_params, q0, q1, 5, Scheme.midpoint(0.1))

        assert result.positions.shape == (2, 6, 1)
        assert result.iterations.shape == (2, 4)

    def test_force_off(self, free_lagrangian, linear_damping, empty_params):
        """Test the unforced rollout of a damped free particle moves uniformly"""
        scheme = Scheme.midpoint(0.1)

        forced = rollout(free_lagrangian, linear_damping, empty_params, [0.0], [0.1], 20, scheme)
        unforced = rollout(free_lagrangian, linear_damping, empty_params, [0.0], [0.1], 20, scheme, force_on=False)

        assert unforced.positions[-1, 0] == pytest.approx(2.0, abs=1e-9)
        assert forced.positions[-1, 0] < unforced.positions[-1, 0]

    def test_damping_decreases_energy(self, harmonic_lagrangian, linear_damping, empty_params):
        """Test the damped oscillator loses energy along its rollout"""
        result = rollout(harmonic_lagrangian, linear_damping, empty_params, [1.0], [1.0], 200, Scheme.midpoint(0.1))

        energy = rollout_energy(harmonic_lagrangian, empty_params, result.positions, 0.1)

        assert energy.shape == (200,)
        assert energy[-1] < 0.5 * energy[0]

    def test_conservative_energy_is_bounded(self, harmonic_lagrangian, zero_force, empty_params):
        """Test the unforced midpoint rollout keeps energy close to its start"""
        result = rollout(harmonic_lagrangian, zero_force, empty_params, [1.0], [1.0], 300, Scheme.midpoint(0.1))

        energy = rollout_energy(harmonic_lagrangian, empty_params, result.positions, 0.1)

        assert np.abs(energy - energy[0]).max() <= 1e-2 * energy[0]

    def test_invalid_length(self, harmonic_lagrangian, zero_force, empty_params):
        """Test N < 1 raises"""
        with pytest.raises(ValueError):
            rollout(harmonic_lagrangian, zero_force, empty_params, [0.0], [0.1], 0, Scheme.midpoint(0.1))

    def test_partial_result_on_failure(self, exponential_lagrangian, zero_force, empty_params):
        """Test a failed step attaches the positions computed so far"""
        with pytest.raises(NewtonConvergenceError) as error:
            rollout(
                exponential_lagrangian, zero_force, empty_params, [0.0], [0.0], 5,
                Scheme.midpoint(0.1), cfg=NewtonConfig(max_iters=3),
            )

        assert error.value.partial_result.positions.shape == (2, 1)

    @pytest.mark.slow
    def test_long_conservative_energy_is_bounded(self, pendulum_lagrangian, zero_force, empty_params):
        """Test 10⁵ pendulum steps at h = 0.1 keep |E − E0| < 5e-3 without drift, unlike forward Euler"""
        h, steps = 0.1, 100_000
        result = rollout(pendulum_lagrangian, zero_force, empty_params, [1.0], [1.0], steps, Scheme.midpoint(h))

        energy = rollout_energy(pendulum_lagrangian, empty_params, result.positions, h)
        deviation = energy - energy[0]
        slope = np.polyfit(np.arange(len(energy)), energy, 1)[0]

        assert result.converged.all()
        assert np.abs(deviation).max() < 5e-3
        assert abs(slope) * len(energy) < 1e-3

        q, v = 1.0, 0.0
        euler = [0.5 * v ** 2 - np.cos(q)]
        for _ in range(10_000):
            q, v = q + h * v, v - h * np.sin(q)
            euler.append(0.5 * v ** 2 - np.cos(q))
        assert abs(euler[-1] - euler[0]) > 0.1


class TestExtrapolationError:
    """Test suite for the step-k error metric"""

    def test_hand_values(self):
        """Test squared errors 1 and 9 give mean 5 and std 4"""
        predictions = np.zeros((2, 3, 1))
        truths = np.zeros((2, 3, 1))
        truths[:, 1, 0] = [1.0, 3.0]

        assert extrapolation_error(predictions, truths, 1) == pytest.approx(5.0)
        assert extrapolation_error_stats(predictions, truths, 1) == pytest.approx((5.0, 4.0))

    def test_curve(self):
        """Test the curve holds one value per step"""
        truths = np.zeros((2, 4, 2))
        predictions = truths + 1.0

        curve = extrapolation_error_curve(predictions, truths)

        assert curve.tolist() == [2.0, 2.0, 2.0, 2.0]

    def test_shape_mismatch(self):
        """Test mismatched predictions raise"""
        with pytest.raises(DimensionMismatchError):
            extrapolation_error(np.zeros((2, 3, 1)), np.zeros((2, 4, 1)), 1)

    def test_step_out_of_range(self):
        """Test k beyond the trajectory length raises"""
        with pytest.raises(DimensionMismatchError):
            extrapolation_error(np.zeros((1, 3, 1)), np.zeros((1, 3, 1)), 3)
