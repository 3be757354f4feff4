"""Tests for ground-truth systems, noise, smoothing and rendering"""
import numpy as np
import pytest

from forced_lagrangian.domain.errors import DatasetError
from forced_lagrangian.domain.models import Trajectory
from forced_lagrangian.domain.systems import (
    ChainParams,
    ChargedParticleParams,
    DoublePendulumParams,
    OscillatorParams,
    add_noise,
    cp_ode,
    dp_energy,
    dp_ode,
    generate_chain,
    generate_charged_particle,
    generate_double_pendulum,
    generate_oscillator,
    generate_pendulum_angles,
    integrate_states,
    measurement_sigma,
    params_dict,
    render_pendulum,
    render_trajectory,
    savgol_smooth,
)


class TestIntegration:
    """Test suite for the fixed-step RK4 sampler"""

    def test_sample_count(self):
        """Test N steps give N + 1 samples including the initial state"""
        states = integrate_states(lambda x: -x, np.ones(2), 0.1, 10, 5)

        assert states.shape == (6, 2)
        assert states[0].tolist() == [1.0, 1.0]
        assert states[-1, 0] == pytest.approx(np.exp(-0.5), abs=1e-10)

    def test_batched_states(self):
        """Test a batch of initial states integrates together"""
        states = integrate_states(lambda x: -x, np.ones((3, 2)), 0.1, 10, 4)

        assert states.shape == (3, 5, 2)

    def test_non_finite_raises_with_partial(self):
        """Test a diverging state raises with the samples collected so far"""
        with pytest.raises(DatasetError) as error:
            integrate_states(lambda x: np.full_like(x, np.nan), np.ones(1), 0.1, 2, 3)

        assert error.value.partial.shape == (1, 1)

    def test_invalid_substeps(self):
        """Test zero substeps raise"""
        with pytest.raises(ValueError):
            integrate_states(lambda x: x, np.ones(1), 0.1, 0, 3)


class TestDoublePendulum:
    """Test suite for the damped double pendulum"""

    def test_rest_is_equilibrium(self):
        """Test the hanging rest state has zero derivative"""
        assert dp_ode(np.zeros(4), DoublePendulumParams()).tolist() == [0.0, 0.0, 0.0, 0.0]

    def test_undamped_conserves_energy(self):
        """Test energy is conserved without damping"""
        params = DoublePendulumParams(b1=0.0, b2=0.0)
        trajectory = generate_double_pendulum(1, 50, 0.1, params, rng=0)[0]
        states = np.concatenate([trajectory.positions, trajectory.velocities], axis=-1)

        energy = dp_energy(states, params)

        assert np.abs(energy - energy[0]).max() < 1e-6

    def test_damping_dissipates(self):
        """Test the default damping removes energy"""
        params = DoublePendulumParams()
        trajectory = generate_double_pendulum(1, 50, 0.1, params, rng=0)[0]
        states = np.concatenate([trajectory.positions, trajectory.velocities], axis=-1)

        energy = dp_energy(states, params)

        assert energy[-1] < energy[0]

    def test_seeded_generation(self):
        """Test the same seed gives identical trajectories"""
        first = generate_double_pendulum(2, 5, rng=3, substeps=10)
        second = generate_double_pendulum(2, 5, rng=3, substeps=10)

        assert all(np.array_equal(a.positions, b.positions) for a, b in zip(first, second))
        assert first[0].positions.shape == (6, 2)

    def test_initial_angles_in_range(self):
        """Test initial angles lie in the sampling range with zero velocity"""
        trajectories = generate_double_pendulum(20, 1, rng=1, substeps=1)

        initial = np.stack([t.positions[0] for t in trajectories])
        assert np.abs(initial).max() <= np.pi / 6
        assert all(np.array_equal(t.velocities[0], np.zeros(2)) for t in trajectories)

    def test_invalid_params(self):
        """Test negative damping is rejected"""
        with pytest.raises(ValueError):
            DoublePendulumParams(b1=-1.0)


class TestChargedParticle:
    """Test suite for the dissipative charged particle"""

    def test_speed_decays_exponentially(self):
        """Test |v| = |v₀|·exp(−b t/m) since the magnetic force does no work"""
        params = ChargedParticleParams(damping=0.1)
        trajectory = generate_charged_particle(1, 20, 0.1, params, rng=0)[0]

        speeds = np.linalg.norm(trajectory.velocities, axis=-1)

        assert speeds[-1] == pytest.approx(speeds[0] * np.exp(-0.2), rel=1e-8)

    def test_lorentz_force_direction(self):
        """Test v = x̂ in B = ẑ accelerates along −ŷ"""
        state = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])

        derivative = cp_ode(state, ChargedParticleParams(damping=0.0))

        assert derivative.tolist() == [1.0, 0.0, 0.0, 0.0, -1.0, 0.0]

    def test_undamped_speed_is_conserved(self):
        """Test b = 0 keeps |v| constant along every trajectory"""
        trajectories = generate_charged_particle(3, 20, 0.1, ChargedParticleParams(damping=0.0), rng=1)

        for trajectory in trajectories:
            speeds = np.linalg.norm(trajectory.velocities, axis=-1)
            assert np.abs(speeds - speeds[0]).max() <= 1e-10 * speeds[0]

    def test_initial_speed_range(self):
        """Test initial speeds lie in the sampling range"""
        trajectories = generate_charged_particle(20, 1, rng=2, substeps=1)

        speeds = np.array([np.linalg.norm(t.velocities[0]) for t in trajectories])
        assert speeds.min() >= 0.5 and speeds.max() <= 1.5
        assert trajectories[0].dim == 3

    def test_params_dict_lists_field(self):
        """Test tuple parameters serialize as lists"""
        assert params_dict(ChargedParticleParams())["field"] == [0.0, 0.0, 1.0]


class TestOtherSystems:
    """Test suite for the oscillator, pendulum and joint chain"""

    def test_undamped_oscillator_is_cosine(self):
        """Test q = A cos(ωt) with zero damping"""
        trajectory = generate_oscillator(1, 30, 0.1, OscillatorParams(omega=2.0, gamma=0.0), rng=0)[0]
        amplitude = trajectory.positions[0, 0]

        expected = amplitude * np.cos(2.0 * trajectory.times)

        assert np.abs(trajectory.positions[:, 0] - expected).max() < 1e-8

    def test_chain_dimension(self):
        """Test the chain has one coordinate per joint"""
        trajectories = generate_chain(2, 5, params=ChainParams(joints=5), rng=0, substeps=10)

        assert trajectories[0].positions.shape == (6, 5)

    def test_pendulum_angles(self):
        """Test pendulum angles are one-dimensional"""
        trajectories = generate_pendulum_angles(3, 4, rng=0, substeps=10)

        assert [t.positions.shape for t in trajectories] == [(5, 1)] * 3


class TestNoiseAndSmoothing:
    """Test suite for measurement noise and Savitzky–Golay smoothing"""

    def test_sigma(self):
        """Test σ² = 1e-2·h"""
        assert measurement_sigma(0.1) == pytest.approx(np.sqrt(1e-3))

    def test_noise_level(self):
        """Test the empirical noise level matches σ"""
        trajectory = Trajectory(h=0.1, positions=np.zeros((20000, 1)))

        noisy = add_noise(trajectory, 0.05, np.random.default_rng(0))

        assert noisy.positions.std() == pytest.approx(0.05, rel=0.05)

    def test_zero_noise_is_identity(self):
        """Test σ = 0 returns the trajectory unchanged"""
        trajectory = Trajectory(h=0.1, positions=np.ones((3, 1)))

        assert add_noise(trajectory, 0.0, 0) is trajectory

    def test_negative_noise(self):
        """Test negative σ raises"""
        with pytest.raises(ValueError):
            add_noise(Trajectory(h=0.1, positions=np.ones((3, 1))), -1.0, 0)

    def test_savgol_keeps_cubics(self):
        """Test cubic trajectories pass through a cubic filter unchanged, boundaries included"""
        t = np.linspace(0.0, 2.0, 21)
        positions = np.stack([t ** 3 - t, 2 * t ** 2], axis=-1)

        smoothed = savgol_smooth(Trajectory(h=0.1, positions=positions), 11, 3)

        assert np.allclose(smoothed.positions, positions, atol=1e-10)

    def test_savgol_reduces_noise(self):
        """Test smoothing moves noisy samples towards the clean signal"""
        clean = Trajectory(h=0.1, positions=np.sin(0.1 * np.arange(100))[:, None])
        noisy = add_noise(clean, 0.05, np.random.default_rng(1))

        smoothed = savgol_smooth(noisy, 11, 3)

        noisy_error = np.abs(noisy.positions - clean.positions).mean()
        assert np.abs(smoothed.positions - clean.positions).mean() < noisy_error

    @pytest.mark.parametrize("window, polyorder", [(10, 3), (11, 11), (31, 3)])
    def test_savgol_invalid(self, window, polyorder):
        """Test even windows, oversized orders and windows longer than the data raise"""
        trajectory = Trajectory(h=0.1, positions=np.zeros((21, 1)))

        with pytest.raises(DatasetError):
            savgol_smooth(trajectory, window, polyorder)


class TestRendering:
    """Test suite for pendulum frames"""

    def test_frame_shape_and_range(self):
        """Test a single angle gives one (height, width) frame in [0, 1]"""
        frame = render_pendulum(0.3)

        assert frame.shape == (50, 30)
        assert frame.min() >= 0.0 and frame.max() <= 1.0

    def test_hanging_rod(self):
        """Test θ = 0 lights the pixels straight below the pivot only"""
        frame = render_pendulum(0.0)

        assert frame[20, 15] == pytest.approx(1.0)
        assert frame[20, 0] == 0.0
        assert frame[45, 15] == 0.0

    def test_frames_vary_continuously(self):
        """Test nearby angles give nearby frames"""
        frames = render_pendulum(np.array([0.2, 0.2001, 0.8]))

        assert np.abs(frames[0] - frames[1]).max() < 0.01
        assert np.abs(frames[0] - frames[2]).max() > 0.5

    def test_render_trajectory_flattens(self):
        """Test frames are flattened to 1500 coordinates per step"""
        angles = Trajectory(h=0.1, positions=np.zeros((4, 1)))

        frames = render_trajectory(angles)

        assert frames.positions.shape == (4, 1500)
        assert frames.h == 0.1
