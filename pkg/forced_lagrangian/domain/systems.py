"""
Ground-truth systems and dataset generation.

Damped double pendulum, dissipative charged particle, damped pendulum
pixels, damped harmonic oscillator and a coupled joint chain, integrated
with fixed-step RK4 and sampled every h.
"""
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from scipy.signal import savgol_filter

from .errors import DatasetError
from .models import Trajectory

StateField = Callable[[np.ndarray], np.ndarray]
RngLike = Union[np.random.Generator, int, None]

DEFAULT_SUBSTEPS = 100


def _rng(rng: RngLike) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


@dataclass(frozen=True)
class DoublePendulumParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    g: float = 9.81
    b1: float = 0.5
    b2: float = 0.5

    def __post_init__(self):
        if min(self.m1, self.m2, self.l1, self.l2) <= 0:
            raise ValueError("masses and lengths must be positive")
        if min(self.b1, self.b2) < 0:
            raise ValueError("damping coefficients must be non-negative")


@dataclass(frozen=True)
class ChargedParticleParams:
    charge: float = 1.0
    mass: float = 1.0
    damping: float = 0.1
    field: Tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.mass <= 0 or self.damping < 0:
            raise ValueError("mass must be positive and damping non-negative")


@dataclass(frozen=True)
class PendulumParams:
    """Damped simple pendulum θ̈ = −(g/l) sin θ − b θ̇"""
    g: float = 9.81
    length: float = 1.0
    damping: float = 0.5


@dataclass(frozen=True)
class OscillatorParams:
    """Damped harmonic oscillator q̈ = −ω² q − γ q̇"""
    omega: float = 1.0
    gamma: float = 0.1


@dataclass(frozen=True)
class ChainParams:
    """Pendulum chain with nearest-neighbour springs, standing in for joint-angle recordings"""
    joints: int = 4
    g: float = 9.81
    length: float = 1.0
    coupling: float = 2.0
    damping: float = 0.2


def dp_ode(state: np.ndarray, p: DoublePendulumParams) -> np.ndarray:
    """Derivative of (θ₁, θ₂, θ̇₁, θ̇₂); leading axes are batch axes"""
    t1, t2, w1, w2 = np.moveaxis(np.asarray(state, dtype=np.float64), -1, 0)
    m1, m2, l1, l2, g = p.m1, p.m2, p.l1, p.l2, p.g
    delta = t1 - t2
    denominator = 2 * m1 + m2 - m2 * np.cos(2 * t1 - 2 * t2)
    a1 = (
        -g * (2 * m1 + m2) * np.sin(t1)
        - m2 * g * np.sin(t1 - 2 * t2)
        - 2 * np.sin(delta) * m2 * (w2 ** 2 * l2 + w1 ** 2 * l1 * np.cos(delta))
    ) / (l1 * denominator) - p.b1 * w1
    a2 = (
        2 * np.sin(delta) * (
            w1 ** 2 * l1 * (m1 + m2)
            + g * (m1 + m2) * np.cos(t1)
            + w2 ** 2 * l2 * m2 * np.cos(delta)
        )
    ) / (l2 * denominator) - p.b2 * w2
    return np.stack([w1, w2, a1, a2], axis=-1)


def dp_energy(state: np.ndarray, p: DoublePendulumParams) -> np.ndarray:
    """Total mechanical energy of the double pendulum"""
    t1, t2, w1, w2 = np.moveaxis(np.asarray(state, dtype=np.float64), -1, 0)
    kinetic = (
        0.5 * (p.m1 + p.m2) * p.l1 ** 2 * w1 ** 2
        + 0.5 * p.m2 * p.l2 ** 2 * w2 ** 2
        + p.m2 * p.l1 * p.l2 * w1 * w2 * np.cos(t1 - t2)
    )
    potential = -(p.m1 + p.m2) * p.g * p.l1 * np.cos(t1) - p.m2 * p.g * p.l2 * np.cos(t2)
    return kinetic + potential


def cp_ode(state: np.ndarray, p: ChargedParticleParams) -> np.ndarray:
    """Derivative of (x, y, z, vₓ, v_y, v_z): a = (q/m)(v × B) − (b/m) v"""
    state = np.asarray(state, dtype=np.float64)
    velocity = state[..., 3:]
    field = np.broadcast_to(np.asarray(p.field, dtype=np.float64), velocity.shape)
    accel = (p.charge / p.mass) * np.cross(velocity, field) - (p.damping / p.mass) * velocity
    return np.concatenate([velocity, accel], axis=-1)


def pendulum_ode(state: np.ndarray, p: PendulumParams) -> np.ndarray:
    theta, omega = state[..., 0], state[..., 1]
    accel = -(p.g / p.length) * np.sin(theta) - p.damping * omega
    return np.stack([omega, accel], axis=-1)


def oscillator_ode(state: np.ndarray, p: OscillatorParams) -> np.ndarray:
    q, v = state[..., 0], state[..., 1]
    return np.stack([v, -p.omega ** 2 * q - p.gamma * v], axis=-1)


def chain_ode(state: np.ndarray, p: ChainParams) -> np.ndarray:
    n = p.joints
    q, v = state[..., :n], state[..., n:]
    padded = np.concatenate([q[..., :1], q, q[..., -1:]], axis=-1)
    laplacian = padded[..., :-2] - 2 * q + padded[..., 2:]
    accel = -(p.g / p.length) * np.sin(q) + p.coupling * laplacian - p.damping * v
    return np.concatenate([v, accel], axis=-1)


def integrate_states(
    ode: StateField,
    x0: np.ndarray,
    h: float,
    substeps: int,
    N: int,
) -> np.ndarray:
    """
    Classical RK4 with step h/substeps, sampled every h.

    Args:
        ode: State derivative, vectorised over leading axes
        x0: Initial state(s), shape (n,) or (B, n)

    Returns:
        Sampled states of shape (N+1, n) or (B, N+1, n)

    Raises:
        DatasetError: If the state becomes non-finite; `partial` holds the samples so far
    """
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    dt = h / substeps
    x = np.array(x0, dtype=np.float64)
    samples = [x.copy()]
    for n in range(N):
        for _ in range(substeps):
            k1 = ode(x)
            k2 = ode(x + 0.5 * dt * k1)
            k3 = ode(x + 0.5 * dt * k2)
            k4 = ode(x + dt * k3)
            x = x + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(x).all():
            raise DatasetError(
                f"integration produced a non-finite state at sample {n + 1}",
                partial=np.stack(samples, axis=-2),
            )
        samples.append(x.copy())
    return np.stack(samples, axis=-2)


def integrate(
    ode: StateField,
    x0: np.ndarray,
    h: float,
    substeps: int,
    N: int,
    position_dim: Optional[int] = None,
) -> Trajectory:
    """Integrate one initial state into a Trajectory of the first `position_dim` coordinates"""
    states = integrate_states(ode, x0, h, substeps, N)
    d = position_dim if position_dim is not None else states.shape[-1] // 2
    velocities = states[:, d: 2 * d] if states.shape[-1] >= 2 * d else None
    return Trajectory(h=h, positions=states[:, :d], velocities=velocities)


def _trajectories(states: np.ndarray, h: float, d: int) -> List[Trajectory]:
    return [Trajectory(h=h, positions=s[:, :d], velocities=s[:, d: 2 * d]) for s in states]


def add_noise(traj: Trajectory, sigma: float, rng: RngLike) -> Trajectory:
    """Add i.i.d. N(0, σ²) to every position coordinate"""
    if sigma < 0:
        raise ValueError(f"noise level must be non-negative, got {sigma}")
    if sigma == 0:
        return traj
    noise = _rng(rng).normal(0.0, sigma, size=traj.positions.shape)
    return traj.with_positions(traj.positions + noise)


def measurement_sigma(h: float, variance_per_step: float = 1e-2) -> float:
    """σ with σ² = variance_per_step · h"""
    return float(np.sqrt(variance_per_step * h))


def savgol_smooth(traj: Trajectory, window: int, polyorder: int) -> Trajectory:
    """Per-coordinate Savitzky–Golay smoothing with polynomial fits on the boundary windows"""
    if window < 1 or window % 2 == 0:
        raise DatasetError(f"Savitzky-Golay window must be a positive odd integer, got {window}")
    if not 0 <= polyorder < window:
        raise DatasetError(f"polyorder must lie in [0, window), got {polyorder}")
    if window > traj.positions.shape[0]:
        raise DatasetError(f"window {window} exceeds trajectory length {traj.positions.shape[0]}")
    smoothed = savgol_filter(traj.positions, window, polyorder, axis=0, mode="interp")
    return traj.with_positions(smoothed)


def render_pendulum(
    theta: Union[float, np.ndarray],
    width: int = 30,
    height: int = 50,
    rod_length: Optional[float] = None,
    half_thickness: float = 1.0,
) -> np.ndarray:
    """
    Grayscale frame(s) in [0, 1] of a rod hanging from the top-centre pivot.

    θ = 0 points straight down. Pixel intensity falls off linearly over one
    pixel around the rod's half thickness, so frames vary continuously in θ.

    Returns:
        (height, width) for a scalar angle, (n, height, width) for an array
    """
    angles = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    pivot = np.array([width / 2, 0.1 * height])
    length = 0.6 * height if rod_length is None else rod_length
    tips = pivot + length * np.stack([np.sin(angles), np.cos(angles)], axis=-1)

    xs, ys = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    pixels = np.stack([xs, ys], axis=-1)[None]  # (1, H, W, 2)
    rod = (tips - pivot)[:, None, None, :]  # (n, 1, 1, 2)
    offset = pixels - pivot
    along = np.clip((offset * rod).sum(-1) / (rod ** 2).sum(-1), 0.0, 1.0)
    distance = np.linalg.norm(offset - along[..., None] * rod, axis=-1)
    frames = np.clip(half_thickness + 0.5 - distance, 0.0, 1.0)
    return frames[0] if np.ndim(theta) == 0 else frames


def generate_double_pendulum(
    count: int,
    steps: int,
    h: float = 0.1,
    params: DoublePendulumParams = DoublePendulumParams(),
    rng: RngLike = None,
    angle_range: float = np.pi / 6,
    substeps: int = DEFAULT_SUBSTEPS,
) -> List[Trajectory]:
    """Angles uniform in (−angle_range, angle_range), zero initial velocity"""
    generator = _rng(rng)
    x0 = np.zeros((count, 4))
    x0[:, :2] = generator.uniform(-angle_range, angle_range, size=(count, 2))
    states = integrate_states(lambda x: dp_ode(x, params), x0, h, substeps, steps)
    return _trajectories(states, h, 2)


def generate_charged_particle(
    count: int,
    steps: int,
    h: float = 0.1,
    params: ChargedParticleParams = ChargedParticleParams(),
    rng: RngLike = None,
    speed_range: Tuple[float, float] = (0.5, 1.5),
    substeps: int = DEFAULT_SUBSTEPS,
) -> List[Trajectory]:
    """Positions uniform in [−1, 1]³, velocity direction uniform on the sphere"""
    generator = _rng(rng)
    positions = generator.uniform(-1.0, 1.0, size=(count, 3))
    directions = generator.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    speeds = generator.uniform(*speed_range, size=(count, 1))
    x0 = np.concatenate([positions, speeds * directions], axis=-1)
    states = integrate_states(lambda x: cp_ode(x, params), x0, h, substeps, steps)
    return _trajectories(states, h, 3)


def generate_pendulum_angles(
    count: int,
    steps: int,
    h: float = 0.1,
    params: PendulumParams = PendulumParams(),
    rng: RngLike = None,
    angle_range: float = np.pi / 6,
    substeps: int = DEFAULT_SUBSTEPS,
) -> List[Trajectory]:
    generator = _rng(rng)
    x0 = np.zeros((count, 2))
    x0[:, 0] = generator.uniform(-angle_range, angle_range, size=count)
    states = integrate_states(lambda x: pendulum_ode(x, params), x0, h, substeps, steps)
    return _trajectories(states, h, 1)


def render_trajectory(angles: Trajectory, width: int = 30, height: int = 50) -> Trajectory:
    """Flattened frames (N+1, height·width) of an angle trajectory"""
    frames = render_pendulum(angles.positions[:, 0], width, height)
    return Trajectory(h=angles.h, positions=frames.reshape(frames.shape[0], -1))


def generate_oscillator(
    count: int,
    steps: int,
    h: float = 0.1,
    params: OscillatorParams = OscillatorParams(),
    rng: RngLike = None,
    amplitude_range: Tuple[float, float] = (0.5, 1.5),
    substeps: int = DEFAULT_SUBSTEPS,
) -> List[Trajectory]:
    generator = _rng(rng)
    x0 = np.zeros((count, 2))
    x0[:, 0] = generator.uniform(*amplitude_range, size=count)
    states = integrate_states(lambda x: oscillator_ode(x, params), x0, h, substeps, steps)
    return _trajectories(states, h, 1)


def generate_chain(
    count: int,
    steps: int,
    h: float = 0.1,
    params: ChainParams = ChainParams(),
    rng: RngLike = None,
    angle_range: float = np.pi / 6,
    substeps: int = DEFAULT_SUBSTEPS,
) -> List[Trajectory]:
    generator = _rng(rng)
    x0 = np.zeros((count, 2 * params.joints))
    x0[:, : params.joints] = generator.uniform(-angle_range, angle_range, size=(count, params.joints))
    states = integrate_states(lambda x: chain_ode(x, params), x0, h, substeps, steps)
    return _trajectories(states, h, params.joints)


def params_dict(params) -> dict:
    data = asdict(params)
    return {key: list(value) if isinstance(value, tuple) else value for key, value in data.items()}
