"""
Discretization of position windows.

Midpoint pairs and symmetric multistep stencils turn positions into
(q̄, v̄) pairs; `del_residual` evaluates the discrete forced Euler–Lagrange
equations on a window for a given Lagrangian and force model.
"""
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import factorial
from typing import Tuple

import torch

from .diffcore import DTYPE, ParameterStore, as_tensor, eval_with_input_grad
from .errors import DimensionMismatchError, InvalidStencilError
from .mechanics import ForceModel, LagrangianModel

MIDPOINT = "midpoint"
MULTISTEP = "multistep"

# Order-4 position stencil over offsets -2..2, used as ground truth for k = 2
ORDER4_QBAR = (Fraction(-1, 12), Fraction(8, 12), Fraction(0), Fraction(4, 12), Fraction(1, 12))


@dataclass(frozen=True)
class Stencil:
    """
    Symmetric multistep stencil of order 2k.

    `velocity_coeffs` and `qbar_coeffs` are indexed by offset -k..k:
    v̄_n = (1/h) Σ c_s q_{n+s} and q̄_n = Σ a_s q_{n+s}.
    """
    k: int
    delta: Tuple[float, ...]
    velocity_coeffs: Tuple[float, ...]
    qbar_coeffs: Tuple[float, ...]

    @property
    def width(self) -> int:
        return 2 * self.k + 1


def _delta(j: int, k: int) -> Fraction:
    sign = 1 if (j - 1) % 2 == 0 else -1
    return Fraction(sign, j) * Fraction(factorial(k) ** 2, factorial(k - j) * factorial(k + j))


@lru_cache(maxsize=None)
def multistep_coeffs(k: int) -> Stencil:
    """
    Optimal-order central stencils for v̄ and q̄ with half-width k.

    Raises:
        InvalidStencilError: If k < 1 or the stencils fail their consistency checks
    """
    if not isinstance(k, int) or k < 1:
        raise InvalidStencilError(f"stencil half-width must be an integer >= 1, got {k!r}")

    delta = [_delta(j, k) for j in range(1, k + 1)]
    velocity = [-delta[-s - 1] for s in range(-k, 0)] + [Fraction(0)] + delta
    # q̄_n = q_{n+1} - h v̄_n
    qbar = [(1 if s == 1 else 0) - c for s, c in zip(range(-k, k + 1), velocity)]

    if k == 2 and tuple(qbar) != ORDER4_QBAR:
        raise InvalidStencilError(f"order-4 position stencil mismatch: {qbar}")
    if sum(qbar) != 1 or sum(s * a for s, a in zip(range(-k, k + 1), qbar)) != 0:
        raise InvalidStencilError(f"position stencil for k={k} is inconsistent")
    if sum(s * c for s, c in zip(range(-k, k + 1), velocity)) != 1:
        raise InvalidStencilError(f"velocity stencil for k={k} is inconsistent")

    return Stencil(
        k=k,
        delta=tuple(float(d) for d in delta),
        velocity_coeffs=tuple(float(c) for c in velocity),
        qbar_coeffs=tuple(float(a) for a in qbar),
    )


@dataclass(frozen=True)
class Scheme:
    """Discretization descriptor: midpoint or symmetric multistep of order 2k"""
    kind: str = MIDPOINT
    h: float = 0.1
    k: int = 1

    def __post_init__(self):
        if self.kind not in (MIDPOINT, MULTISTEP):
            raise ValueError(f"unknown scheme kind '{self.kind}'")
        if not self.h > 0:
            raise ValueError(f"step size must be positive, got {self.h}")
        if self.kind == MULTISTEP:
            multistep_coeffs(self.k)

    @classmethod
    def midpoint(cls, h: float) -> "Scheme":
        return cls(MIDPOINT, h, 1)

    @classmethod
    def multistep(cls, h: float, k: int) -> "Scheme":
        return cls(MULTISTEP, h, k)

    @property
    def window_size(self) -> int:
        return 3 if self.kind == MIDPOINT else 4 * self.k + 1

    @property
    def stencil(self) -> Stencil:
        return multistep_coeffs(self.k)


def midpoint_pair(q_a, q_b, h: float) -> Tuple[torch.Tensor, torch.Tensor]:
    q_a, q_b = as_tensor(q_a), as_tensor(q_b)
    return (q_a + q_b) / 2, (q_b - q_a) / h


def multistep_pair(window, h: float, stencil: Stencil) -> Tuple[torch.Tensor, torch.Tensor]:
    """(q̄_n, v̄_n) from a (..., 2k+1, d) window centred at n"""
    window = as_tensor(window)
    if window.dim() < 2 or window.shape[-2] != stencil.width:
        raise DimensionMismatchError(
            f"stencil k={stencil.k} needs windows of {stencil.width} points, got shape {tuple(window.shape)}"
        )
    velocity = torch.tensor(stencil.velocity_coeffs, dtype=DTYPE)
    qbar = torch.tensor(stencil.qbar_coeffs, dtype=DTYPE)
    v = torch.einsum("s,...sd->...d", velocity, window) / h
    q = torch.einsum("s,...sd->...d", qbar, window)
    return q, v


def _lagrangian_grads(
    L: LagrangianModel, params: ParameterStore, q: torch.Tensor, v: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.cat([q, v], dim=-1)
    batch_shape = x.shape[:-1]
    _, grad = eval_with_input_grad(L.as_function(), params, x.reshape(-1, x.shape[-1]))
    grad = grad.reshape(*batch_shape, -1)
    return grad[..., : L.dim], grad[..., L.dim:]


def _check_window(L: LagrangianModel, window: torch.Tensor, scheme: Scheme) -> None:
    if window.dim() < 2 or window.shape[-2] != scheme.window_size:
        raise DimensionMismatchError(
            f"{scheme.kind} scheme needs windows of {scheme.window_size} points, got shape {tuple(window.shape)}"
        )
    if window.shape[-1] != L.dim:
        raise DimensionMismatchError(f"model dimension {L.dim} does not match window dimension {window.shape[-1]}")


def del_residual(
    L: LagrangianModel,
    F: ForceModel,
    params: ParameterStore,
    window,
    scheme: Scheme,
) -> torch.Tensor:
    """
    Discrete forced Euler–Lagrange residual at the centre of each window.

    Args:
        L: Lagrangian model
        F: Force model
        params: Parameters of both models
        window: Positions of shape (..., W, d), W = scheme.window_size
        scheme: Midpoint (W = 3) or multistep k (W = 4k + 1)

    Returns:
        Residual of shape (..., d). The midpoint residual is
        ∇_qL₋ + (2/h)∇_vL₋ + ∇_qL₊ − (2/h)∇_vL₊ + F₋ + F₊ and carries no h/2 prefactor.
    """
    window = as_tensor(window)
    _check_window(L, window, scheme)
    h = scheme.h

    if scheme.kind == MIDPOINT:
        q_pairs, v_pairs = midpoint_pair(window[..., :-1, :], window[..., 1:, :], h)
        grad_q, grad_v = _lagrangian_grads(L, params, q_pairs, v_pairs)
        forces = F(params, q_pairs, v_pairs)
        return (
            grad_q[..., 0, :] + (2 / h) * grad_v[..., 0, :]
            + grad_q[..., 1, :] - (2 / h) * grad_v[..., 1, :]
            + forces[..., 0, :] + forces[..., 1, :]
        )

    stencil = scheme.stencil
    k = stencil.k
    # Inner windows centred at offsets -k..k around the window centre 2k
    inner = torch.stack([window[..., s: s + 2 * k + 1, :] for s in range(2 * k + 1)], dim=-3)
    q_bar, v_bar = multistep_pair(inner, h, stencil)
    grad_q, grad_v = _lagrangian_grads(L, params, q_bar, v_bar)
    forces = F(params, q_bar, v_bar)

    # ∂q̄_{n+s}/∂q_n = a_{-s} and ∂v̄_{n+s}/∂q_n = c_{-s}/h
    position_weights = torch.tensor(stencil.qbar_coeffs[::-1], dtype=DTYPE)
    velocity_weights = torch.tensor(stencil.velocity_coeffs[::-1], dtype=DTYPE)
    action = h * torch.einsum("s,...sd->...d", position_weights, grad_q) + torch.einsum(
        "s,...sd->...d", velocity_weights, grad_v
    )
    return action + h * torch.einsum("s,...sd->...d", position_weights, forces)


def windows(positions, size: int) -> torch.Tensor:
    """All consecutive windows of `size` points: (N+1, d) → (N+2-size, size, d)"""
    positions = as_tensor(positions)
    if positions.shape[0] < size:
        return positions.new_zeros(0, size, positions.shape[-1])
    return positions.unfold(0, size, 1).transpose(-1, -2)
