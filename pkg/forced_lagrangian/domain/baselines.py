"""Baselines trained on midpoint states: explicit forced Euler–Lagrange (GLNN) and Neural ODE"""
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping

import torch

from .diffcore import DiffRequest, ParameterStore, as_tensor, differentiate
from .discretization import midpoint_pair
from .errors import DimensionMismatchError, ModelVariantError, SingularHessianError
from .mechanics import (
    ForceModel,
    LagrangianModel,
    ZeroForce,
    force_from_description,
    lagrangian_from_description,
)
from .networks import MlpSpec, ShapeList, mlp_forward

VectorField = Callable[[torch.Tensor], torch.Tensor]


def glnn_accel(
    L: LagrangianModel,
    F: ForceModel,
    params: ParameterStore,
    q,
    v,
    nan_on_singular: bool = False,
) -> torch.Tensor:
    """
    q̈ = S⁻¹(∂L/∂q − (∂²L/∂v∂q)·v + F) with S = ∂²L/∂v², solved without forming S⁻¹.

    Raises:
        SingularHessianError: If S is singular at some point and `nan_on_singular` is off;
            otherwise those rows come back as NaN
    """
    q, v = as_tensor(q), as_tensor(v)
    single = q.dim() == 1
    if single:
        q, v = q.unsqueeze(0), v.unsqueeze(0)
    d = L.dim
    result = differentiate(
        L.as_function(),
        params,
        torch.cat([q, v], dim=-1),
        DiffRequest(want_value=False, want_input_grad=True, want_input_hessian=True),
    )
    grad_q = result.input_grad[:, :d]
    hessian = result.input_hessian
    S = hessian[:, d:, d:]
    mixed = hessian[:, d:, :d]
    rhs = grad_q - torch.einsum("bij,bj->bi", mixed, v) + F(params, q, v)

    accel, info = torch.linalg.solve_ex(S, rhs)
    singular = (info != 0) | ~torch.isfinite(accel).all(-1)
    if singular.any():
        if not nan_on_singular:
            index = int(torch.nonzero(singular)[0])
            raise SingularHessianError(
                f"velocity Hessian is singular at q={q[index].tolist()}, v={v[index].tolist()}",
                q=q[index].detach().numpy(),
                v=v[index].detach().numpy(),
            )
        accel = torch.where(singular.unsqueeze(-1), torch.full_like(accel, float("nan")), accel)
    return accel[0] if single else accel


def rk4_step(field: VectorField, x: torch.Tensor, h: float) -> torch.Tensor:
    k1 = field(x)
    k2 = field(x + 0.5 * h * k1)
    k3 = field(x + 0.5 * h * k2)
    k4 = field(x + h * k3)
    return x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


class BaselineKind(ABC):
    """A state-space vector field on midpoint states x̄ = (q̄, v̄)"""
    kind: str
    dim: int

    @abstractmethod
    def vector_field(self, params: ParameterStore, state: torch.Tensor, force_on: bool = True) -> torch.Tensor:
        pass

    @abstractmethod
    def parameter_shapes(self) -> ShapeList:
        pass

    @abstractmethod
    def describe(self) -> Dict[str, Any]:
        pass


@dataclass(frozen=True)
class GlnnBaseline(BaselineKind):
    lagrangian: LagrangianModel
    force: ForceModel
    nan_on_singular: bool = False
    kind: str = field(default="glnn", init=False)

    @property
    def dim(self) -> int:
        return self.lagrangian.dim

    def vector_field(self, params, state, force_on=True):
        d = self.dim
        q, v = state[..., :d], state[..., d:]
        force = self.force if force_on else ZeroForce(d)
        accel = glnn_accel(self.lagrangian, force, params, q, v, self.nan_on_singular)
        return torch.cat([v, accel], dim=-1)

    def parameter_shapes(self):
        return self.lagrangian.parameter_shapes() + self.force.parameter_shapes()

    def describe(self):
        return {
            "kind": self.kind,
            "lagrangian": self.lagrangian.describe(),
            "force": self.force.describe(),
        }


@dataclass(frozen=True)
class NeuralOdeBaseline(BaselineKind):
    """Unstructured vector field MLP R^{2d} → R^{2d}; has no separable force"""
    dim: int
    hidden_dim: int = 30
    hidden_layers: int = 3
    prefix: str = "node"
    kind: str = field(default="node", init=False)

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(2 * self.dim, 2 * self.dim, self.hidden_dim, self.hidden_layers)

    def vector_field(self, params, state, force_on=True):
        return mlp_forward(self.spec, params, state, self.prefix)

    def parameter_shapes(self):
        return self.spec.parameter_shapes(self.prefix)

    def describe(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "hidden_dim": self.hidden_dim,
            "hidden_layers": self.hidden_layers,
            "prefix": self.prefix,
        }


def baseline_from_description(description: Mapping[str, Any], nan_on_singular: bool = False) -> BaselineKind:
    """Rebuild a baseline from the header written by `describe`"""
    options = dict(description)
    kind = options.pop("kind")
    if kind == "glnn":
        return GlnnBaseline(
            lagrangian_from_description(options["lagrangian"]),
            force_from_description(options["force"]),
            nan_on_singular,
        )
    if kind == "node":
        return NeuralOdeBaseline(**options)
    raise ModelVariantError(f"unknown baseline kind '{kind}'")


def midpoint_state(q_a, q_b, h: float) -> torch.Tensor:
    """x̄(q_a, q_b) = (q̄, v̄) concatenated"""
    q, v = midpoint_pair(q_a, q_b, h)
    return torch.cat([q, v], dim=-1)


def baseline_step(
    kind: BaselineKind,
    params: ParameterStore,
    state,
    h: float,
    force_on: bool = True,
) -> torch.Tensor:
    """One RK4 step of size h of the baseline's state ODE"""
    state = as_tensor(state)
    if state.shape[-1] != 2 * kind.dim:
        raise DimensionMismatchError(f"expected states of dimension {2 * kind.dim}, got {state.shape[-1]}")
    return rk4_step(lambda x: kind.vector_field(params, x, force_on), state, h)


def baseline_loss(kind: BaselineKind, params: ParameterStore, windows, h: float) -> torch.Tensor:
    """Mean over (q_{n-1}, q_n, q_{n+1}) windows of ‖step(x̄(q_{n-1},q_n)) − x̄(q_n,q_{n+1})‖²"""
    windows = as_tensor(windows)
    if windows.dim() != 3 or windows.shape[1] != 3:
        raise DimensionMismatchError(f"expected windows of shape (n, 3, d), got {tuple(windows.shape)}")
    current = midpoint_state(windows[:, 0], windows[:, 1], h)
    target = midpoint_state(windows[:, 1], windows[:, 2], h)
    predicted = baseline_step(kind, params, current, h)
    return ((predicted - target) ** 2).sum(-1).mean()


def recover_position(state: torch.Tensor, h: float) -> torch.Tensor:
    """q_{n+1} = q̄ + (h/2)·v̄, the exact inverse of the midpoint pair"""
    d = state.shape[-1] // 2
    return state[..., :d] + (h / 2) * state[..., d:]


def baseline_rollout(
    kind: BaselineKind,
    params: ParameterStore,
    q0,
    q1,
    N: int,
    h: float,
    force_on: bool = True,
) -> torch.Tensor:
    """
    Positions q̂_0..q̂_N from iterated RK4 steps on midpoint states.

    Rows become NaN from the first step where the GLNN velocity Hessian is
    singular; the NeuralODE ignores `force_on`.
    """
    if N < 1:
        raise ValueError(f"rollout length must be >= 1, got {N}")
    q0, q1 = as_tensor(q0), as_tensor(q1)
    params = params.detached()
    positions = [q0, q1]
    state = midpoint_state(q0, q1, h)
    with torch.no_grad():
        for _ in range(N - 1):
            state = baseline_step(kind, params, state, h, force_on)
            positions.append(recover_position(state, h))
    return torch.stack(positions, dim=-2)
