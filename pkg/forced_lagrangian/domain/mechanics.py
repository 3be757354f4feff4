"""Learned physics: Lagrangian and force model variants evaluated on midpoint pairs"""
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

import torch

from .diffcore import DTYPE, ParameterStore, ScalarFunction, eval_with_input_grad
from .errors import DimensionMismatchError, ModelVariantError
from .networks import DropoutState, MlpSpec, ShapeList, mlp_forward

TensorFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def packed_size(dim: int) -> int:
    return dim * (dim + 1) // 2


def lower_triangular(packed: torch.Tensor, dim: int) -> torch.Tensor:
    """Unpack (..., d(d+1)/2) entries row-major over i >= j into (..., d, d)"""
    if packed.shape[-1] != packed_size(dim):
        raise DimensionMismatchError(
            f"expected {packed_size(dim)} packed entries for dimension {dim}, got {packed.shape[-1]}"
        )
    rows, cols = torch.tril_indices(dim, dim)
    matrix = packed.new_zeros(*packed.shape[:-1], dim, dim)
    matrix[..., rows, cols] = packed
    return matrix


def gram(factor: torch.Tensor) -> torch.Tensor:
    """ΛᵀΛ for a batch of square factors"""
    return torch.einsum("...ki,...kj->...ij", factor, factor)


def _check_pair(dim: int, q: torch.Tensor, v: torch.Tensor) -> None:
    if q.shape[-1] != dim or v.shape[-1] != dim:
        raise DimensionMismatchError(
            f"model of dimension {dim} got q of {q.shape[-1]} and v of {v.shape[-1]}"
        )


class LagrangianModel(ABC):
    """Scalar L(q̄, v̄) on R^d × R^d"""
    variant: str
    dim: int

    @abstractmethod
    def evaluate(self, params: ParameterStore, q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """L at each row of (q, v); returns shape (...,)"""
        pass

    def parameter_shapes(self) -> ShapeList:
        return []

    @abstractmethod
    def describe(self) -> Dict[str, Any]:
        """Serializable header describing the variant and its flags"""
        pass

    def __call__(self, params: ParameterStore, q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        _check_pair(self.dim, q, v)
        return self.evaluate(params, q, v)

    def as_function(self) -> ScalarFunction:
        """The model as f(θ, x) with x = (q̄, v̄) concatenated"""
        d = self.dim
        return ScalarFunction(lambda params, x: self(params, x[..., :d], x[..., d:]), input_dim=2 * d)


@dataclass(frozen=True)
class FreeLagrangian(LagrangianModel):
    """Unstructured MLP R^{2d} → R"""
    dim: int
    hidden_dim: int = 30
    hidden_layers: int = 3
    prefix: str = "lagrangian"
    variant: str = field(default="free", init=False)

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(2 * self.dim, 1, self.hidden_dim, self.hidden_layers)

    def parameter_shapes(self) -> ShapeList:
        return self.spec.parameter_shapes(self.prefix)

    def evaluate(self, params, q, v):
        return mlp_forward(self.spec, params, torch.cat([q, v], dim=-1), self.prefix).squeeze(-1)

    def describe(self):
        return {
            "variant": self.variant,
            "dim": self.dim,
            "hidden_dim": self.hidden_dim,
            "hidden_layers": self.hidden_layers,
            "prefix": self.prefix,
        }


@dataclass(frozen=True)
class MechanicalLagrangian(LagrangianModel):
    """
    L = v̄ᵀ M(q̄) v̄ − U with M = εI + ΛᵀΛ.

    The kinetic term carries no ½ factor; any such factor is absorbed into Λ.
    """
    dim: int
    epsilon: float = 1e-3
    u_depends_on_velocity: bool = False
    hidden_dim: int = 30
    hidden_layers: int = 3
    prefix: str = "lagrangian"
    variant: str = field(default="mechanical", init=False)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def mass_spec(self) -> MlpSpec:
        return MlpSpec(self.dim, packed_size(self.dim), self.hidden_dim, self.hidden_layers)

    @property
    def potential_spec(self) -> MlpSpec:
        inputs = 2 * self.dim if self.u_depends_on_velocity else self.dim
        return MlpSpec(inputs, 1, self.hidden_dim, self.hidden_layers)

    @property
    def mass_prefix(self) -> str:
        return f"{self.prefix}.mass"

    @property
    def potential_prefix(self) -> str:
        return f"{self.prefix}.potential"

    def parameter_shapes(self) -> ShapeList:
        return (
            self.mass_spec.parameter_shapes(self.mass_prefix)
            + self.potential_spec.parameter_shapes(self.potential_prefix)
        )

    def cholesky_factor(self, params: ParameterStore, q: torch.Tensor) -> torch.Tensor:
        packed = mlp_forward(self.mass_spec, params, q, self.mass_prefix)
        return lower_triangular(packed, self.dim)

    def mass_matrix(self, params: ParameterStore, q: torch.Tensor) -> torch.Tensor:
        eye = torch.eye(self.dim, dtype=DTYPE)
        return self.epsilon * eye + gram(self.cholesky_factor(params, q))

    def potential(self, params: ParameterStore, q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        inputs = torch.cat([q, v], dim=-1) if self.u_depends_on_velocity else q
        return mlp_forward(self.potential_spec, params, inputs, self.potential_prefix).squeeze(-1)

    def evaluate(self, params, q, v):
        kinetic = torch.einsum("...i,...ij,...j->...", v, self.mass_matrix(params, q), v)
        return kinetic - self.potential(params, q, v)

    def describe(self):
        return {
            "variant": self.variant,
            "dim": self.dim,
            "epsilon": self.epsilon,
            "u_depends_on_velocity": self.u_depends_on_velocity,
            "hidden_dim": self.hidden_dim,
            "hidden_layers": self.hidden_layers,
            "prefix": self.prefix,
        }


@dataclass(frozen=True)
class AnalyticLagrangian(LagrangianModel):
    """Hand-coded L(q, v) built from torch operations; has no parameters"""
    dim: int
    fn: TensorFn
    name: str = "analytic"
    variant: str = field(default="analytic", init=False)

    def evaluate(self, params, q, v):
        return self.fn(q, v)

    def describe(self):
        raise ModelVariantError(f"analytic Lagrangian '{self.name}' cannot be serialized")


def mass_matrix(model: LagrangianModel, params: ParameterStore, q: torch.Tensor) -> torch.Tensor:
    """M(q̄) of a mechanical Lagrangian"""
    if not isinstance(model, MechanicalLagrangian):
        raise ModelVariantError(f"mass_matrix requires the mechanical variant, got '{model.variant}'")
    if q.shape[-1] != model.dim:
        raise DimensionMismatchError(f"expected q of dimension {model.dim}, got {q.shape[-1]}")
    return model.mass_matrix(params, q)


def lagrangian_eval(
    model: LagrangianModel, params: ParameterStore, q: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    return model(params, q, v)


def lagrangian_energy(
    model: LagrangianModel, params: ParameterStore, q: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    """Energy E = v̄·∂L/∂v̄ − L, conserved by the unforced continuous flow"""
    d = model.dim
    value, grad = eval_with_input_grad(model.as_function(), params, torch.cat([q, v], dim=-1))
    return (v * grad[..., d:]).sum(-1) - value


class ForceModel(ABC):
    """Generalized force F(q̄, v̄) ∈ R^d"""
    variant: str
    dim: int

    @abstractmethod
    def evaluate(self, params: ParameterStore, q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        pass

    def parameter_shapes(self) -> ShapeList:
        return []

    @abstractmethod
    def describe(self) -> Dict[str, Any]:
        pass

    def __call__(self, params: ParameterStore, q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        _check_pair(self.dim, q, v)
        return self.evaluate(params, q, v)


@dataclass(frozen=True)
class ZeroForce(ForceModel):
    dim: int
    variant: str = field(default="zero", init=False)

    def evaluate(self, params, q, v):
        return torch.zeros_like(v)

    def describe(self):
        return {"variant": self.variant, "dim": self.dim}


@dataclass(frozen=True)
class FreeForce(ForceModel):
    """MLP R^{2d} → R^d; dropout on hidden layers while `dropout.training_mode` is set"""
    dim: int
    dropout: DropoutState = field(default_factory=DropoutState)
    hidden_dim: int = 30
    hidden_layers: int = 3
    prefix: str = "force.free"
    variant: str = field(default="free", init=False)

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(2 * self.dim, self.dim, self.hidden_dim, self.hidden_layers)

    def parameter_shapes(self):
        return self.spec.parameter_shapes(self.prefix)

    def evaluate(self, params, q, v):
        return mlp_forward(self.spec, params, torch.cat([q, v], dim=-1), self.prefix, self.dropout)

    def describe(self):
        return {
            "variant": self.variant,
            "dim": self.dim,
            "dropout_rate": self.dropout.rate,
            "dropout_seed": self.dropout.rng_seed,
            "hidden_dim": self.hidden_dim,
            "hidden_layers": self.hidden_layers,
            "prefix": self.prefix,
        }


class _DampingForce(ForceModel):
    """F = −K(q̄) v̄ with K = AᵀA"""

    @abstractmethod
    def damping_factor(self, params: ParameterStore, q: torch.Tensor) -> torch.Tensor:
        """Lower-triangular A, shape (..., d, d) or (d, d)"""
        pass

    def damping_matrix(self, params: ParameterStore, q: torch.Tensor) -> torch.Tensor:
        return gram(self.damping_factor(params, q))

    def evaluate(self, params, q, v):
        return -torch.einsum("...ij,...j->...i", self.damping_matrix(params, q), v)


@dataclass(frozen=True)
class RayleighForce(_DampingForce):
    """State-dependent Rayleigh dissipation with A(q̄) from an MLP"""
    dim: int
    hidden_dim: int = 30
    hidden_layers: int = 3
    prefix: str = "force.rayleigh"
    variant: str = field(default="rayleigh", init=False)

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(self.dim, packed_size(self.dim), self.hidden_dim, self.hidden_layers)

    def parameter_shapes(self):
        return self.spec.parameter_shapes(self.prefix)

    def damping_factor(self, params, q):
        return lower_triangular(mlp_forward(self.spec, params, q, self.prefix), self.dim)

    def describe(self):
        return {
            "variant": self.variant,
            "dim": self.dim,
            "hidden_dim": self.hidden_dim,
            "hidden_layers": self.hidden_layers,
            "prefix": self.prefix,
        }


@dataclass(frozen=True)
class LinearRayleighForce(_DampingForce):
    """Rayleigh dissipation with a constant factor A; ignores q̄"""
    dim: int
    prefix: str = "force.linear"
    variant: str = field(default="linear_rayleigh", init=False)

    @property
    def packed_name(self) -> str:
        return f"{self.prefix}.packed"

    def parameter_shapes(self):
        return [(self.packed_name, (packed_size(self.dim),))]

    def damping_factor(self, params, q):
        return lower_triangular(params.view(self.packed_name), self.dim)

    def describe(self):
        return {"variant": self.variant, "dim": self.dim, "prefix": self.prefix}


@dataclass(frozen=True)
class CombinedForce(ForceModel):
    """−K(q̄) v̄ + F_free(q̄, v̄)"""
    dissipation: _DampingForce
    free: FreeForce
    variant: str = field(default="combined", init=False)

    def __post_init__(self):
        if self.dissipation.dim != self.free.dim:
            raise DimensionMismatchError("combined force parts must share a dimension")

    @property
    def dim(self) -> int:
        return self.free.dim

    def parameter_shapes(self):
        return self.dissipation.parameter_shapes() + self.free.parameter_shapes()

    def evaluate(self, params, q, v):
        return self.dissipation.evaluate(params, q, v) + self.free.evaluate(params, q, v)

    def describe(self):
        return {
            "variant": self.variant,
            "dissipation": self.dissipation.describe(),
            "free": self.free.describe(),
        }


@dataclass(frozen=True)
class AnalyticForce(ForceModel):
    dim: int
    fn: TensorFn
    name: str = "analytic"
    variant: str = field(default="analytic", init=False)

    def evaluate(self, params, q, v):
        return self.fn(q, v)

    def describe(self):
        raise ModelVariantError(f"analytic force '{self.name}' cannot be serialized")


def force_eval(
    model: ForceModel, params: ParameterStore, q: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    return model(params, q, v)


def lagrangian_from_description(description: Mapping[str, Any]) -> LagrangianModel:
    options = dict(description)
    variant = options.pop("variant")
    if variant == "free":
        return FreeLagrangian(**options)
    if variant == "mechanical":
        return MechanicalLagrangian(**options)
    raise ModelVariantError(f"unknown Lagrangian variant '{variant}'")


def force_from_description(description: Mapping[str, Any]) -> ForceModel:
    options = dict(description)
    variant = options.pop("variant")
    if variant == "zero":
        return ZeroForce(**options)
    if variant == "free":
        dropout = DropoutState(rate=options.pop("dropout_rate"), rng_seed=options.pop("dropout_seed"))
        return FreeForce(dropout=dropout, **options)
    if variant == "rayleigh":
        return RayleighForce(**options)
    if variant == "linear_rayleigh":
        return LinearRayleighForce(**options)
    if variant == "combined":
        dissipation = force_from_description(options["dissipation"])
        free = force_from_description(options["free"])
        return CombinedForce(dissipation=dissipation, free=free)
    raise ModelVariantError(f"unknown force variant '{variant}'")


def build_lagrangian(
    variant: str,
    dim: int,
    hidden_dim: int = 30,
    hidden_layers: int = 3,
    epsilon: float = 1e-3,
    u_depends_on_velocity: bool = False,
) -> LagrangianModel:
    if variant == "free":
        return FreeLagrangian(dim, hidden_dim, hidden_layers)
    if variant == "mechanical":
        return MechanicalLagrangian(dim, epsilon, u_depends_on_velocity, hidden_dim, hidden_layers)
    raise ModelVariantError(f"unknown Lagrangian variant '{variant}'")


def build_force(
    variant: str,
    dim: int,
    hidden_dim: int = 30,
    hidden_layers: int = 3,
    dropout_rate: float = 0.5,
    seed: int = 0,
) -> ForceModel:
    def free() -> FreeForce:
        return FreeForce(dim, DropoutState(rate=dropout_rate, rng_seed=seed), hidden_dim, hidden_layers)

    if variant == "zero":
        return ZeroForce(dim)
    if variant == "free":
        return free()
    if variant == "rayleigh":
        return RayleighForce(dim, hidden_dim, hidden_layers)
    if variant == "linear_rayleigh":
        return LinearRayleighForce(dim)
    if variant == "combined":
        return CombinedForce(RayleighForce(dim, hidden_dim, hidden_layers), free())
    if variant == "combined_linear":
        return CombinedForce(LinearRayleighForce(dim), free())
    raise ModelVariantError(f"unknown force variant '{variant}'")


def set_training_mode(force: ForceModel, training: bool) -> None:
    """Toggle dropout on every free force network inside `force`"""
    if isinstance(force, FreeForce):
        force.dropout.training_mode = training
    elif isinstance(force, CombinedForce):
        set_training_mode(force.free, training)
