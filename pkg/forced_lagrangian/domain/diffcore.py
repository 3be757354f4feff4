"""
Differentiation engine for scalar parametric functions.

Every learned quantity in the package is a scalar function f(θ, x) evaluated
row-wise on a batch of small inputs x ∈ R^m (m ≤ 2d). The engine provides
exact input gradients and input Hessians of such functions, and exact
parameter gradients of any scalar assembled from those input derivatives
(third-order mixed derivatives overall). All arithmetic is float64.
"""
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import DifferentiationError, DimensionMismatchError

DTYPE = torch.float64


@dataclass(frozen=True)
class ParameterSlice:
    """A named, shaped window into the flat parameter array"""
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.size


class ParameterStore:
    """
    Flat float64 parameter array with named slices per network.

    The store is the single mutable object during training: networks read
    their weights through `view`, the optimizer writes `values` in place.
    """

    def __init__(self, values: torch.Tensor, layout: Sequence[ParameterSlice]):
        if not isinstance(values, torch.Tensor):
            values = torch.as_tensor(np.asarray(values, dtype=np.float64))
        if values.dtype != DTYPE:
            values = values.to(DTYPE)
        if values.dim() != 1:
            raise DimensionMismatchError(
                f"parameter values must be a flat array, got shape {tuple(values.shape)}"
            )

        layout = tuple(layout)
        cursor = 0
        seen = set()
        for parameter_slice in sorted(layout, key=lambda s: s.offset):
            if parameter_slice.name in seen:
                raise ValueError(f"duplicate parameter slice '{parameter_slice.name}'")
            if parameter_slice.offset < cursor:
                raise ValueError(f"parameter slice '{parameter_slice.name}' overlaps its predecessor")
            if parameter_slice.stop > values.numel():
                raise ValueError(f"parameter slice '{parameter_slice.name}' lies out of bounds")
            seen.add(parameter_slice.name)
            cursor = parameter_slice.stop
        if sum(s.size for s in layout) != values.numel():
            raise ValueError(
                f"layout covers {sum(s.size for s in layout)} entries but store holds {values.numel()}"
            )

        self.values = values
        self.layout = layout
        self._index: Dict[str, ParameterSlice] = {s.name: s for s in layout}

    @classmethod
    def empty(cls) -> "ParameterStore":
        return cls(torch.zeros(0, dtype=DTYPE), [])

    @classmethod
    def from_arrays(cls, arrays: Iterable[Tuple[str, np.ndarray]]) -> "ParameterStore":
        """Pack named arrays back to back, in the given order"""
        layout: List[ParameterSlice] = []
        chunks: List[np.ndarray] = []
        offset = 0
        for name, array in arrays:
            array = np.asarray(array, dtype=np.float64)
            layout.append(ParameterSlice(name=name, offset=offset, shape=tuple(array.shape)))
            chunks.append(array.reshape(-1))
            offset += array.size
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(torch.from_numpy(flat.copy()), layout)

    def __len__(self) -> int:
        return self.values.numel()

    def names(self) -> List[str]:
        return [s.name for s in self.layout]

    def view(self, name: str) -> torch.Tensor:
        """Shaped view of one slice; differentiable with respect to `values`"""
        try:
            parameter_slice = self._index[name]
        except KeyError:
            raise KeyError(f"no parameter slice named '{name}'") from None
        return self.values[parameter_slice.offset:parameter_slice.stop].reshape(parameter_slice.shape)

    def with_values(self, values: torch.Tensor) -> "ParameterStore":
        return ParameterStore(values, self.layout)

    def detached(self) -> "ParameterStore":
        return self.with_values(self.values.detach())

    def trainable(self) -> "ParameterStore":
        """Independent copy whose values are an autograd leaf"""
        return self.with_values(self.values.detach().clone().requires_grad_(True))

    def to_list(self) -> List[float]:
        return self.values.detach().tolist()


@dataclass(frozen=True)
class ScalarFunction:
    """A scalar function f(θ, x) declared on inputs of dimension `input_dim`"""
    fn: Callable[[ParameterStore, torch.Tensor], torch.Tensor]
    input_dim: int

    def __call__(self, params: ParameterStore, x: torch.Tensor) -> torch.Tensor:
        return self.fn(params, x).reshape(x.shape[:-1])


@dataclass(frozen=True)
class DiffRequest:
    """Which derivatives an evaluation should produce"""
    want_value: bool = True
    want_input_grad: bool = False
    want_input_hessian: bool = False
    # Keeps every returned tensor differentiable in the parameters; the
    # caller must reduce them to a scalar objective before eval_param_grad.
    want_param_grad: bool = False


@dataclass(frozen=True)
class DiffResult:
    value: Optional[torch.Tensor]
    input_grad: Optional[torch.Tensor]
    input_hessian: Optional[torch.Tensor]


def _prepare_input(f: ScalarFunction, x) -> Tuple[torch.Tensor, bool]:
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if x.dtype != DTYPE:
        x = x.to(DTYPE)
    if x.shape[-1] != f.input_dim:
        raise DimensionMismatchError(
            f"function expects inputs of dimension {f.input_dim}, got {x.shape[-1]}"
        )
    single = x.dim() == 1
    if single:
        x = x.unsqueeze(0)
    if not x.requires_grad:
        x = x.detach().clone().requires_grad_(True)
    return x, single


def _grad(output: torch.Tensor, wrt: torch.Tensor, create_graph: bool) -> torch.Tensor:
    if not output.requires_grad:
        return torch.zeros_like(wrt)
    (gradient,) = torch.autograd.grad(output, wrt, create_graph=create_graph, allow_unused=True)
    if gradient is None:
        return torch.zeros_like(wrt)
    return gradient


def differentiate(
    f: ScalarFunction,
    params: ParameterStore,
    x,
    request: DiffRequest,
    wrt: Optional[Sequence[int]] = None,
) -> DiffResult:
    """
    Evaluate f and the requested input derivatives on a batch of inputs.

    Args:
        f: Scalar parametric function
        params: Parameter store, read-only here
        x: Inputs of shape (m,) or (B, m)
        request: Which outputs to produce
        wrt: Input indices spanning the Hessian block (all by default)

    Returns:
        DiffResult with value (B,), input gradient (B, m) and Hessian
        (B, |wrt|, |wrt|); the batch axis is dropped for a single input
    """
    input_tracked = isinstance(x, torch.Tensor) and x.requires_grad
    # Inputs that already carry a graph (Newton unknowns, encoded latents)
    # need derivatives that stay differentiable with respect to them.
    keep_graph = request.want_param_grad or (
        torch.is_grad_enabled() and (params.values.requires_grad or input_tracked)
    )

    with torch.enable_grad():
        x, single = _prepare_input(f, x)
        value = f(params, x)
        input_grad = None
        input_hessian = None

        if request.want_input_grad or request.want_input_hessian:
            input_grad = _grad(value.sum(), x, create_graph=keep_graph or request.want_input_hessian)

        if request.want_input_hessian:
            indices = list(range(f.input_dim)) if wrt is None else list(wrt)
            rows = [
                _grad(input_grad[:, i].sum(), x, create_graph=keep_graph)[:, indices]
                for i in indices
            ]
            input_hessian = torch.stack(rows, dim=1)

    if not keep_graph:
        value = value.detach()
        input_grad = None if input_grad is None else input_grad.detach()
        input_hessian = None if input_hessian is None else input_hessian.detach()

    if single:
        value = value[0]
        input_grad = None if input_grad is None else input_grad[0]
        input_hessian = None if input_hessian is None else input_hessian[0]

    return DiffResult(
        value=value if request.want_value else None,
        input_grad=input_grad if request.want_input_grad else None,
        input_hessian=input_hessian,
    )


def eval_with_input_grad(
    f: ScalarFunction,
    params: ParameterStore,
    x,
    want_param_grad: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Value and exact input gradient ∂f/∂x of a scalar parametric function"""
    result = differentiate(
        f, params, x, DiffRequest(want_input_grad=True, want_param_grad=want_param_grad)
    )
    return result.value, result.input_grad


def eval_input_hessian(
    f: ScalarFunction,
    params: ParameterStore,
    x,
    wrt: Optional[Sequence[int]] = None,
    want_param_grad: bool = False,
) -> torch.Tensor:
    """Exact input Hessian ∂²f/∂x_i∂x_j, optionally restricted to a block of inputs"""
    result = differentiate(
        f,
        params,
        x,
        DiffRequest(want_value=False, want_input_hessian=True, want_param_grad=want_param_grad),
        wrt=wrt,
    )
    return result.input_hessian


def eval_value_and_param_grad(
    objective: Callable[[ParameterStore], torch.Tensor],
    params: ParameterStore,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Scalar objective value and its exact gradient with respect to every parameter.

    The objective may itself call eval_with_input_grad / eval_input_hessian;
    those keep their graphs because the store handed to it is an autograd leaf.

    Raises:
        DifferentiationError: If the objective is not a scalar
    """
    leaf = params if params.values.requires_grad and params.values.is_leaf else params.trainable()
    with torch.enable_grad():
        value = objective(leaf)
        if not isinstance(value, torch.Tensor) or value.numel() != 1:
            shape = tuple(value.shape) if isinstance(value, torch.Tensor) else type(value).__name__
            raise DifferentiationError(f"objective must be scalar, got {shape}")
        value = value.reshape(())
        if not torch.isfinite(value):
            # No backward pass through singular solves; the caller skips the step
            return value.detach(), torch.full_like(leaf.values.detach(), math.nan)
        gradient = _grad(value, leaf.values, create_graph=False)
    return value.detach(), gradient.detach()


def eval_param_grad(
    objective: Callable[[ParameterStore], torch.Tensor],
    params: ParameterStore,
) -> torch.Tensor:
    """Exact gradient ∇_θ of a scalar objective"""
    _, gradient = eval_value_and_param_grad(objective, params)
    return gradient


def as_tensor(array: Union[np.ndarray, Sequence[float], float, torch.Tensor]) -> torch.Tensor:
    """Convert array-likes to float64 tensors without copying tensors"""
    if isinstance(array, torch.Tensor):
        return array if array.dtype == DTYPE else array.to(DTYPE)
    return torch.as_tensor(np.asarray(array, dtype=np.float64))
