"""Feed-forward networks: GELU MLPs, inverted dropout, Glorot init and the autoencoder"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .diffcore import DTYPE, ParameterStore
from .errors import DimensionMismatchError

ShapeList = List[Tuple[str, Tuple[int, ...]]]


@dataclass(frozen=True)
class MlpSpec:
    """Affine→GELU chain with `hidden_layers` hidden layers and an affine output layer"""
    input_dim: int
    output_dim: int
    hidden_dim: int = 30
    hidden_layers: int = 3
    activation: str = "gelu"

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_dim) < 1:
            raise ValueError(f"network dimensions must be >= 1, got {self}")
        if self.hidden_layers < 0:
            raise ValueError(f"hidden_layers must be >= 0, got {self.hidden_layers}")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation '{self.activation}'")

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) of each affine map, input to output"""
        widths = [self.input_dim] + [self.hidden_dim] * self.hidden_layers + [self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    def parameter_shapes(self, prefix: str) -> ShapeList:
        shapes: ShapeList = []
        for i, (fan_in, fan_out) in enumerate(self.layer_dims):
            shapes.append((f"{prefix}.layer{i}.weight", (fan_out, fan_in)))
            shapes.append((f"{prefix}.layer{i}.bias", (fan_out,)))
        return shapes

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_dim": self.hidden_dim,
            "hidden_layers": self.hidden_layers,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MlpSpec":
        return cls(**data)


@dataclass(frozen=True)
class AutoencoderSpec:
    """Encoder d→l and mirrored decoder l→d"""
    data_dim: int
    latent_dim: int
    encoder: MlpSpec
    decoder: MlpSpec

    def __post_init__(self):
        # l == d is allowed so identity-capable sanity setups can be built.
        if not 1 <= self.latent_dim <= self.data_dim:
            raise ValueError(
                f"latent_dim must lie in [1, data_dim={self.data_dim}], got {self.latent_dim}"
            )
        if (self.encoder.input_dim, self.encoder.output_dim) != (self.data_dim, self.latent_dim):
            raise DimensionMismatchError("encoder must map data_dim to latent_dim")
        if (self.decoder.input_dim, self.decoder.output_dim) != (self.latent_dim, self.data_dim):
            raise DimensionMismatchError("decoder must map latent_dim to data_dim")

    @classmethod
    def feedforward(
        cls,
        data_dim: int,
        latent_dim: int,
        hidden_dim: int = 64,
        hidden_layers: int = 1,
    ) -> "AutoencoderSpec":
        return cls(
            data_dim=data_dim,
            latent_dim=latent_dim,
            encoder=MlpSpec(data_dim, latent_dim, hidden_dim, hidden_layers),
            decoder=MlpSpec(latent_dim, data_dim, hidden_dim, hidden_layers),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "data_dim": self.data_dim,
            "latent_dim": self.latent_dim,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AutoencoderSpec":
        return cls(
            data_dim=data["data_dim"],
            latent_dim=data["latent_dim"],
            encoder=MlpSpec.from_dict(data["encoder"]),
            decoder=MlpSpec.from_dict(data["decoder"]),
        )


@dataclass
class DropoutState:
    """Inverted-dropout configuration plus the generator that draws its masks"""
    rate: float = 0.5
    rng_seed: int = 0
    training_mode: bool = False
    generator: torch.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        self.reset()

    def reset(self) -> None:
        self.generator = torch.Generator().manual_seed(self.rng_seed)


def gelu(x: Union[float, torch.Tensor]) -> Union[float, torch.Tensor]:
    """Exact GELU 0.5·x·(1 + erf(x/√2))"""
    if isinstance(x, torch.Tensor):
        return F.gelu(x, approximate="none")
    return float(F.gelu(torch.tensor(x, dtype=DTYPE), approximate="none"))


def dropout_forward(h: torch.Tensor, state: Optional[DropoutState]) -> torch.Tensor:
    if state is None or not state.training_mode or state.rate == 0.0:
        return h
    keep = 1.0 - state.rate
    mask = torch.bernoulli(torch.full(h.shape, keep, dtype=h.dtype), generator=state.generator)
    return h * mask / keep


def mlp_forward(
    spec: MlpSpec,
    params: ParameterStore,
    x: torch.Tensor,
    prefix: str,
    dropout: Optional[DropoutState] = None,
) -> torch.Tensor:
    """
    Evaluate an MLP whose weights live under `prefix` in the store.

    Args:
        spec: Network shape
        params: Store holding `{prefix}.layer{i}.weight|bias`
        x: Inputs of shape (..., input_dim)
        prefix: Slice-name prefix of this network
        dropout: Applied after every hidden activation when in training mode

    Returns:
        Outputs of shape (..., output_dim)
    """
    if x.shape[-1] != spec.input_dim:
        raise DimensionMismatchError(
            f"network '{prefix}' expects input dimension {spec.input_dim}, got {x.shape[-1]}"
        )
    h = x
    last = len(spec.layer_dims) - 1
    for i in range(last + 1):
        h = F.linear(h, params.view(f"{prefix}.layer{i}.weight"), params.view(f"{prefix}.layer{i}.bias"))
        if i < last:
            h = dropout_forward(gelu(h), dropout)
    return h


def _as_rng(rng: Union[np.random.Generator, int, None]) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(
    spec: Union[MlpSpec, Sequence[Tuple[str, Tuple[int, ...]]]],
    rng: Union[np.random.Generator, int, None],
    prefix: str = "mlp",
) -> ParameterStore:
    """
    Glorot-uniform weights and zero biases.

    `spec` is either one MlpSpec (stored under `prefix`) or an explicit list
    of (name, shape) slices. Slices ending in `.packed` hold constant
    triangular factors and are drawn like a square weight.
    """
    generator = _as_rng(rng)
    shapes = spec.parameter_shapes(prefix) if isinstance(spec, MlpSpec) else list(spec)
    arrays = []
    for name, shape in shapes:
        if name.endswith(".bias"):
            arrays.append((name, np.zeros(shape)))
            continue
        if len(shape) == 2:
            fan_out, fan_in = shape
        else:
            fan_in = fan_out = shape[-1]
        bound = glorot_bound(fan_in, fan_out)
        arrays.append((name, generator.uniform(-bound, bound, size=shape)))
    return ParameterStore.from_arrays(arrays)


class Autoencoder:
    """Feed-forward encoder φ and decoder ψ sharing one parameter namespace"""

    def __init__(self, spec: AutoencoderSpec, prefix: str = "autoencoder"):
        self.spec = spec
        self.prefix = prefix

    @property
    def encoder_prefix(self) -> str:
        return f"{self.prefix}.encoder"

    @property
    def decoder_prefix(self) -> str:
        return f"{self.prefix}.decoder"

    def parameter_shapes(self) -> ShapeList:
        return (
            self.spec.encoder.parameter_shapes(self.encoder_prefix)
            + self.spec.decoder.parameter_shapes(self.decoder_prefix)
        )

    def encode(self, params: ParameterStore, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.spec.encoder, params, x, self.encoder_prefix)

    def decode(self, params: ParameterStore, z: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.spec.decoder, params, z, self.decoder_prefix)

    def reconstruct(self, params: ParameterStore, x: torch.Tensor) -> torch.Tensor:
        return self.decode(params, self.encode(params, x))
