"""Exception hierarchy shared by every layer"""
from typing import Any, Optional


class ForcedLagrangianError(Exception):
    """Base class for all errors raised by this package"""


class DimensionMismatchError(ForcedLagrangianError, ValueError):
    """An array does not have the shape a model or stencil declares"""


class DifferentiationError(ForcedLagrangianError):
    """The differentiation engine was asked for something it cannot provide"""


class InvalidStencilError(ForcedLagrangianError, ValueError):
    """A multistep stencil is undefined or fails its consistency checks"""


class ModelVariantError(ForcedLagrangianError, TypeError):
    """A variant-specific operation was called on another variant"""


class NewtonConvergenceError(ForcedLagrangianError):
    """The implicit step did not reach the residual tolerance"""

    def __init__(
        self,
        message: str,
        best_iterate: Any = None,
        residual_norm: float = float("nan"),
        iterations: int = 0,
        partial_result: Any = None,
    ):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.residual_norm = residual_norm
        self.iterations = iterations
        self.partial_result = partial_result


class SingularHessianError(ForcedLagrangianError):
    """The velocity Hessian of a Lagrangian is not invertible at a point"""

    def __init__(self, message: str, q: Any = None, v: Any = None):
        super().__init__(message)
        self.q = q
        self.v = v


class DatasetError(ForcedLagrangianError):
    """A dataset is malformed or could not be generated"""

    def __init__(self, message: str, partial: Any = None):
        super().__init__(message)
        self.partial = partial


class EmptyDatasetError(DatasetError):
    """A loss or metric was requested over no data"""


class TrainingAbortedError(ForcedLagrangianError):
    """Training stopped because an entire epoch produced no finite loss"""

    def __init__(self, message: str, report: Optional[Any] = None):
        super().__init__(message)
        self.report = report


class ConfigError(ForcedLagrangianError, ValueError):
    """The experiment configuration is invalid"""


class ArtifactMismatchError(ForcedLagrangianError):
    """Artifacts were produced from different data or configurations"""


class ReconstructionGateError(ForcedLagrangianError):
    """The autoencoder does not reconstruct the data well enough to roll out"""
