"""Multi-scale multi-task dense prediction with cross-task feature
distillation, on a self-contained numpy autodiff core."""

from .tensor import ParamStore, Parameter, Tensor
from .model import Model, ModelConfig, ModelOutputs, TaskSpec

__version__ = "0.1.0"

__all__ = [
    "Model",
    "ModelConfig",
    "ModelOutputs",
    "ParamStore",
    "Parameter",
    "TaskSpec",
    "Tensor",
    "__version__",
]
