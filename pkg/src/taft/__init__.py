"""Task-adaptive feature transformer for few-shot segmentation, at desk scale."""

from .autodiff import Parameter, Tensor, backward, no_grad, precision, set_precision
from .core import ReferenceSet, build_task_transform
from .errors import TaftError
from .segnet import ModelConfig, SegNet, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "Parameter",
    "ReferenceSet",
    "SegNet",
    "TaftError",
    "Tensor",
    "backward",
    "build_task_transform",
    "load_checkpoint",
    "no_grad",
    "precision",
    "save_checkpoint",
    "set_precision",
]
