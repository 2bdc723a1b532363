from .gradcheck import EvaluationError, finite_diff_check
from .ops import ConfigError
from .params import ParamStore
from .tensor import GradientError, ShapeError, Tensor, as_tensor, make_result, no_grad

__all__ = [
    "ConfigError",
    "EvaluationError",
    "GradientError",
    "ParamStore",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "finite_diff_check",
    "make_result",
    "no_grad",
]
