from . import tensor as T
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .gradcheck import check_param_grads, finite_difference_grad, relative_error
from .nn import Conv2d, Linear, Module, conv2d, uniform_init
from .optim import Adam, clip_grad_norm
from .tensor import ShapeError, Tensor, as_tensor, backward, no_grad, topo_order

__all__ = [
    "T", "Tensor", "as_tensor", "backward", "no_grad", "topo_order", "ShapeError",
    "Module", "Linear", "Conv2d", "conv2d", "uniform_init",
    "Adam", "clip_grad_norm",
    "finite_difference_grad", "relative_error", "check_param_grads",
    "save_arrays", "load_arrays", "CheckpointError",
]
