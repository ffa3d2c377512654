from .gradcheck import check_parameters, grad_check
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, make_rng, param
from .optim import Adam, AdamState, adam_step
from .tensor import (NonFiniteError, ShapeError, Tensor, add, as_tensor, clamp, concat,
                     conv2d, cos, div, exp, getitem, layer_norm, log, log_softmax, matmul,
                     max_pool2d, mean, mul, neg, no_grad, power, relu, reshape, sin, softmax,
                     softplus, sqrt, stack, sub, tanh, transpose, tsum, upsample_bilinear,
                     upsample_nearest)

__all__ = [
    "Adam", "AdamState", "Conv2d", "LayerNorm", "Linear", "MLP", "Module", "NonFiniteError",
    "ShapeError", "Tensor", "adam_step", "add", "as_tensor", "check_parameters", "clamp",
    "concat", "conv2d", "cos", "div", "exp", "getitem", "grad_check", "layer_norm", "log",
    "log_softmax", "make_rng", "matmul", "max_pool2d", "mean", "mul", "neg", "no_grad",
    "param", "power", "relu", "reshape", "sin", "softmax", "softplus", "sqrt", "stack", "sub",
    "tanh", "transpose", "tsum", "upsample_bilinear", "upsample_nearest",
]
