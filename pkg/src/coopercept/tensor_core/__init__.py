from .tensor import (Tensor, NonFiniteError, no_grad, default_dtype, get_default_dtype, as_tensor,
                     add, sub, mul, div, power, exp, log, abs_, relu, sigmoid, log_sigmoid, where,
                     sum_, mean, max_, reshape, transpose, getitem, concat, stack, scatter_rows,
                     matmul, linear, rowwise_linear, softmax, log_softmax)
from .functional import conv2d, conv_transpose2d, batch_norm, RunningStats, BilinearSampler
from .nn import Parameter, Module, Conv2d, ConvTranspose2d, BatchNorm, Linear, param_rng
from .optim import Adam, step_decay_lr
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

max_pool_over_points = max_

__all__ = [name for name in dir() if not name.startswith("_")]
