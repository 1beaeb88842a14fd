from .tensor import (
    Tape, Tensor, activation, add, backward, concat, default_dtype, div, exp, getitem, grad_enabled,
    log, matmul, mean, mul, neg, no_grad, power, relu, reshape, sigmoid, sqrt, stack, sub, tanh, tensor,
    transpose, tsum,
)
from .ops import (
    batch_norm, bce_with_logits, conv2d, cross_entropy, dropout, global_avg_pool, l2_normalize, layer_norm,
    linear, log_softmax, softmax,
)
from .optim import SGD, Adam, Optimizer, OptimizerState, cosine_annealing_lr, make_optimizer, optimizer_step
from . import checkpoint, nn
