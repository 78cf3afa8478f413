"""Small reverse-mode engine for the fixed set of layers the networks use."""

from .checkpoint import CheckpointError, config_digest, load_checkpoint, save_checkpoint
from .conv import (
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    subpixel_shuffle,
    subpixel_unshuffle,
)
from .ops import (
    NonFiniteError,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    grad_reverse_backward,
    grad_reverse_forward,
    leaky_relu_backward,
    leaky_relu_forward,
    log_softmax,
    prelu_backward,
    prelu_forward,
    reduce_max_backward,
    reduce_max_forward,
    shared_mlp_backward,
    shared_mlp_forward,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    softplus,
)
from .optim import OptimizerState, adam_update, lr_at_step
