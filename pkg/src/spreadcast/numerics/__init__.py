"""Dense tensors, reverse-mode autodiff and the ops needed by the 3D pix2pix model."""
from .conv import conv3d, conv3d_transpose, conv_output_shape, same_padding
from .gradcheck import check_gradients, numeric_grad
from .layers import (
    ACTIVATIONS,
    BatchNormStats,
    activation,
    add_noise,
    batch_norm,
    concat,
    crop_to,
    dropout,
    dropout_mask,
    pad_to,
)
from .losses import bce_with_logits, l1_loss
from .optim import AdamState, adam_step
from .rng import RngStream
from .tensor import NonFiniteError, Tensor, is_grad_enabled, no_grad

__all__ = [
    "ACTIVATIONS",
    "AdamState",
    "BatchNormStats",
    "NonFiniteError",
    "RngStream",
    "Tensor",
    "activation",
    "adam_step",
    "add_noise",
    "batch_norm",
    "bce_with_logits",
    "check_gradients",
    "concat",
    "conv3d",
    "conv3d_transpose",
    "conv_output_shape",
    "crop_to",
    "dropout",
    "dropout_mask",
    "is_grad_enabled",
    "l1_loss",
    "no_grad",
    "numeric_grad",
    "pad_to",
    "same_padding",
]
