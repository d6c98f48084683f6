"""Small reverse-mode autodiff core on numpy: the operators both networks need."""
from .checkpoint import (CheckpointError, atomic_write, load_checkpoint, read_manifest,
                         save_checkpoint)
from .conv import (bilinear_resize, bilinear_upsample_2x, conv2d, depthwise_conv2d,
                   depthwise_separable_conv, dsc_parameter_count, resize_image)
from .nn import (BatchNorm2d, Conv2d, DepthwiseSeparableConv, Identity, Linear, Module,
                 norm_or_identity, parameter_manifest)
from .optim import AdamW, AdamWState, adamw_step
from .tensor import (ContractError, ShapeError, Tensor, add, backward, batchnorm2d,
                     binary_cross_entropy, channel_avg_pool, channel_max_pool, concat_channels,
                     global_avg_pool, global_max_pool, grad_enabled, linear, log, mean, mul,
                     mul_broadcast, no_grad, pooled_reduction, relu, set_finite_checks, sigmoid,
                     sub, tanh, tensor, tsum)

POINTWISE_KINDS = ("relu", "sigmoid", "tanh", "add", "mul_broadcast", "concat_channels",
                   "batchnorm2d", "linear")
