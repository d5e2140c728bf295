"""Free-form image inpainting at desk scale.

Gated convolutions, partial convolutions, an SN-PatchGAN discriminator with
hinge losses, procedural brush-stroke mask sampling, and a coarse+refinement
generator, all built on a minimal reverse-mode autodiff tensor engine.
"""

from .tensor import (
    ConvGeometry,
    ShapeError,
    Tensor,
    backward,
    concat_channels,
    conv2d,
    elu,
    grad_check,
    leaky_relu,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    sigmoid,
    tanh,
    upsample_nearest,
)

__version__ = "0.1.0"
