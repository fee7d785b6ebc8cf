"""Dynamic one-dimensional convolution (OneDConv) on numpy, with numba kernels."""
from .nn import ConvSpec, ConvWeights
from .onedconv import (ShapeConvWeights, linear_sample, offsets_from_shape, onedconv_apply,
                       onedconv_backward, onedconv_forward, shape_conv_forward)
from ._kernels import backend, set_backend

__version__ = "0.1.0"
