import torch
import torch.nn as nn
import torch.nn.functional as F

from autodiff import check_dtypes
from utils import ShapeMismatchError

DEFAULT_LEAKY_SLOPE = 0.2
DEFAULT_BN_EPS = 1e-5
DEFAULT_BN_MOMENTUM = 0.1


def _pair(value):
    return tuple(value) if isinstance(value, (tuple, list)) else (value, value)


def conv_output_extent(in_extent, kernel, stride, padding):
    return (in_extent + 2 * padding - kernel) // stride + 1


def conv_transpose_output_extent(in_extent, kernel, stride, padding):
    return (in_extent - 1) * stride - 2 * padding + kernel


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """ x: [B, C_in, H, W], weight: [C_out, C_in, k_h, k_w] -> [B, C_out, H', W'] (zero padding). """
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeMismatchError(f"conv2d expects 4-D input and weight, got {list(x.shape)} and {list(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(f"conv2d input has {x.shape[1]} channels, weight {list(weight.shape)} "
                                 f"expects {weight.shape[1]}")
    stride, padding = _pair(stride), _pair(padding)
    out_extents = [conv_output_extent(x.shape[2 + i], weight.shape[2 + i], stride[i], padding[i]) for i in range(2)]
    if min(out_extents) < 1:
        raise ShapeMismatchError(f"conv2d on input {list(x.shape)} with kernel {list(weight.shape[2:])}, "
                                 f"stride {stride}, padding {padding} gives non-positive output extent {out_extents}")
    check_dtypes(x, weight, bias)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """ x: [B, C_in, H, W], weight: [C_in, C_out, k_h, k_w] -> [B, C_out, H', W'].

        The adjoint of `conv2d` with the same weight, stride and padding. """
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeMismatchError(f"conv_transpose2d expects 4-D input and weight, "
                                 f"got {list(x.shape)} and {list(weight.shape)}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError(f"conv_transpose2d input has {x.shape[1]} channels, weight {list(weight.shape)} "
                                 f"expects {weight.shape[0]}")
    stride, padding = _pair(stride), _pair(padding)
    out_extents = [conv_transpose_output_extent(x.shape[2 + i], weight.shape[2 + i], stride[i], padding[i])
                   for i in range(2)]
    if min(out_extents) < 1:
        raise ShapeMismatchError(f"conv_transpose2d on input {list(x.shape)} gives non-positive output extent "
                                 f"{out_extents}")
    check_dtypes(x, weight, bias)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def batchnorm2d(x, running_mean, running_var, weight, bias, training,
                momentum=DEFAULT_BN_MOMENTUM, eps=DEFAULT_BN_EPS):
    """ Per-channel batch normalization of x: [B, C, H, W].

        In training mode the batch statistics are used and the running statistics are updated in place as
        running <- (1 - momentum) * running + momentum * batch. In eval mode only running statistics are used. """
    if x.dim() != 4:
        raise ShapeMismatchError(f"batchnorm2d expects 4-D input, got {list(x.shape)}")
    if x.shape[1] != running_mean.shape[0]:
        raise ShapeMismatchError(f"batchnorm2d input has {x.shape[1]} channels, layer has {running_mean.shape[0]}")
    if training and x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise ValueError(f"batchnorm2d in train mode needs at least 2 values per channel, got input {list(x.shape)}")
    return F.batch_norm(x, running_mean, running_var, weight, bias,
                        training=training, momentum=momentum, eps=eps)


def leaky_relu(x, slope=DEFAULT_LEAKY_SLOPE):
    return F.leaky_relu(x, negative_slope=slope)


def init_conv_weight_(weight, slope=DEFAULT_LEAKY_SLOPE):
    nn.init.kaiming_uniform_(weight, a=slope, mode="fan_in", nonlinearity="leaky_relu")


class _NormalizedBlock(nn.Module):
    """ Shared part of the conv and deconv blocks: `self.conv` holds the (bias-free) weight, `self.norm` the batch
        normalization parameters and running statistics. """
    def __init__(self, out_channels, slope):
        super().__init__()
        self.slope = slope
        self.norm = nn.BatchNorm2d(out_channels, eps=DEFAULT_BN_EPS, momentum=DEFAULT_BN_MOMENTUM)

    def reset_parameters(self):
        init_conv_weight_(self.conv.weight, slope=self.slope if self.slope is not None else DEFAULT_LEAKY_SLOPE)
        self.norm.reset_parameters()

    def _convolve(self, x):
        raise NotImplementedError()

    def forward(self, x):
        if self.training:
            self.norm.num_batches_tracked.add_(1)
        normalized = batchnorm2d(self._convolve(x), self.norm.running_mean, self.norm.running_var,
                                 self.norm.weight, self.norm.bias, training=self.training,
                                 momentum=self.norm.momentum, eps=self.norm.eps)
        if self.slope is None:
            return normalized
        return leaky_relu(normalized, slope=self.slope)


class ConvBlock(_NormalizedBlock):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, slope=DEFAULT_LEAKY_SLOPE):
        """ conv2d -> batchnorm2d -> leaky_relu. `slope=None` leaves out the activation. """
        super().__init__(out_channels, slope)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=kernel_size, stride=stride, padding=padding,
                              bias=False)

    def _convolve(self, x):
        return conv2d(x, self.conv.weight, stride=self.conv.stride, padding=self.conv.padding)


class DeconvBlock(_NormalizedBlock):
    def __init__(self, in_channels, out_channels, kernel_size=4, stride=2, padding=1, slope=DEFAULT_LEAKY_SLOPE):
        """ conv_transpose2d -> batchnorm2d -> leaky_relu. """
        super().__init__(out_channels, slope)
        self.conv = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=kernel_size, stride=stride,
                                       padding=padding, bias=False)

    def _convolve(self, x):
        return conv_transpose2d(x, self.conv.weight, stride=self.conv.stride, padding=self.conv.padding)


if __name__ == "__main__":
    block = ConvBlock(3, 8, kernel_size=(7, 1), stride=(2, 1), padding=(3, 0))
    block.reset_parameters()
    print(block(torch.randn((2, 3, 256, 32))).shape)
