import math

import pytest
import torch

from autodiff import finite_difference_check
from layers import conv2d, conv_transpose2d, batchnorm2d, leaky_relu, ConvBlock, DeconvBlock, conv_output_extent, \
    conv_transpose_output_extent
from utils import ShapeMismatchError

F64 = torch.float64


def _random(shape, seed):
    return torch.randn(shape, dtype=F64, generator=torch.Generator().manual_seed(seed))


def test_conv2d_identity_kernel():
    x = _random((2, 1, 4, 5), seed=0)
    assert torch.equal(conv2d(x, torch.ones((1, 1, 1, 1), dtype=F64)), x)


def test_conv2d_all_ones():
    out = conv2d(torch.ones((1, 1, 4, 4)), torch.ones((1, 1, 3, 3)))
    assert torch.equal(out, torch.full((1, 1, 2, 2), 9.0))


def test_conv2d_matches_naive_loops():
    x, weight, bias = _random((2, 2, 5, 6), seed=1), _random((3, 2, 3, 3), seed=2), _random(3, seed=3)
    stride, padding = 2, 1
    padded = torch.nn.functional.pad(x, (padding,) * 4)
    out_h, out_w = conv_output_extent(5, 3, stride, padding), conv_output_extent(6, 3, stride, padding)

    expected = torch.zeros((2, 3, out_h, out_w), dtype=F64)
    for b in range(2):
        for c_out in range(3):
            for i in range(out_h):
                for j in range(out_w):
                    acc = float(bias[c_out])
                    for c_in in range(2):
                        for di in range(3):
                            for dj in range(3):
                                acc += float(weight[c_out, c_in, di, dj] * padded[b, c_in, i * stride + di,
                                                                                   j * stride + dj])
                    expected[b, c_out, i, j] = acc

    result = conv2d(x, weight, bias, stride=stride, padding=padding)
    assert torch.allclose(result, expected, rtol=0.0, atol=1e-12)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeMismatchError, match="channels"):
        conv2d(torch.zeros((1, 2, 4, 4)), torch.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeMismatchError, match="non-positive"):
        conv2d(torch.zeros((1, 1, 2, 2)), torch.zeros((1, 1, 5, 5)))
    with pytest.raises(ShapeMismatchError, match="4-D"):
        conv2d(torch.zeros((2, 4, 4)), torch.zeros((1, 2, 3, 3)))


def test_conv_transpose2d_identity_kernel():
    x = _random((1, 2, 3, 3), seed=4)
    weight = torch.zeros((2, 2, 1, 1), dtype=F64)
    weight[0, 0] = weight[1, 1] = 1.0
    assert torch.equal(conv_transpose2d(x, weight), x)


def test_conv_transpose2d_scatter():
    out = conv_transpose2d(torch.full((1, 1, 1, 1), 2.5), torch.ones((1, 1, 2, 2)), stride=2)
    assert torch.equal(out, torch.full((1, 1, 2, 2), 2.5))


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), ((2, 1), (1, 0))])
def test_conv_transpose2d_is_adjoint_of_conv2d(stride, padding):
    # odd extents: every strided window lands exactly on the input, so no output padding is needed
    x, weight = _random((2, 3, 9, 7), seed=5), _random((4, 3, 3, 3), seed=6)
    y_shape = conv2d(x, weight, stride=stride, padding=padding).shape
    y = _random(tuple(y_shape), seed=7)

    lhs = torch.sum(conv2d(x, weight, stride=stride, padding=padding) * y)
    back = conv_transpose2d(y, weight, stride=stride, padding=padding)
    assert back.shape == x.shape
    assert float(lhs) == pytest.approx(float(torch.sum(x * back)), abs=1e-10)


def test_output_extents():
    assert conv_output_extent(1000, 7, 2, 3) == 500
    assert conv_transpose_output_extent(1, 5, 2, 0) == 5
    assert conv_transpose_output_extent(5, 4, 2, 1) == 10


def test_batchnorm_two_point_symmetry():
    x = torch.tensor([1.0, 3.0], dtype=F64).reshape(2, 1, 1, 1)
    running_mean, running_var = torch.zeros(1, dtype=F64), torch.ones(1, dtype=F64)
    out = batchnorm2d(x, running_mean, running_var, torch.ones(1, dtype=F64), torch.zeros(1, dtype=F64),
                      training=True, momentum=0.1, eps=1e-12)
    assert out.reshape(-1).tolist() == pytest.approx([-1.0, 1.0], abs=1e-6)
    # running statistics use the unbiased batch variance
    assert float(running_mean) == pytest.approx(0.2)
    assert float(running_var) == pytest.approx(0.9 + 0.1 * 2.0)


def test_batchnorm_training_standardizes_each_channel():
    x = 3.0 + 20.0 * _random((4, 3, 5, 6), seed=9)
    x[:, 1] -= 50.0
    out = batchnorm2d(x, torch.zeros(3, dtype=F64), torch.ones(3, dtype=F64), torch.ones(3, dtype=F64),
                      torch.zeros(3, dtype=F64), training=True, momentum=0.1, eps=1e-5)
    per_channel = out.transpose(0, 1).reshape(3, -1)
    assert torch.allclose(per_channel.mean(dim=1), torch.zeros(3, dtype=F64), rtol=0.0, atol=1e-6)
    assert torch.allclose(per_channel.var(dim=1, unbiased=False), torch.ones(3, dtype=F64), rtol=0.0, atol=1e-6)


def test_batchnorm_affine():
    x = torch.tensor([-1.0, 1.0, -1.0, 1.0], dtype=F64).reshape(1, 1, 2, 2)
    out = batchnorm2d(x, torch.zeros(1, dtype=F64), torch.ones(1, dtype=F64), torch.full((1,), 2.0, dtype=F64),
                      torch.full((1,), 5.0, dtype=F64), training=True)
    assert sorted(set(round(v, 3) for v in out.reshape(-1).tolist())) == [3.0, 7.0]


def test_batchnorm_eval_uses_running_statistics():
    x = _random((3, 2, 4, 4), seed=8)
    running_mean, running_var = torch.tensor([0.5, -1.0], dtype=F64), torch.tensor([2.0, 0.25], dtype=F64)
    weight, bias = torch.tensor([1.5, -0.5], dtype=F64), torch.tensor([0.1, 0.2], dtype=F64)
    out = batchnorm2d(x, running_mean.clone(), running_var.clone(), weight, bias, training=False, eps=1e-5)

    expected = torch.empty_like(x)
    for c in range(2):
        expected[:, c] = (x[:, c] - running_mean[c]) / math.sqrt(running_var[c] + 1e-5) * weight[c] + bias[c]
    assert torch.allclose(out, expected, rtol=0.0, atol=1e-12)


def test_batchnorm_needs_two_values_in_training():
    with pytest.raises(ValueError, match="at least 2"):
        batchnorm2d(torch.zeros((1, 4, 1, 1)), torch.zeros(4), torch.ones(4), None, None, training=True)


def test_leaky_relu():
    x = torch.tensor([-1.0, 0.0, 2.0])
    assert leaky_relu(x, slope=0.2).tolist() == pytest.approx([-0.2, 0.0, 2.0])
    assert torch.equal(leaky_relu(x, slope=0.0), torch.relu(x))

    x = torch.tensor(-3.0, requires_grad=True)
    leaky_relu(x, slope=0.2).backward()
    assert float(x.grad) == pytest.approx(0.2)


def _cotangent(shape, seed=100):
    return _random(shape, seed)


def test_gradients_conv2d():
    x, weight = _random((2, 2, 6, 5), seed=9), _random((3, 2, 3, 3), seed=10)
    cotangent = _cotangent((2, 3, 3, 3))
    assert finite_difference_check(lambda v: torch.sum(conv2d(v, weight, stride=2, padding=1) * cotangent), x) < 1e-4
    assert finite_difference_check(lambda w: torch.sum(conv2d(x, w, stride=2, padding=1) * cotangent), weight) < 1e-4


def test_gradients_conv_transpose2d():
    x, weight = _random((2, 3, 3, 3), seed=11), _random((3, 2, 4, 4), seed=12)
    cotangent = _cotangent((2, 2, 6, 6))
    assert finite_difference_check(lambda v: torch.sum(conv_transpose2d(v, weight, stride=2, padding=1) * cotangent),
                                   x) < 1e-4
    assert finite_difference_check(lambda w: torch.sum(conv_transpose2d(x, w, stride=2, padding=1) * cotangent),
                                   weight) < 1e-4


def test_gradients_batchnorm():
    x = _random((3, 2, 3, 3), seed=13)
    gamma, beta = _random(2, seed=14), _random(2, seed=15)
    cotangent = _cotangent((3, 2, 3, 3))

    def _bn(v, g=gamma, b=beta):
        return batchnorm2d(v, torch.zeros(2, dtype=F64), torch.ones(2, dtype=F64), g, b, training=True)

    assert finite_difference_check(lambda v: torch.sum(_bn(v) * cotangent), x) < 1e-4
    assert finite_difference_check(lambda g: torch.sum(_bn(x, g=g) * cotangent), gamma) < 1e-4
    assert finite_difference_check(lambda b: torch.sum(_bn(x, b=b) * cotangent), beta) < 1e-4


def test_gradients_leaky_relu():
    x = _random(20, seed=16)
    x = x + torch.sign(x) * 0.1  # keep away from the kink
    cotangent = _cotangent(20)
    assert finite_difference_check(lambda v: torch.sum(leaky_relu(v) * cotangent), x) < 1e-4


def test_blocks_shapes():
    conv = ConvBlock(3, 8, kernel_size=(7, 1), stride=(2, 1), padding=(3, 0))
    assert conv(torch.randn((2, 3, 256, 32))).shape == (2, 8, 128, 32)
    deconv = DeconvBlock(8, 4)
    assert deconv(torch.randn((2, 8, 5, 5))).shape == (2, 4, 10, 10)


def test_block_reset_is_seeded():
    blocks = []
    for _ in range(2):
        block = ConvBlock(4, 4)
        torch.manual_seed(3)
        block.reset_parameters()
        blocks.append(block)
    assert torch.equal(blocks[0].conv.weight, blocks[1].conv.weight)
    assert torch.equal(blocks[0].norm.weight, torch.ones(4))


def test_block_updates_running_statistics_only_in_training():
    block = ConvBlock(2, 3)
    x = 3.0 + torch.randn((4, 2, 5, 5))
    block.eval()
    block(x)
    assert torch.equal(block.norm.running_mean, torch.zeros(3))
    block.train()
    block(x)
    assert not torch.equal(block.norm.running_mean, torch.zeros(3))
    assert int(block.norm.num_batches_tracked) == 1
