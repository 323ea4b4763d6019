import logging
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn

from layers import ConvBlock, DeconvBlock, conv_output_extent, conv_transpose_output_extent
from utils import LayerAlgebraError, ShapeMismatchError

log_to_stdout = logging.info


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str  # "conv" or "deconv"
    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    @staticmethod
    def from_dict(d):
        return BlockSpec(name=d["name"], kind=d["kind"], in_channels=int(d["in_channels"]),
                         out_channels=int(d["out_channels"]), kernel=tuple(d["kernel"]), stride=tuple(d["stride"]),
                         padding=tuple(d["padding"]))


def _conv(name, c_in, c_out, kernel=(3, 3), stride=(1, 1), padding=(1, 1)):
    return BlockSpec(name, "conv", c_in, c_out, kernel, stride, padding)


def _deconv(name, c_in, c_out, kernel=(4, 4), stride=(2, 2), padding=(1, 1)):
    return BlockSpec(name, "deconv", c_in, c_out, kernel, stride, padding)


# Temporal-collapse blocks use (k, 1) kernels, then square 3x3 stride-2 blocks reduce both axes and a final block whose
# kernel equals the remaining extent reaches the 1x1 bottleneck.
FULL_ENCODER = [
    _conv("block1", 5, 32, (7, 1), (2, 1), (3, 0)),
    _conv("block2_1", 32, 64, (3, 1), (2, 1), (1, 0)),
    _conv("block2_2", 64, 64, (3, 1), (1, 1), (1, 0)),
    _conv("block3_1", 64, 64, (3, 1), (2, 1), (1, 0)),
    _conv("block3_2", 64, 64, (3, 1), (1, 1), (1, 0)),
    _conv("block4_1", 64, 128, (3, 1), (2, 1), (1, 0)),
    _conv("block4_2", 128, 128, (3, 1), (1, 1), (1, 0)),
    _conv("block5_1", 128, 128, stride=(2, 2)),
    _conv("block5_2", 128, 128),
    _conv("block6_1", 128, 256, stride=(2, 2)),
    _conv("block6_2", 256, 256),
    _conv("block7_1", 256, 256, stride=(2, 2)),
    _conv("block7_2", 256, 256),
    _conv("block8", 256, 512, (8, 9), (1, 1), (0, 0))
]
FULL_DECODER = [
    _deconv("deconv1_1", 512, 512, (5, 5), (2, 2), (0, 0)),
    _conv("deconv1_2", 512, 512),
    _deconv("deconv2_1", 512, 256),
    _conv("deconv2_2", 256, 256),
    _deconv("deconv3_1", 256, 128),
    _conv("deconv3_2", 128, 128),
    _deconv("deconv4_1", 128, 64),
    _conv("deconv4_2", 64, 64),
    _deconv("deconv5_1", 64, 32),
    _conv("deconv5_2", 32, 32)
]

TINY_ENCODER = [
    _conv("block1", 3, 8, (7, 1), (2, 1), (3, 0)),
    _conv("block2_1", 8, 16, (3, 1), (2, 1), (1, 0)),
    _conv("block2_2", 16, 16, (3, 1), (1, 1), (1, 0)),
    _conv("block3_1", 16, 16, (3, 1), (2, 1), (1, 0)),
    _conv("block4_1", 16, 32, stride=(2, 2)),
    _conv("block4_2", 32, 32),
    _conv("block5_1", 32, 32, stride=(2, 2)),
    _conv("block5_2", 32, 32),
    _conv("block6", 32, 64, (8, 8), (1, 1), (0, 0))
]
TINY_DECODER = [
    _deconv("deconv1_1", 64, 64, (4, 4), (1, 1), (0, 0)),
    _conv("deconv1_2", 64, 64),
    _deconv("deconv2_1", 64, 32),
    _conv("deconv2_2", 32, 32),
    _deconv("deconv3_1", 32, 16),
    _conv("deconv3_2", 16, 16),
    _deconv("deconv4_1", 16, 8),
    _conv("deconv4_2", 8, 8)
]


@dataclass
class ModelConfig:
    preset: str = "tiny"
    in_channels: int = 3
    in_time: int = 256
    in_receivers: int = 32
    out_size: int = 32
    latent_channels: int = 64
    encoder: list = field(default_factory=lambda: list(TINY_ENCODER))
    decoder: list = field(default_factory=lambda: list(TINY_DECODER))
    crop: int = 0  # removed from each side of the last decoder output

    @staticmethod
    def from_preset(preset):
        if preset == "full":
            return ModelConfig(preset="full", in_channels=5, in_time=1000, in_receivers=70, out_size=70,
                               latent_channels=512, encoder=list(FULL_ENCODER), decoder=list(FULL_DECODER), crop=5)
        elif preset == "tiny":
            return ModelConfig()
        else:
            raise ValueError(f"Unknown model preset '{preset}', expected 'full' or 'tiny'")

    def to_dict(self):
        return {
            "preset": self.preset,
            "in_channels": self.in_channels,
            "in_time": self.in_time,
            "in_receivers": self.in_receivers,
            "out_size": self.out_size,
            "latent_channels": self.latent_channels,
            "encoder": [asdict(spec) for spec in self.encoder],
            "decoder": [asdict(spec) for spec in self.decoder],
            "crop": self.crop
        }

    @staticmethod
    def from_dict(d):
        return ModelConfig(preset=d["preset"], in_channels=int(d["in_channels"]), in_time=int(d["in_time"]),
                           in_receivers=int(d["in_receivers"]), out_size=int(d["out_size"]),
                           latent_channels=int(d["latent_channels"]),
                           encoder=[BlockSpec.from_dict(spec) for spec in d["encoder"]],
                           decoder=[BlockSpec.from_dict(spec) for spec in d["decoder"]],
                           crop=int(d["crop"]))


def _block_extents(spec, extents):
    extent_fn = conv_output_extent if spec.kind == "conv" else conv_transpose_output_extent
    return tuple(extent_fn(extents[i], spec.kernel[i], spec.stride[i], spec.padding[i]) for i in range(2))


def check_layer_algebra(config):
    """ Walks (channels, height, width) through every block and returns the list of per-block output shapes.

        Raises LayerAlgebraError naming the first block whose channels or extents do not compose. """
    channels, extents = config.in_channels, (config.in_time, config.in_receivers)
    shapes = []

    def _walk(specs):
        nonlocal channels, extents
        for spec in specs:
            if spec.kind not in ("conv", "deconv"):
                raise LayerAlgebraError(f"block '{spec.name}' has unknown kind '{spec.kind}'")
            if spec.in_channels != channels:
                raise LayerAlgebraError(f"block '{spec.name}' expects {spec.in_channels} input channels, "
                                        f"previous block produces {channels}")
            new_extents = _block_extents(spec, extents)
            if min(new_extents) < 1:
                raise LayerAlgebraError(f"block '{spec.name}' maps extents {extents} to non-positive {new_extents}")
            channels, extents = spec.out_channels, new_extents
            shapes.append((spec.name, (channels, *extents)))

    _walk(config.encoder)
    if (channels, *extents) != (config.latent_channels, 1, 1):
        raise LayerAlgebraError(f"block '{config.encoder[-1].name}' (end of encoder): expected bottleneck "
                                f"{(config.latent_channels, 1, 1)}, got {(channels, *extents)}")

    _walk(config.decoder)
    cropped = tuple(e - 2 * config.crop for e in extents)
    # the head is a size-preserving 3x3 conv
    if cropped != (config.out_size, config.out_size):
        raise LayerAlgebraError(f"block '{config.decoder[-1].name}' (end of decoder): expected extents "
                                f"{(config.out_size + 2 * config.crop,) * 2} before the crop of {config.crop}, "
                                f"got {extents}")
    shapes.append(("head", (1, *cropped)))
    return shapes


def _make_block(spec):
    block_cls = ConvBlock if spec.kind == "conv" else DeconvBlock
    return block_cls(spec.in_channels, spec.out_channels, kernel_size=spec.kernel, stride=spec.stride,
                     padding=spec.padding)


class InversionNet(nn.Module):
    def __init__(self, config):
        """ Encoder-decoder mapping seismic gathers [B, S, T, R] to velocity maps [B, 1, V, V] in [-1, 1]. """
        super().__init__()
        check_layer_algebra(config)
        self.model_config = config
        # Free-form information stored alongside the weights in checkpoints (e.g. names of training datasets)
        self.metadata = {}

        self.encoder = nn.Sequential(OrderedDict((spec.name, _make_block(spec)) for spec in config.encoder))
        self.decoder = nn.Sequential(OrderedDict((spec.name, _make_block(spec)) for spec in config.decoder))
        self.head = ConvBlock(config.decoder[-1].out_channels, 1, kernel_size=3, stride=1, padding=1, slope=None)

    @property
    def config(self):
        return self.model_config.to_dict()

    @property
    def blocks(self):
        return list(self.encoder) + list(self.decoder) + [self.head]

    def forward(self, seismic):
        expected = (self.model_config.in_channels, self.model_config.in_time, self.model_config.in_receivers)
        if seismic.dim() != 4 or tuple(seismic.shape[1:]) != expected:
            raise ShapeMismatchError(f"expected seismic input of shape [B, {', '.join(map(str, expected))}], "
                                     f"got {list(seismic.shape)}")

        latent = self.encoder(seismic)  # [B, latent_channels, 1, 1]
        decoded = self.decoder(latent)
        c = self.model_config.crop
        if c > 0:
            decoded = decoded[:, :, c: -c, c: -c]

        return torch.tanh(self.head(decoded))  # [B, 1, V, V]


def build_model(config, seed=0):
    """ Builds an InversionNet with all parameters trainable, deterministically initialized from `seed`:
        Kaiming-uniform (fan-in, leaky ReLU) conv weights and gamma=1, beta=0 batch normalization. """
    model = InversionNet(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for block in model.blocks:
            block.reset_parameters()
    return model


def param_count(model, trainable_only=False):
    return sum(param.numel() for param in model.parameters() if param.requires_grad or not trainable_only)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    for preset in ["tiny", "full"]:
        curr_config = ModelConfig.from_preset(preset)
        for block_name, block_shape in check_layer_algebra(curr_config):
            log_to_stdout(f"[{preset}] {block_name}: {block_shape}")
        log_to_stdout(f"[{preset}] {param_count(build_model(curr_config)):,} parameters")
