"""
Hourglass convolutional generator used as the image prior for feature inversion.

Every block is Convolution-BatchNorm-LeakyReLU. Resampling blocks use stride 2:
strided convolutions on the way down, transposed convolutions on the way up.
"""
from dataclasses import dataclass, field
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config.reconstructor import LEAKY_SLOPE, NOISE_CHANNELS, RECONSTRUCTOR_DECODER, RECONSTRUCTOR_ENCODER

BLOCK_KINDS = ('conv', 'conv_down', 'conv_up')
FULL_DEPTH = len(RECONSTRUCTOR_ENCODER) // 2


@dataclass(frozen=True)
class Block:
    kind: str
    channels: int
    kernel: int

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"Unknown block kind '{self.kind}'; expected one of {BLOCK_KINDS}")
        if self.channels < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"Block {self.kind} needs channels >= 1 and an odd kernel, got {self.channels}, {self.kernel}")


@dataclass
class ReconstructorSpec:
    """
    Encoder blocks are listed from the image side inwards. Decoder blocks are
    listed in the same level order (shallowest level first) and run deepest
    level first.
    """
    encoder: List[Block]
    decoder: List[Block]
    noise_channels: int = NOISE_CHANNELS
    out_channels: int = 3

    @property
    def downsample_count(self) -> int:
        return sum(block.kind == 'conv_down' for block in self.encoder)

    @property
    def upsample_count(self) -> int:
        return sum(block.kind == 'conv_up' for block in self.decoder)

    def decoder_levels(self) -> List[List[Block]]:
        """Decoder blocks grouped per level; each level ends with its upsampling block."""
        levels, current = [], []
        for block in self.decoder:
            current.append(block)
            if block.kind == 'conv_up':
                levels.append(current)
                current = []
        if current:
            levels.append(current)
        return levels


def default_reconstructor_spec(depth: int = FULL_DEPTH, out_channels: int = 3) -> ReconstructorSpec:
    """
    The six-level listing from config/reconstructor.py, optionally truncated to
    its `depth` shallowest levels so small targets stay divisible by 2**depth.
    """
    if not 1 <= depth <= FULL_DEPTH:
        raise ValueError(f"depth must be in [1, {FULL_DEPTH}], got {depth}")
    return ReconstructorSpec(
        encoder=[Block(*entry) for entry in RECONSTRUCTOR_ENCODER[:2 * depth]],
        decoder=[Block(*entry) for entry in RECONSTRUCTOR_DECODER[:2 * depth]],
        out_channels=out_channels,
    )


def reconstructor_spec_text(spec: ReconstructorSpec) -> str:
    lines = [f"noise_channels {spec.noise_channels}", f"out_channels {spec.out_channels}"]
    lines += [f"encoder {b.kind} {b.channels} {b.kernel}" for b in spec.encoder]
    lines += [f"decoder {b.kind} {b.channels} {b.kernel}" for b in spec.decoder]
    return '\n'.join(lines) + '\n'


class _BatchNorm(nn.BatchNorm2d):
    """Falls back to running statistics when a batch has a single value per channel."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] * x.shape[2] * x.shape[3] == 1:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                training=False, eps=self.eps)
        return super().forward(x)


def _block(block: Block, in_channels: int) -> nn.Sequential:
    padding = block.kernel // 2
    if block.kind == 'conv_up':
        conv = nn.ConvTranspose2d(in_channels, block.channels, block.kernel, stride=2,
                                  padding=padding, output_padding=1)
    else:
        stride = 2 if block.kind == 'conv_down' else 1
        conv = nn.Conv2d(in_channels, block.channels, block.kernel, stride=stride, padding=padding)
    return nn.Sequential(conv, _BatchNorm(block.channels), nn.LeakyReLU(LEAKY_SLOPE))


class Reconstructor(nn.Module):

    def __init__(self, spec: ReconstructorSpec):
        super().__init__()
        self.spec = spec
        layers, channels = [], spec.noise_channels
        for block in spec.encoder:
            layers.append(_block(block, channels))
            channels = block.channels
        for level in reversed(spec.decoder_levels()):
            for block in level:
                layers.append(_block(block, channels))
                channels = block.channels
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(channels, spec.out_channels, kernel_size=1)

    @property
    def divisor(self) -> int:
        return 2 ** self.spec.downsample_count

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(self.body(z)))


def build_reconstructor(spec: ReconstructorSpec, seed: int, dtype: torch.dtype = torch.float32) -> Reconstructor:
    """
    Builds the generator with parameters drawn from `seed` alone; the global
    torch RNG is left untouched.
    """
    if spec.downsample_count != spec.upsample_count:
        raise ValueError(f"Mismatched resolution schedules: encoder downsamples {spec.downsample_count} times, "
                         f"decoder upsamples {spec.upsample_count} times")
    if any(block.kind == 'conv_up' for block in spec.encoder) or any(b.kind == 'conv_down' for b in spec.decoder):
        raise ValueError("Encoder may only downsample and decoder may only upsample")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Reconstructor(spec).to(dtype)


def output_shape(spec: ReconstructorSpec, height: int, width: int) -> Tuple[int, int, int]:
    divisor = 2 ** spec.downsample_count
    if height % divisor or width % divisor:
        raise ValueError(f"Target {height}x{width} is not divisible by {divisor} "
                         f"({spec.downsample_count} downsampling stages)")
    return height, width, spec.out_channels
