"""Small fully-convolutional feature extractor.

Each stage opens with a stride-2 3x3 convolution and continues with
stride-1 3x3 convolutions, relu after every one, so the default three
stages turn a 64x64x3 image into an 8x8 feature map. Inputs are raw
[0, 1] pixels with no mean subtraction, which keeps attack budgets in
plain eps/255 pixel units.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import InvalidArgumentError, Tensor
from .util import glorot_uniform


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    in_channels: int = 3
    stages: tuple = ((16, 2), (32, 2), (64, 2))  # (out_channels, conv count)

    @property
    def downsample_factor(self):
        return 2 ** len(self.stages)

    @property
    def feature_channels(self):
        return self.stages[-1][0]

    @property
    def feature_size(self):
        return self.input_size // self.downsample_factor

    def validate(self):
        if self.input_size % self.downsample_factor != 0:
            raise InvalidArgumentError(
                f"input size {self.input_size} not divisible by "
                f"downsampling factor {self.downsample_factor}")
        for out_ch, n_convs in self.stages:
            if out_ch < 1 or n_convs < 1:
                raise InvalidArgumentError(f"invalid stage ({out_ch}, {n_convs})")


@dataclass
class FeatureMap:
    """H x W x D' feature tensor plus the id of the image that produced it."""
    values: Tensor
    provenance: int = -1

    def __post_init__(self):
        if not np.isfinite(self.values.data).all():
            raise InvalidArgumentError("feature map contains non-finite entries")


class Backbone:
    """Stack of 3x3 conv + relu stages; parameters are flat named tensors."""

    def __init__(self, config=None, seed_rng=None):
        self.config = config or BackboneConfig()
        self.config.validate()
        self.kernels = []
        in_ch = self.config.in_channels
        rng = seed_rng or np.random.default_rng(0)
        for out_ch, n_convs in self.config.stages:
            for _ in range(n_convs):
                fan_in, fan_out = 9 * in_ch, 9 * out_ch
                k = glorot_uniform(rng, (3, 3, in_ch, out_ch), fan_in, fan_out)
                self.kernels.append(Tensor(k, requires_grad=True))
                in_ch = out_ch

    def parameters(self):
        named = {}
        idx = 0
        for s, (_, n_convs) in enumerate(self.config.stages):
            for c in range(n_convs):
                named[f"backbone.stage{s}.conv{c}"] = self.kernels[idx]
                idx += 1
        return named

    def extract(self, image, provenance=-1):
        """Run the stack on an (H, W, 3) or (B, H, W, 3) image in [0, 1]."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.data.ndim not in (3, 4) or x.shape[-1] != self.config.in_channels:
            raise ad.ShapeError("extract", x.shape)
        spatial = x.shape[-3:-1]
        if spatial != (self.config.input_size, self.config.input_size):
            raise ad.ShapeError("extract", x.shape)
        if x.data.min() < 0.0 or x.data.max() > 1.0:
            raise InvalidArgumentError(
                "extract: pixels outside [0, 1]; clip before calling "
                f"(got range [{x.data.min():.4g}, {x.data.max():.4g}])")
        idx = 0
        for _, n_convs in self.config.stages:
            for c in range(n_convs):
                stride = 2 if c == 0 else 1
                x = ad.relu(ad.conv2d(x, self.kernels[idx], stride=stride, pad=1))
                idx += 1
        return FeatureMap(values=x, provenance=provenance)
