"""Densely connected convolution block.

Layer ``l`` sees the channel concatenation of the block input and the
outputs of layers ``0..l-1`` and adds ``growth`` new ReLU feature maps.
Two switches cover the ablation variants: ``concat=False`` turns the block
into a plain conv stack, ``output="last"`` forwards only the final layer's
maps instead of the whole concatenation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .errors import ConfigError, DimensionError
from .tensor import Tensor, concat_channels, conv2d, conv_output_size, relu


@dataclass(frozen=True)
class DenseBlockSpec:
    num_layers: int = 8
    growth: int = 32
    kernel: int = 3
    include_input: bool = True
    concat: bool = True
    padding: str = "same"
    output: str = "all"

    def __post_init__(self):
        if self.num_layers < 0 or self.growth < 1 or self.kernel < 1:
            raise ConfigError(f"invalid dense block sizes: {self}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"dense block padding must be 'same' or 'valid', got {self.padding!r}")
        if self.output not in ("all", "last"):
            raise ConfigError(f"dense block output must be 'all' or 'last', got {self.output!r}")
        if self.concat and self.padding != "same":
            raise ConfigError("concatenating dense blocks need 'same' padding to keep maps aligned")

    def layer_in_channels(self, in_channels: int) -> list[int]:
        if self.concat:
            return [in_channels + l * self.growth for l in range(self.num_layers)]
        return [in_channels] + [self.growth] * (self.num_layers - 1)

    def out_channels(self, in_channels: int) -> int:
        if self.num_layers == 0:
            return in_channels
        if self.output == "last" or not self.concat:
            return self.growth
        return (in_channels if self.include_input else 0) + self.num_layers * self.growth

    def out_size(self, size: int) -> int:
        for _ in range(self.num_layers):
            size = conv_output_size(size, self.kernel, 1, self.padding)
        return size


def dense_block_param_shapes(spec: DenseBlockSpec, in_channels: int, prefix: str = "dense"):
    shapes = {}
    for l, c in enumerate(spec.layer_in_channels(in_channels)):
        shapes[f"{prefix}.{l}.kernel"] = (spec.growth, c, spec.kernel, spec.kernel)
        shapes[f"{prefix}.{l}.bias"] = (spec.growth,)
    return shapes


def dense_block_param_count(spec: DenseBlockSpec, in_channels: int) -> int:
    """Closed-form weight + bias count."""
    k2, g, n = spec.kernel * spec.kernel, spec.growth, spec.num_layers
    if n == 0:
        return 0
    if spec.concat:
        weights = sum(k2 * (in_channels + l * g) * g for l in range(n))
    else:
        weights = k2 * in_channels * g + (n - 1) * k2 * g * g
    return weights + n * g


def dense_block_forward(
    x: Tensor, spec: DenseBlockSpec, params: Mapping[str, Tensor], prefix: str = "dense"
) -> Tensor:
    if spec.num_layers == 0:
        return x
    if spec.padding == "valid" and spec.out_size(min(x.shape[2], x.shape[3])) < 1:
        raise DimensionError(f"dense block: {spec.num_layers} valid convs shrink {x.shape[2:]} to nothing")
    features = [x]
    h = x
    for l, expected in enumerate(spec.layer_in_channels(x.shape[1])):
        inp = concat_channels(features) if spec.concat and len(features) > 1 else h
        if inp.shape[1] != expected:
            raise DimensionError(
                f"dense layer {l}: got {inp.shape[1]} input channels, expected {expected}"
            )
        h = relu(conv2d(inp, params[f"{prefix}.{l}.kernel"], params[f"{prefix}.{l}.bias"],
                        padding=spec.padding))
        features.append(h)
    if spec.output == "last" or not spec.concat:
        return h
    return concat_channels(features if spec.include_input else features[1:])
