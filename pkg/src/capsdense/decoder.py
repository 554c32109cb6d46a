"""Reconstruction decoders fed by the masked class capsules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, concat, mse, relu, sigmoid


@dataclass(frozen=True)
class DecoderSpec:
    """``kind`` is ``"dense"`` (4 FC layers, fc3 reads fc1 and fc2) or ``"baseline"`` (3 FC layers)."""

    in_dim: int
    out_shape: tuple[int, int, int]
    kind: str = "dense"
    widths: tuple[int, int] | None = None
    fc3_width: int | None = None

    def __post_init__(self):
        if self.kind not in ("dense", "baseline"):
            raise ConfigError(f"decoder kind must be 'dense' or 'baseline', got {self.kind!r}")
        object.__setattr__(self, "out_shape", tuple(self.out_shape))
        if self.widths is None:
            side = max(self.out_shape[1:])
            object.__setattr__(self, "widths", (600, 1200) if side > 32 else (512, 1024))
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.fc3_width is None:
            object.__setattr__(self, "fc3_width", self.widths[1])

    @property
    def pixels(self) -> int:
        c, h, w = self.out_shape
        return c * h * w

    def layer_dims(self) -> list[tuple[str, int, int]]:
        w1, w2 = self.widths
        if self.kind == "baseline":
            return [("fc1", self.in_dim, w1), ("fc2", w1, w2), ("fc3", w2, self.pixels)]
        return [
            ("fc1", self.in_dim, w1),
            ("fc2", w1, w2),
            ("fc3", w1 + w2, self.fc3_width),
            ("fc4", self.fc3_width, self.pixels),
        ]


def decoder_param_shapes(spec: DecoderSpec, prefix: str = "decoder") -> dict[str, tuple]:
    shapes = {}
    for name, fan_in, fan_out in spec.layer_dims():
        shapes[f"{prefix}.{name}.weight"] = (fan_in, fan_out)
        shapes[f"{prefix}.{name}.bias"] = (fan_out,)
    return shapes


def mask_capsules(v, classes) -> Tensor:
    """Zero every class capsule except ``classes[b]`` and flatten to ``[B, K*D]``."""
    v = as_tensor(v)
    bsz, k, d = v.shape
    mask = np.zeros((bsz, k, 1), dtype=v.dtype)
    mask[np.arange(bsz), np.asarray(classes), 0] = 1.0
    return (v * Tensor(mask)).reshape(bsz, k * d)


def decode(masked_caps, spec: DecoderSpec, params: Mapping[str, Tensor], prefix: str = "decoder") -> Tensor:
    masked_caps = as_tensor(masked_caps)
    if masked_caps.ndim != 2 or masked_caps.shape[1] != spec.in_dim:
        raise DimensionError(
            f"decode: expected input [B, {spec.in_dim}], got {masked_caps.shape}"
        )

    def fc(name, x):
        return x @ params[f"{prefix}.{name}.weight"] + params[f"{prefix}.{name}.bias"]

    h1 = relu(fc("fc1", masked_caps))
    h2 = relu(fc("fc2", h1))
    if spec.kind == "baseline":
        out = sigmoid(fc("fc3", h2))
    else:
        h3 = relu(fc("fc3", concat([h1, h2], axis=1)))
        out = sigmoid(fc("fc4", h3))
    return out.reshape(masked_caps.shape[0], *spec.out_shape)


def default_recon_multiplier(pixels: int) -> float:
    """0.0005 at MNIST size, scaled inversely with the number of output pixels."""
    return 0.0005 * 784 / pixels


def reconstruction_loss(recon, target, multiplier: float) -> Tensor:
    """``multiplier`` times the per-sample sum of squared errors, averaged over the batch."""
    recon, target = as_tensor(recon), as_tensor(target)
    if recon.shape != target.shape:
        raise DimensionError(f"reconstruction_loss: {recon.shape} vs {target.shape}")
    if multiplier <= 0:
        raise ConfigError(f"reconstruction multiplier must be positive, got {multiplier}")
    per_sample = recon.size // recon.shape[0]
    return mse(recon, target) * (multiplier * per_sample)
