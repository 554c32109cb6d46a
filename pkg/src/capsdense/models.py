"""Model specs, parameter stores and forward passes.

Three trunks share the capsule head:

* ``baseline-capsnet`` / ``capsnet-variant``: one (or two) 9x9 ReLU convs;
* ``dcnet`` and its ablations: a :class:`~capsdense.dense.DenseBlockSpec`;
* ``dcnet-plus-plus``: a stack of dense levels, each with its own primary
  capsules and class head, plus a merged head over all primary capsules.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from .capsule import RoutingState, predict, predict_class, route, squash
from .decoder import DecoderSpec, decode, decoder_param_shapes, mask_capsules
from .dense import DenseBlockSpec, dense_block_forward, dense_block_param_shapes
from .errors import ConfigError, ContractError
from .tensor import Tensor, as_tensor, concat, conv2d, conv_output_size, no_grad, relu

KINDS = (
    "baseline-capsnet",
    "capsnet-variant",
    "dcnet",
    "dcnet-variant-one",
    "dcnet-variant-two",
    "dcnet-variant-three",
    "dcnet-plus-plus",
)
STEM_KINDS = ("baseline-capsnet", "capsnet-variant")


@dataclass(frozen=True)
class PrimaryCapsSpec:
    channels: int = 32
    dim: int = 8
    kernel: int = 9
    stride: int = 2
    padding: str = "valid"

    @property
    def maps(self) -> int:
        return self.channels * self.dim


@dataclass(frozen=True)
class LevelSpec:
    dense: DenseBlockSpec
    primary: PrimaryCapsSpec
    head_dim: int = 12


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "dcnet"
    input_shape: tuple[int, int, int] = (1, 28, 28)
    num_classes: int = 10
    dense: DenseBlockSpec | None = DenseBlockSpec()
    stem_layers: int = 1
    stem_channels: int = 256
    stem_kernel: int = 9
    primary: PrimaryCapsSpec = PrimaryCapsSpec()
    digit_dim: int = 16
    routing_iters: int = 3
    decoder: str | None = "dense"
    decoder_widths: tuple[int, int] | None = None
    fc3_width: int | None = None
    recon_channels: int | None = None
    levels: tuple[LevelSpec, ...] = ()
    merged_dim: int = 18
    head_isolation: bool = True
    init_std: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.decoder_widths is not None:
            object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))

    @property
    def class_dim(self) -> int:
        if self.kind == "dcnet-plus-plus":
            return sum(lv.head_dim for lv in self.levels) + self.merged_dim
        return self.digit_dim

    @property
    def num_heads(self) -> int:
        return len(self.levels) + 1 if self.kind == "dcnet-plus-plus" else 1

    def decoder_spec(self) -> DecoderSpec | None:
        if self.decoder is None:
            return None
        c, h, w = self.input_shape
        return DecoderSpec(
            in_dim=self.num_classes * self.class_dim,
            out_shape=(self.recon_channels or c, h, w),
            kind=self.decoder,
            widths=self.decoder_widths,
            fc3_width=self.fc3_width,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model spec fields: {sorted(unknown)}")
        if d.get("dense") is not None:
            d["dense"] = DenseBlockSpec(**d["dense"])
        if "primary" in d:
            d["primary"] = PrimaryCapsSpec(**d["primary"])
        d["levels"] = tuple(
            LevelSpec(DenseBlockSpec(**lv["dense"]), PrimaryCapsSpec(**lv["primary"]), lv["head_dim"])
            for lv in d.get("levels", ())
        )
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


# -- geometry ------------------------------------------------------------------


@dataclass
class _Stage:
    """Shapes through one trunk + primary-capsule stage."""

    trunk_channels: int
    trunk_size: tuple[int, int]
    grid: tuple[int, int]
    num_caps: int
    primary: PrimaryCapsSpec


def _primary_stage(channels: int, size: tuple[int, int], p: PrimaryCapsSpec, where: str) -> _Stage:
    if p.padding not in ("same", "valid"):
        raise ConfigError(f"{where}: primary padding must be 'same' or 'valid', got {p.padding!r}")
    grid = tuple(conv_output_size(s, p.kernel, p.stride, p.padding) for s in size)
    if min(grid) < 1:
        raise ConfigError(
            f"{where}: {p.kernel}x{p.kernel}/{p.stride} {p.padding} primary conv underflows "
            f"a {size[0]}x{size[1]} map"
        )
    return _Stage(channels, size, grid, p.channels * grid[0] * grid[1], p)


def _stages(spec: ModelSpec) -> list[_Stage]:
    if spec.kind not in KINDS:
        raise ConfigError(f"unknown model kind {spec.kind!r}; expected one of {KINDS}")
    c, h, w = spec.input_shape
    if min(c, h, w, spec.num_classes, spec.digit_dim, spec.routing_iters) < 1:
        raise ConfigError(f"input shape, class count, digit dim and routing iters must be >= 1")
    if spec.kind in STEM_KINDS:
        if spec.stem_layers < 1:
            raise ConfigError("stem_layers must be >= 1")
        size = tuple(conv_output_size(s, spec.stem_kernel, 1, "valid") for s in (h, w))
        if min(size) < 1:
            raise ConfigError(f"stem conv {spec.stem_kernel}x{spec.stem_kernel} underflows {h}x{w}")
        return [_primary_stage(spec.stem_channels, size, spec.primary, "primary caps")]
    if spec.kind == "dcnet-plus-plus":
        if not spec.levels:
            raise ConfigError("dcnet-plus-plus needs at least one level")
        stages, channels, size = [], c, (h, w)
        for i, lv in enumerate(spec.levels, 1):
            size = tuple(lv.dense.out_size(s) for s in size)
            if min(size) < 1:
                raise ConfigError(f"level {i}: dense block underflows the spatial size")
            stage = _primary_stage(lv.dense.out_channels(channels), size, lv.primary, f"level {i}")
            stages.append(stage)
            channels, size = lv.primary.maps, stage.grid
        return stages
    if spec.dense is None:
        raise ConfigError(f"{spec.kind} needs a dense block spec")
    size = tuple(spec.dense.out_size(s) for s in (h, w))
    if min(size) < 1:
        raise ConfigError("dense block underflows the spatial size")
    return [_primary_stage(spec.dense.out_channels(c), size, spec.primary, "primary caps")]


def validate(spec: ModelSpec) -> None:
    """Raise :class:`ConfigError` naming the first violated constraint."""
    _stages(spec)
    if spec.decoder not in (None, "dense", "baseline"):
        raise ConfigError(f"decoder must be 'dense', 'baseline' or None, got {spec.decoder!r}")
    if spec.kind == "dcnet-plus-plus" and min([lv.head_dim for lv in spec.levels] + [spec.merged_dim]) < 1:
        raise ConfigError("head dims must be >= 1")
    if spec.init_std <= 0:
        raise ConfigError("init_std must be positive")


def param_shapes(spec: ModelSpec) -> "OrderedDict[str, tuple[int, ...]]":
    """Name -> shape for every trainable tensor, in a fixed order."""
    validate(spec)
    stages = _stages(spec)
    c = spec.input_shape[0]
    k = spec.num_classes
    shapes: OrderedDict[str, tuple] = OrderedDict()
    if spec.kind == "dcnet-plus-plus":
        channels = c
        for i, (lv, st) in enumerate(zip(spec.levels, stages), 1):
            shapes.update(dense_block_param_shapes(lv.dense, channels, f"level{i}.dense"))
            p = lv.primary
            shapes[f"level{i}.primary.kernel"] = (p.maps, st.trunk_channels, p.kernel, p.kernel)
            shapes[f"level{i}.primary.bias"] = (p.maps,)
            channels = p.maps
        for i, (lv, st) in enumerate(zip(spec.levels, stages), 1):
            shapes[f"head{i}.W"] = (st.num_caps, k, lv.primary.dim, lv.head_dim)
        total = sum(st.num_caps for st in stages)
        dims = {lv.primary.dim for lv in spec.levels}
        if len(dims) != 1:
            raise ConfigError("merged head needs equal primary capsule dims across levels")
        shapes["merged.W"] = (total, k, dims.pop(), spec.merged_dim)
    else:
        if spec.kind in STEM_KINDS:
            ks = spec.stem_kernel
            shapes["stem.0.kernel"] = (spec.stem_channels, c, ks, ks)
            shapes["stem.0.bias"] = (spec.stem_channels,)
            for l in range(1, spec.stem_layers):
                shapes[f"stem.{l}.kernel"] = (spec.stem_channels, spec.stem_channels, ks, ks)
                shapes[f"stem.{l}.bias"] = (spec.stem_channels,)
        else:
            shapes.update(dense_block_param_shapes(spec.dense, c, "dense"))
        st, p = stages[0], spec.primary
        shapes["primary.kernel"] = (p.maps, st.trunk_channels, p.kernel, p.kernel)
        shapes["primary.bias"] = (p.maps,)
        shapes["digitcaps.W"] = (st.num_caps, k, p.dim, spec.digit_dim)
    dec = spec.decoder_spec()
    if dec is not None:
        shapes.update(decoder_param_shapes(dec))
    return shapes


def param_count(spec: ModelSpec) -> int:
    return sum(math.prod(s) for s in param_shapes(spec).values())


def param_breakdown(spec: ModelSpec) -> "OrderedDict[str, int]":
    """Parameter totals grouped by module (``dense``, ``level2.primary``, ...)."""
    out: OrderedDict[str, int] = OrderedDict()
    for name, shape in param_shapes(spec).items():
        parts = name.split(".")
        module = ".".join(parts[:2]) if parts[0].startswith("level") else parts[0]
        out[module] = out.get(module, 0) + math.prod(shape)
    return out


# -- parameters ----------------------------------------------------------------


class ParamStore(OrderedDict):
    """Ordered ``name -> Tensor`` map of trainable parameters."""

    def count(self) -> int:
        return sum(t.size for t in self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.items())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = [k for k in self if k not in arrays]
        extra = [k for k in arrays if k not in self]
        if missing or extra:
            raise ContractError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, t in self.items():
            if arrays[k].shape != t.shape:
                raise ContractError(f"parameter {k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.ascontiguousarray(arrays[k], dtype=t.data.dtype)


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(spec: ModelSpec, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        elif name.startswith("decoder."):
            data = truncated_normal(rng, shape, 1.0 / math.sqrt(shape[0]))
        else:
            data = truncated_normal(rng, shape, spec.init_std)
        store[name] = Tensor(data, requires_grad=True, name=name)
    return store


# -- forward -------------------------------------------------------------------


@dataclass
class ModelOutput:
    v: Tensor
    heads: list[Tensor]
    reconstruction: Tensor | None
    predictions: np.ndarray
    routing: list[RoutingState] = field(default_factory=list)
    primary: list[Tensor] = field(default_factory=list)


def primary_capsules(features: Tensor, p: PrimaryCapsSpec, params, prefix: str) -> tuple[Tensor, Tensor]:
    """Return the raw conv maps and the squashed capsules ``[N, channels*H*W, dim]``."""
    maps = conv2d(features, params[f"{prefix}.kernel"], params[f"{prefix}.bias"],
                  stride=p.stride, padding=p.padding)
    n, _, h, w = maps.shape
    caps = maps.reshape(n, p.channels, p.dim, h, w).transpose(0, 1, 3, 4, 2)
    return maps, squash(caps.reshape(n, p.channels * h * w, p.dim))


class CapsuleModel:
    """A built network: its spec, parameters, and forward pass."""

    def __init__(self, spec: ModelSpec, params: ParamStore):
        self.spec = spec
        self.params = params
        self.decoder = spec.decoder_spec()

    def __call__(self, x, labels=None, **kwargs) -> ModelOutput:
        return self.forward(x, labels, **kwargs)

    def forward(self, x, labels=None, isolate: bool | None = None,
                keep_routing: bool = False, couplings: list | None = None) -> ModelOutput:
        """Classify a batch and reconstruct it from the masked class capsule.

        ``labels`` select the capsule fed to the decoder (training); without
        them the predicted class is used.  ``couplings`` (one array per head,
        as found in ``ModelOutput.routing``) pins the routing coefficients.
        """
        spec, params = self.spec, self.params
        x = as_tensor(x)
        if tuple(x.shape[1:]) != spec.input_shape:
            raise ContractError(f"input shape {x.shape[1:]} != spec {spec.input_shape}")
        iters = spec.routing_iters
        isolate = spec.head_isolation if isolate is None else isolate
        heads, states, caps_list = [], [], []
        pinned = iter(couplings) if couplings is not None else None

        def routed(u_hat):
            c = next(pinned) if pinned is not None else None
            return route(u_hat, iters, keep_routing, couplings=c)

        if spec.kind == "dcnet-plus-plus":
            h = x
            for i, lv in enumerate(spec.levels, 1):
                inp = h.detach() if isolate and i > 1 else h
                feat = dense_block_forward(inp, lv.dense, params, f"level{i}.dense")
                h, caps = primary_capsules(feat, lv.primary, params, f"level{i}.primary")
                caps_list.append(caps)
                v_i, st = routed(predict(caps, params[f"head{i}.W"]))
                heads.append(v_i)
                states.append(st)
            merged = caps_list[0] if len(caps_list) == 1 else concat(caps_list, axis=1)
            v_m, st = routed(predict(merged, params["merged.W"]))
            heads.append(v_m)
            states.append(st)
            v = concat(heads, axis=2)
        else:
            if spec.kind in STEM_KINDS:
                feat = x
                for l in range(spec.stem_layers):
                    feat = relu(conv2d(feat, params[f"stem.{l}.kernel"], params[f"stem.{l}.bias"],
                                       padding="valid" if l == 0 else "same"))
            else:
                feat = dense_block_forward(x, spec.dense, params, "dense")
            _, caps = primary_capsules(feat, spec.primary, params, "primary")
            caps_list.append(caps)
            v, st = routed(predict(caps, params["digitcaps.W"]))
            heads.append(v)
            states.append(st)
        preds = predict_class(v)
        recon = None
        if self.decoder is not None:
            chosen = preds if labels is None else np.asarray(labels)
            recon = decode(mask_capsules(v, chosen), self.decoder, params)
        return ModelOutput(v, heads, recon, preds, states, caps_list)

    def reconstruct(self, v, classes) -> Tensor:
        if self.decoder is None:
            raise ContractError("model has no decoder")
        return decode(mask_capsules(v, classes), self.decoder, self.params)


def build(spec: ModelSpec, seed: int = 0) -> CapsuleModel:
    """Deterministically initialise a model from its spec."""
    return CapsuleModel(spec, init_params(spec, seed))


# -- perturbation study ---------------------------------------------------------


def perturb_digitcaps(model: CapsuleModel, v: np.ndarray, label: int, dim: int, delta: float,
                      perturb_class: int | None = None) -> np.ndarray:
    """Reconstruction ``[C, H, W]`` after adding ``delta`` to one capsule entry.

    ``v`` is one sample's class capsules ``[K, D]``; the decoder sees only
    class ``label``.  ``perturb_class`` defaults to ``label``.
    """
    if model.decoder is None:
        raise ContractError("perturbation needs a decoder-bearing model")
    v = np.array(v, dtype=np.float64)
    k, d = v.shape
    perturb_class = label if perturb_class is None else perturb_class
    if not 0 <= dim < d:
        raise IndexError(f"capsule dim {dim} out of range [0, {d})")
    if not (0 <= label < k and 0 <= perturb_class < k):
        raise IndexError(f"class index out of range [0, {k})")
    v[perturb_class, dim] += delta
    with no_grad():
        return model.reconstruct(v[None], [label]).data[0]


def perturb_sweep(model: CapsuleModel, v: np.ndarray, label: int, delta: float = -0.2) -> np.ndarray:
    """Baseline reconstruction followed by one per perturbed capsule dimension."""
    v = np.asarray(v)
    with no_grad():
        base = model.reconstruct(v[None], [label]).data[0]
    images = [base] + [perturb_digitcaps(model, v, label, d, delta) for d in range(v.shape[1])]
    return np.stack(images)


# -- builders ------------------------------------------------------------------


def build_spec(kind: str, input_shape: Iterable[int] = (1, 28, 28), num_classes: int = 10) -> ModelSpec:
    """Spec for a model kind, using the MNIST-scale architecture by default."""
    input_shape = tuple(input_shape)
    base = ModelSpec(kind=kind, input_shape=input_shape, num_classes=num_classes)
    if kind == "baseline-capsnet":
        return replace(base, dense=None, decoder="baseline")
    if kind == "capsnet-variant":
        return replace(base, dense=None, stem_layers=2, decoder="baseline")
    if kind == "dcnet":
        return base
    if kind == "dcnet-variant-one":
        return replace(base, dense=DenseBlockSpec(num_layers=3, growth=8))
    if kind == "dcnet-variant-two":
        return replace(base, dense=DenseBlockSpec(concat=False, padding="valid"))
    if kind == "dcnet-variant-three":
        return replace(base, dense=DenseBlockSpec(output="last"))
    if kind == "dcnet-plus-plus":
        return dcnetpp_spec(input_shape, num_classes)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {KINDS}")


def dcnetpp_spec(input_shape=(3, 32, 32), num_classes: int = 10,
                 head_dims: tuple[int, int, int, int] = (12, 12, 12, 18),
                 dense: DenseBlockSpec = DenseBlockSpec(num_layers=4, growth=32),
                 capsules: int = 12, recon_channels: int = 1) -> ModelSpec:
    """Three-level hierarchy; only the first primary conv is 'valid' so deeper levels fit."""
    paddings = ("valid", "same", "same")
    levels = tuple(
        LevelSpec(dense, PrimaryCapsSpec(channels=capsules, dim=8, padding=pad), head_dims[i])
        for i, pad in enumerate(paddings)
    )
    return ModelSpec(
        kind="dcnet-plus-plus", input_shape=tuple(input_shape), num_classes=num_classes,
        dense=None, levels=levels, merged_dim=head_dims[3], recon_channels=recon_channels,
    )


def _synth_dcnet() -> ModelSpec:
    return ModelSpec(kind="dcnet", input_shape=(1, 16, 16), num_classes=4,
                     dense=DenseBlockSpec(num_layers=4, growth=16))


def _synth_capsnet() -> ModelSpec:
    return replace(build_spec("baseline-capsnet", (1, 16, 16), 4), stem_channels=64, stem_kernel=5,
                   primary=PrimaryCapsSpec(channels=8, dim=8))


def _synth_dcnetpp() -> ModelSpec:
    return replace(
        dcnetpp_spec((1, 16, 16), 4, head_dims=(4, 4, 4, 6),
                     dense=DenseBlockSpec(num_layers=2, growth=8), capsules=4),
        levels=tuple(
            LevelSpec(DenseBlockSpec(num_layers=2, growth=8),
                      PrimaryCapsSpec(channels=4, dim=8, kernel=3, padding="same"), d)
            for d in (4, 4, 4)
        ),
        decoder_widths=(64, 128),
    )


def tiny_dcnet_spec(side: int = 8, num_classes: int = 2) -> ModelSpec:
    """Small enough for exhaustive finite-difference checks."""
    return ModelSpec(
        kind="dcnet", input_shape=(1, side, side), num_classes=num_classes,
        dense=DenseBlockSpec(num_layers=2, growth=2),
        primary=PrimaryCapsSpec(channels=4, dim=4, kernel=3, stride=2, padding="same"),
        digit_dim=4, decoder_widths=(8, 16), init_std=0.3,
    )


PRESETS = {
    "mnist-dcnet": lambda: build_spec("dcnet"),
    "mnist-dcnet-small": lambda: replace(build_spec("dcnet"), dense=DenseBlockSpec(num_layers=4, growth=16)),
    "mnist-capsnet": lambda: build_spec("baseline-capsnet"),
    "cifar10-dcnet": lambda: build_spec("dcnet", (3, 32, 32)),
    "cifar10-dcnetpp": lambda: dcnetpp_spec(),
    "svhn-dcnet": lambda: ModelSpec(
        kind="dcnet", input_shape=(3, 32, 32), num_classes=10,
        dense=DenseBlockSpec(num_layers=4, growth=18),
        primary=PrimaryCapsSpec(channels=16, dim=6), digit_dim=8,
    ),
    "tumor-dcnet": lambda: ModelSpec(
        kind="dcnet", input_shape=(1, 64, 64), num_classes=3,
        dense=DenseBlockSpec(num_layers=4, growth=16),
        primary=PrimaryCapsSpec(channels=6, dim=8),
    ),
    "synth-dcnet": _synth_dcnet,
    "synth-capsnet": _synth_capsnet,
    "synth-dcnetpp": _synth_dcnetpp,
    "tiny-dcnet": tiny_dcnet_spec,
}

PRESET_TRAIN_DEFAULTS = {"tumor-dcnet": {"lr0": 1e-4}}


def build_preset(name: str) -> ModelSpec:
    """Named hyperparameter bundle; model kinds are accepted as MNIST-scale presets."""
    if name in PRESETS:
        return PRESETS[name]()
    if name in KINDS:
        return build_spec(name)
    raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS) + list(KINDS)}")
