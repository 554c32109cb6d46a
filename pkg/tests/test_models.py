from dataclasses import replace

import numpy as np
import pytest

from capsdense.capsule import capsule_logits, margin_loss
from capsdense.errors import ConfigError, ContractError
from capsdense.models import (KINDS, PRESET_TRAIN_DEFAULTS, PRESETS, ModelSpec, build, build_preset,
                              build_spec, dcnetpp_spec, init_params, param_breakdown, param_count, param_shapes,
                              perturb_digitcaps, perturb_sweep, tiny_dcnet_spec)
from capsdense.tensor import no_grad

# exact counts, frozen after checking them against hand arithmetic
FROZEN_COUNTS = {
    "baseline-capsnet": 8_215_568,
    "capsnet-variant": 13_524_240,
    "dcnet": 12_671_248,
    "dcnet-variant-one": 7_601_856,
    "dcnet-variant-two": 3_877_936,
    "dcnet-variant-three": 8_005_648,
}


def baseline_by_hand():
    conv = 9 * 9 * 1 * 256 + 256
    primary = 9 * 9 * 256 * 256 + 256
    digit = (6 * 6 * 32) * 10 * 8 * 16
    decoder = (160 * 512 + 512) + (512 * 1024 + 1024) + (1024 * 784 + 784)
    return conv + primary + digit + decoder


class TestParamCounts:
    @pytest.mark.parametrize("kind", sorted(FROZEN_COUNTS))
    def test_frozen(self, kind):
        assert param_count(build_spec(kind)) == FROZEN_COUNTS[kind]

    def test_baseline_hand_count(self):
        assert param_count(build_spec("baseline-capsnet")) == baseline_by_hand()

    def test_count_equals_built_store(self):
        spec = build_preset("synth-dcnetpp")
        assert build(spec, 0).params.count() == param_count(spec)

    def test_breakdown_sums_to_total(self):
        spec = build_preset("cifar10-dcnetpp")
        bd = param_breakdown(spec)
        assert sum(bd.values()) == param_count(spec)
        assert {"level1.dense", "level3.primary", "merged", "decoder"} <= set(bd)

    def test_table_ordering(self):
        c = {k: param_count(build_spec(k)) for k in FROZEN_COUNTS}
        assert (c["dcnet-variant-two"] < c["dcnet-variant-one"] < c["dcnet-variant-three"]
                < c["baseline-capsnet"] < c["dcnet"] < c["capsnet-variant"])

    def test_dcnetpp_cifar_near_reported(self):
        assert abs(param_count(build_preset("cifar10-dcnetpp")) / 13.4e6 - 1) < 0.12


class TestGeometry:
    def test_baseline_primary_grid(self):
        model = build(build_spec("baseline-capsnet"), 0)
        out = model(np.zeros((1, 1, 28, 28)))
        assert out.primary[0].shape == (1, 1152, 8)

    def test_dcnet_primary_conv_reads_257_maps(self):
        assert param_shapes(build_spec("dcnet"))["primary.kernel"] == (256, 257, 9, 9)

    def test_capsnet_variant_second_conv(self):
        shapes = param_shapes(build_spec("capsnet-variant"))
        assert shapes["stem.1.kernel"] == (256, 256, 9, 9)

    def test_variant_shapes(self):
        assert param_shapes(build_spec("dcnet-variant-one"))["primary.kernel"][1] == 1 + 3 * 8
        assert param_shapes(build_spec("dcnet-variant-two"))["dense.7.kernel"] == (32, 32, 3, 3)
        assert param_shapes(build_spec("dcnet-variant-three"))["primary.kernel"][1] == 32

    def test_underflow_is_config_error(self):
        with pytest.raises(ConfigError, match="underflows"):
            param_count(build_spec("baseline-capsnet", (1, 12, 12)))
        with pytest.raises(ConfigError, match="level"):
            param_count(dcnetpp_spec((3, 8, 8)))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            build_spec("resnet")
        with pytest.raises(ConfigError):
            param_count(ModelSpec(kind="resnet"))

    def test_invalid_fields(self):
        with pytest.raises(ConfigError):
            param_count(replace(tiny_dcnet_spec(), decoder="conv"))
        with pytest.raises(ConfigError):
            param_count(replace(tiny_dcnet_spec(), routing_iters=0))


class TestPresets:
    def test_mnist(self):
        spec = build_preset("mnist-dcnet")
        assert (spec.dense.num_layers, spec.dense.growth) == (8, 32)
        assert (spec.primary.channels, spec.primary.dim, spec.digit_dim) == (32, 8, 16)

    def test_svhn(self):
        spec = build_preset("svhn-dcnet")
        assert (spec.primary.channels, spec.primary.dim, spec.digit_dim) == (16, 6, 8)
        assert (spec.dense.num_layers, spec.dense.growth) == (4, 18)

    def test_tumor(self):
        spec = build_preset("tumor-dcnet")
        assert (spec.dense.num_layers, spec.dense.growth, spec.primary.channels) == (4, 16, 6)
        assert PRESET_TRAIN_DEFAULTS["tumor-dcnet"]["lr0"] == 1e-4

    def test_cifar_dcnetpp(self):
        spec = build_preset("cifar10-dcnetpp")
        assert spec.num_heads == 4 and spec.class_dim == 54
        assert all(lv.primary.channels == 12 for lv in spec.levels)
        assert spec.decoder_spec().out_shape == (1, 32, 32)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            build_preset("imagenet")

    def test_kinds_accepted(self):
        for kind in KINDS:
            assert build_preset(kind).kind == kind

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_forward_shape_and_norms(self, name):
        spec = build_preset(name)
        model = build(spec, 0)
        x = np.random.default_rng(0).uniform(size=(2, *spec.input_shape))
        with no_grad():
            out = model(x)
        assert out.v.shape == (2, spec.num_classes, spec.class_dim)
        for head in out.heads:
            norms = np.linalg.norm(head.data, axis=-1)
            assert ((norms >= 0) & (norms < 1)).all()
        # the concatenated capsule of a multi-head model is bounded by sqrt(heads)
        assert (np.linalg.norm(out.v.data, axis=-1) < np.sqrt(spec.num_heads)).all()
        assert np.isfinite(out.reconstruction.data).all()


class TestDeterminismAndSerialisation:
    def test_same_seed_same_model(self):
        spec = build_preset("synth-dcnetpp")
        a, b = build(spec, 7), build(spec, 7)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
        x = np.random.default_rng(1).uniform(size=(2, *spec.input_shape))
        np.testing.assert_array_equal(a(x).v.data, b(x).v.data)
        c = build(spec, 8)
        assert not np.array_equal(a.params["merged.W"].data, c.params["merged.W"].data)

    def test_init_scheme(self):
        params = init_params(build_preset("synth-dcnet"), 0)
        assert not params["primary.bias"].data.any()
        w = params["digitcaps.W"].data
        assert np.abs(w).max() <= 2 * 0.05 + 1e-7
        assert w.std() == pytest.approx(0.05 * 0.88, rel=0.05)  # std of a 2-sigma truncated normal

    @pytest.mark.parametrize("name", ["cifar10-dcnetpp", "svhn-dcnet", "mnist-capsnet", "tiny-dcnet"])
    def test_json_round_trip(self, name):
        spec = build_preset(name)
        assert ModelSpec.from_json(spec.to_json()) == spec

    def test_unknown_json_field(self):
        with pytest.raises(ConfigError):
            ModelSpec.from_dict({"kind": "dcnet", "colour": "red"})

    def test_load_arrays_mismatch(self):
        store = init_params(tiny_dcnet_spec(), 0)
        arrays = dict(store.arrays())
        arrays.pop("digitcaps.W")
        with pytest.raises(ContractError, match="digitcaps.W"):
            store.load_arrays(arrays)
        other = init_params(replace(tiny_dcnet_spec(), digit_dim=5), 0)
        with pytest.raises(ContractError):
            store.load_arrays(other.arrays())


class TestDCNetPlusPlus:
    def test_zero_input_zero_params(self):
        spec = build_preset("synth-dcnetpp")
        model = build(spec, 0)
        for p in model.params.values():
            p.data = np.zeros_like(p.data)
        out = model(np.zeros((2, *spec.input_shape)))
        for head in out.heads:
            assert not head.data.any()
        assert out.predictions.tolist() == [0, 0]

    def _grads(self, model, x, targets, head):
        model.params.zero_grad()
        out = model(x, labels=targets.argmax(1))
        margin_loss(capsule_logits(out.heads[head]), targets).backward()
        return {k: p.grad for k, p in model.params.items()}

    def test_isolation_confines_level_losses(self):
        spec = build_preset("synth-dcnetpp")
        model = build(spec, 0)
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(3, *spec.input_shape))
        targets = np.eye(4)[[0, 1, 3]]
        for head in range(3):
            grads = self._grads(model, x, targets, head)
            for name, g in grads.items():
                mine = name.startswith((f"level{head + 1}.", f"head{head + 1}."))
                if mine:
                    assert g is not None and np.abs(g).sum() > 0, name
                else:
                    assert g is None or not g.any(), name

    def test_merged_head_reaches_every_level(self):
        spec = build_preset("synth-dcnetpp")
        model = build(spec, 0)
        x = np.random.default_rng(0).uniform(size=(2, *spec.input_shape))
        grads = self._grads(model, x, np.eye(4)[[0, 2]], 3)
        for lvl in (1, 2, 3):
            assert np.abs(grads[f"level{lvl}.dense.0.kernel"]).sum() > 0

    def test_without_isolation_gradients_cross_levels(self):
        spec = replace(build_preset("synth-dcnetpp"), head_isolation=False)
        model = build(spec, 0)
        x = np.random.default_rng(0).uniform(size=(2, *spec.input_shape))
        grads = self._grads(model, x, np.eye(4)[[0, 2]], 2)
        assert np.abs(grads["level1.dense.0.kernel"]).sum() > 0


@pytest.fixture(scope="module")
def setup():
    spec = build_preset("synth-dcnetpp")
    model = build(spec, 0)
    x = np.random.default_rng(2).uniform(size=(1, *spec.input_shape))
    with no_grad():
        v = model(x).v.data[0]
    return model, v


class TestPerturbation:
    def test_delta_zero_is_identity(self, setup):
        model, v = setup
        base = perturb_sweep(model, v, 1)[0]
        np.testing.assert_array_equal(perturb_digitcaps(model, v, 1, 3, 0.0), base)

    def test_sweep_shape(self, setup):
        model, v = setup
        grid = perturb_sweep(model, v, 1, -0.2)
        assert grid.shape == (v.shape[1] + 1, *model.decoder.out_shape)
        assert not np.array_equal(grid[1], grid[0])

    def test_masked_class_perturbation_is_invisible(self, setup):
        model, v = setup
        base = perturb_sweep(model, v, 1)[0]
        np.testing.assert_array_equal(perturb_digitcaps(model, v, 1, 0, 5.0, perturb_class=2), base)

    def test_index_errors(self, setup):
        model, v = setup
        with pytest.raises(IndexError):
            perturb_digitcaps(model, v, 1, v.shape[1], -0.2)
        with pytest.raises(IndexError):
            perturb_digitcaps(model, v, 9, 0, -0.2)

    def test_needs_decoder(self):
        model = build(replace(tiny_dcnet_spec(), decoder=None), 0)
        with pytest.raises(ContractError):
            perturb_digitcaps(model, np.zeros((2, 4)), 0, 0, 0.1)
