import numpy as np
import pytest

from capsdense.dense import DenseBlockSpec, dense_block_forward, dense_block_param_count, dense_block_param_shapes
from capsdense.errors import ConfigError
from capsdense.gradcheck import finite_diff_check
from capsdense.models import truncated_normal
from capsdense.tensor import Tensor, precision


def make_params(spec, in_channels, seed=0, std=0.3):
    rng = np.random.default_rng(seed)
    return {k: Tensor(truncated_normal(rng, s, std), requires_grad=True)
            for k, s in dense_block_param_shapes(spec, in_channels).items()}


def test_mnist_block_has_257_maps():
    spec = DenseBlockSpec()
    assert spec.out_channels(1) == 257
    x = np.random.default_rng(0).uniform(size=(1, 1, 28, 28))
    out = dense_block_forward(Tensor(x), spec, make_params(spec, 1, std=0.05))
    assert out.shape == (1, 257, 28, 28)


def test_empty_block_is_identity(rng):
    spec = DenseBlockSpec(num_layers=0)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    assert dense_block_forward(x, spec, {}) is x
    assert dense_block_param_count(spec, 3) == 0


def test_zero_params_give_zero_new_maps(rng):
    spec = DenseBlockSpec(num_layers=2, growth=1)
    params = {k: Tensor(np.zeros(s)) for k, s in dense_block_param_shapes(spec, 1).items()}
    x = rng.uniform(size=(1, 1, 4, 4))
    out = dense_block_forward(Tensor(x), spec, params).data
    np.testing.assert_array_equal(out[:, 1:], 0.0)
    np.testing.assert_allclose(out[:, :1], x, atol=1e-7)


@pytest.mark.parametrize("spec,c,expected", [
    (DenseBlockSpec(num_layers=1, growth=1, kernel=1), 1, 2),
    (DenseBlockSpec(), 1, 260_608),
    (DenseBlockSpec(num_layers=0), 5, 0),
])
def test_param_count_closed_form(spec, c, expected):
    assert dense_block_param_count(spec, c) == expected


@pytest.mark.parametrize("spec", [DenseBlockSpec(), DenseBlockSpec(num_layers=3, growth=8),
                                  DenseBlockSpec(concat=False, padding="valid"), DenseBlockSpec(output="last")])
@pytest.mark.parametrize("c", [1, 3])
def test_closed_form_matches_shapes(spec, c):
    shapes = dense_block_param_shapes(spec, c)
    assert dense_block_param_count(spec, c) == sum(int(np.prod(s)) for s in shapes.values())


def test_mnist_count_formula():
    assert 9 * 32 * (1 + 33 + 65 + 97 + 129 + 161 + 193 + 225) + 256 == 260_608


def test_prefix_property(rng):
    full = DenseBlockSpec(num_layers=4, growth=3)
    short = DenseBlockSpec(num_layers=3, growth=3)
    params = make_params(full, 2)
    x = Tensor(rng.standard_normal((2, 2, 6, 6)))
    a = dense_block_forward(x, full, params).data
    b = dense_block_forward(x, short, params).data
    np.testing.assert_array_equal(a[:, :2 + 3 * 3], b)


@pytest.mark.parametrize("size", [1, 5, 8, 13])
def test_no_spatial_shrinkage(size, rng):
    spec = DenseBlockSpec(num_layers=2, growth=2)
    out = dense_block_forward(Tensor(rng.standard_normal((1, 1, size, size))), spec, make_params(spec, 1))
    assert out.shape[2:] == (size, size)


def test_gradient_reaches_first_layer(rng):
    spec = DenseBlockSpec(num_layers=3, growth=2)
    params = make_params(spec, 1)
    x = Tensor(rng.uniform(size=(1, 1, 5, 5)))
    w = rng.standard_normal((1, 7, 5, 5))

    def f():
        return (dense_block_forward(x, spec, params) * Tensor(w)).sum()

    f().backward()
    assert np.abs(params["dense.0.kernel"].grad).sum() > 0
    first = [params["dense.0.kernel"], params["dense.0.bias"]]
    assert finite_diff_check(f, first) < 1e-3


def test_plain_stack_variant(rng):
    spec = DenseBlockSpec(num_layers=3, growth=4, concat=False, padding="valid")
    out = dense_block_forward(Tensor(rng.standard_normal((1, 1, 10, 10))), spec, make_params(spec, 1))
    assert out.shape == (1, 4, 4, 4)


def test_last_output_variant(rng):
    spec = DenseBlockSpec(num_layers=3, growth=4, output="last")
    params = make_params(spec, 1)
    x = Tensor(rng.standard_normal((1, 1, 6, 6)))
    out = dense_block_forward(x, spec, params).data
    full = dense_block_forward(x, DenseBlockSpec(num_layers=3, growth=4), params).data
    np.testing.assert_array_equal(out, full[:, -4:])


def test_config_errors():
    with pytest.raises(ConfigError):
        DenseBlockSpec(padding="valid")
    with pytest.raises(ConfigError):
        DenseBlockSpec(growth=0)
