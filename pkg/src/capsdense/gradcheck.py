"""Central finite-difference gradient oracle."""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor, no_grad, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise ``|a - n| / max(1e-8, |a| + |n|)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ContractError(f"finite_diff_check: f must return a scalar, got shape {value.shape}")
    out = float(value.data.reshape(-1)[0])
    if not np.isfinite(out):
        raise ContractError("finite_diff_check: f returned a non-finite value")
    return out


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    dtype=np.float64,
) -> float:
    """Maximum relative error between backprop and central differences.

    ``f`` takes no arguments and must rebuild its graph from ``params`` on
    every call.  The analytic gradient is computed with tensors stored as
    ``dtype``; the numeric side always re-evaluates ``f`` in float64, since
    float32 central differences are dominated by rounding.
    """
    if h <= 0:
        raise ContractError(f"finite_diff_check: h must be positive, got {h}")
    saved = [(p.data, p.grad) for p in params]
    try:
        with precision(dtype):
            for p in params:
                p.data = p.data.astype(dtype)
                p.grad = None
            loss = f()
            _scalar(loss)
            loss.backward()
            analytic = [
                np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params
            ]

        worst = 0.0
        with precision(np.float64), no_grad():
            for p, (orig, _) in zip(params, saved):
                p.data = orig.astype(np.float64)
            for p, grad in zip(params, analytic):
                flat = p.data.reshape(-1)
                numeric = np.empty(flat.size)
                for i in range(flat.size):
                    x0 = flat[i]
                    flat[i] = x0 + h
                    up = _scalar(f())
                    flat[i] = x0 - h
                    down = _scalar(f())
                    flat[i] = x0
                    numeric[i] = (up - down) / (2 * h)
                if flat.size:
                    worst = max(worst, float(relative_error(grad.reshape(-1), numeric).max()))
        return worst
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data, p.grad = data, grad


# -- suites used by the CLI and the tests ------------------------------------------

OP_TOL = 1e-3
MODEL_TOL_32 = 1e-2
MODEL_TOL_64 = 1e-3


@contextlib.contextmanager
def corrupted(op_name: str, factor: float = 1.5):
    """Scale one registered backward rule; a negative control for the checker."""
    from .tensor import Function

    fn = Function.registry[op_name.lower()]
    original = fn.__dict__["backward"]

    def bad_backward(ctx, g):
        return tuple(None if x is None else x * factor for x in original.__func__(ctx, g))

    fn.backward = staticmethod(bad_backward)
    try:
        yield
    finally:
        fn.backward = original


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def op_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, scalar closure, parameters) for every differentiable op."""
    from . import capsule, tensor as T

    rng = np.random.default_rng(seed)

    def leaf(*shape, low=None):
        data = rng.standard_normal(shape)
        if low is not None:
            # keep kinked ops away from their kink so differences stay smooth
            data = np.sign(data) * (np.abs(data) + low)
        return Tensor(data, requires_grad=True)

    def weights(shape):
        return rng.standard_normal(shape)

    cases = []
    a, b = leaf(3, 4), leaf(1, 4)
    w = weights((3, 4))
    cases.append(("add", lambda: _weighted(T.add(a, b), w), [a, b]))
    a2, b2 = leaf(3, 4), leaf(3, 1)
    cases.append(("mul", lambda: _weighted(T.mul(a2, b2), w), [a2, b2]))
    a3 = leaf(5)
    w5 = weights(5)
    cases.append(("scale", lambda: _weighted(T.scale(a3, -2.5), w5), [a3]))
    a4 = leaf(4, 5, low=0.05)
    w45 = weights((4, 5))
    cases.append(("relu", lambda: _weighted(T.relu(a4), w45), [a4]))
    a5 = leaf(4, 5)
    cases.append(("sigmoid", lambda: _weighted(T.sigmoid(a5), w45), [a5]))
    a6 = leaf(2, 6)
    w34 = weights((3, 4))
    cases.append(("reshape", lambda: _weighted(T.reshape(a6, (3, 4)), w34), [a6]))
    a7 = leaf(2, 3, 4)
    w432 = weights((4, 2, 3))
    cases.append(("transpose", lambda: _weighted(T.transpose(a7, (2, 0, 1)), w432), [a7]))
    c1, c2 = leaf(1, 2, 3, 3), leaf(1, 1, 3, 3)
    wc = weights((1, 3, 3, 3))
    cases.append(("concat", lambda: _weighted(T.concat_channels([c1, c2]), wc), [c1, c2]))
    a8 = leaf(3, 4)
    w3 = weights(3)
    cases.append(("sum", lambda: _weighted(T.tsum(a8, axis=1), w3), [a8]))
    a9 = leaf(3, 5)
    w35 = weights((3, 5))
    cases.append(("softmax", lambda: _weighted(T.softmax(a9, axis=1), w35), [a9]))
    a10 = leaf(4, 3)
    w4 = weights(4)
    cases.append(("l2norm", lambda: _weighted(T.l2_norm(a10, axis=1), w4), [a10]))
    m1, m2 = leaf(3, 4), leaf(3, 4)
    cases.append(("mse", lambda: T.mse(m1, m2), [m1, m2]))
    mm1, mm2 = leaf(2, 3, 4), leaf(2, 4, 5)
    w235 = weights((2, 3, 5))
    cases.append(("matmul", lambda: _weighted(T.matmul(mm1, mm2), w235), [mm1, mm2]))
    x, k, bias = leaf(2, 2, 5, 5), leaf(3, 2, 3, 3), leaf(3)
    wv = weights((2, 3, 2, 2))
    cases.append(("conv2d", lambda: _weighted(T.conv2d(x, k, bias, 2, "valid"), wv), [x, k, bias]))
    xs, ks, bs = leaf(1, 2, 4, 5), leaf(2, 2, 3, 2), leaf(2)
    ws = weights((1, 2, 4, 5))
    cases.append(("conv2d-same", lambda: _weighted(T.conv2d(xs, ks, bs, 1, "same"), ws), [xs, ks, bs]))
    s = leaf(3, 4)
    cases.append(("squash", lambda: _weighted(capsule.squash(s), w34), [s]))
    s_small = Tensor(rng.standard_normal((2, 4)) * 1e-2, requires_grad=True)
    w24 = weights((2, 4))
    cases.append(("squash-small", lambda: _weighted(capsule.squash(s_small), w24), [s_small]))
    u, W = leaf(2, 3, 4), leaf(3, 2, 4, 5)
    wp = weights((2, 3, 2, 5))
    cases.append(("predict", lambda: _weighted(capsule.predict(u, W), wp), [u, W]))
    uh = leaf(2, 4, 3, 5)
    wr = weights((2, 3, 5))
    # one iteration: uniform couplings, so the full function is differentiated exactly
    cases.append(("route", lambda: _weighted(capsule.route(uh, 1)[0], wr), [uh]))
    uh3 = leaf(2, 4, 3, 5)
    pinned = capsule.route(uh3, 3)[1].couplings
    cases.append(("route-pinned", lambda: _weighted(capsule.route(uh3, couplings=pinned)[0], wr), [uh3]))
    norms = Tensor(np.array([[0.5, 0.3, 0.7], [0.2, 0.95, 0.05]]), requires_grad=True)
    targets = np.array([[1, 0, 0], [0, 0, 1]])
    cases.append(("margin_loss", lambda: capsule.margin_loss(norms, targets), [norms]))
    return cases


def run_op_suite(seed: int = 0, h: float = 1e-4) -> dict[str, float]:
    return {name: finite_diff_check(f, params, h=h) for name, f, params in op_cases(seed)}


def model_case(side: int = 8, seed: int = 0, routing_iters: int = 3
               ) -> tuple[Callable[[], Tensor], list[Tensor]]:
    """Total (margin + reconstruction) loss of a tiny DCNet on a fixed random batch.

    With more than one routing iteration the couplings of the unperturbed
    forward are pinned, because backprop treats them as constants.
    """
    from dataclasses import replace

    from .models import build, tiny_dcnet_spec
    from .trainer import TrainConfig, compute_losses

    spec = replace(tiny_dcnet_spec(side=side), routing_iters=routing_iters)
    model = build(spec, seed)
    rng = np.random.default_rng(seed + 1)
    images = rng.uniform(0.0, 1.0, (2, 1, side, side))
    labels = np.array([0, 1])
    targets = np.eye(spec.num_classes)[labels]
    cfg = TrainConfig(recon_mult=0.05)

    pinned = None
    if routing_iters > 1:
        with no_grad():
            pinned = [st.couplings.astype(np.float64) for st in model(images, labels=labels).routing]

    def f():
        out = model(images, labels=labels, couplings=pinned)
        return compute_losses(model, out, images, targets, cfg)[0]

    return f, list(model.params.values())


def run_model_suite(side: int = 8, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per (routing iterations, analytic precision)."""
    out = {}
    for iters in (1, 3):
        f, params = model_case(side, seed, iters)
        out[f"iters{iters}-float32"] = finite_diff_check(f, params, h=h, dtype=np.float32)
        out[f"iters{iters}-float64"] = finite_diff_check(f, params, h=h, dtype=np.float64)
    return out
