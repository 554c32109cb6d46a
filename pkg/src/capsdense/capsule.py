"""Capsule primitives: squash, prediction vectors, dynamic routing, margin loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Function, Tensor, as_tensor, l2_norm, relu, softmax_np

SQUASH_EPS = 1e-9


@dataclass(frozen=True)
class CapsuleLayerSpec:
    num_in: int
    dim_in: int
    num_out: int
    dim_out: int
    routing_iters: int = 3

    def __post_init__(self):
        for name in ("num_in", "dim_in", "num_out", "dim_out", "routing_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"CapsuleLayerSpec.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.num_in, self.num_out, self.dim_in, self.dim_out)


@dataclass(frozen=True)
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ConfigError(
                f"margins must satisfy 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}"
            )
        if self.lambda_down <= 0:
            raise ConfigError(f"lambda_down must be positive, got {self.lambda_down}")


@dataclass
class RoutingState:
    """Routing logits ``b`` and couplings ``c``, both shaped [B, I, J].

    ``history`` holds the couplings used at every iteration when routing was
    asked to keep them.
    """

    logits: np.ndarray
    couplings: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)


def _squash_np(s: np.ndarray, eps: float = SQUASH_EPS) -> np.ndarray:
    q = (s * s).sum(axis=-1, keepdims=True)
    return s * (q / ((1.0 + q) * np.sqrt(q + eps)))


class Squash(Function):
    @staticmethod
    def forward(ctx, s, eps=SQUASH_EPS):
        q = (s * s).sum(axis=-1, keepdims=True)
        root = np.sqrt(q + eps)
        f = q / ((1.0 + q) * root)
        # d f / d q, written without a 1/q term so it stays finite at the origin
        df = ((q + eps) - 0.5 * q * (1.0 + q)) / ((1.0 + q) ** 2 * root ** 3)
        ctx.save(s=s, f=f, df=df)
        return s * f

    @staticmethod
    def backward(ctx, g):
        s = ctx.s
        return (ctx.f * g + 2.0 * ctx.df * (s * g).sum(axis=-1, keepdims=True) * s,)


def squash(s, eps: float = SQUASH_EPS) -> Tensor:
    """Scale each last-axis vector to length ``|s|^2 / (1 + |s|^2)``."""
    return Squash.apply(s, eps=eps)


class Predict(Function):
    """``u_hat[b, i, j] = u[b, i] @ W[i, j]`` via one batched matmul per input capsule."""

    @staticmethod
    def forward(ctx, u, w):
        bsz, num_in, dim_in = u.shape
        if w.ndim != 4 or w.shape[0] != num_in or w.shape[2] != dim_in:
            raise DimensionError(
                f"predict: u is [B={bsz}, I={num_in}, dim_in={dim_in}] but W has shape {w.shape}; "
                "expected W axes 0 and 2 to equal I and dim_in"
            )
        _, num_out, _, dim_out = w.shape
        ut = u.transpose(1, 0, 2)  # [I, B, din]
        wm = w.transpose(0, 2, 1, 3).reshape(num_in, dim_in, num_out * dim_out)
        ctx.save(ut=ut, wm=wm, dims=(bsz, num_in, dim_in, num_out, dim_out))
        out = ut @ wm  # [I, B, J*dout]
        return out.reshape(num_in, bsz, num_out, dim_out).transpose(1, 0, 2, 3)

    @staticmethod
    def backward(ctx, g):
        bsz, num_in, dim_in, num_out, dim_out = ctx.dims
        gm = g.transpose(1, 0, 2, 3).reshape(num_in, bsz, num_out * dim_out)
        gu = gw = None
        if ctx.needs_input_grad[0]:
            gu = (gm @ ctx.wm.transpose(0, 2, 1)).transpose(1, 0, 2)
        if ctx.needs_input_grad[1]:
            gw = (ctx.ut.transpose(0, 2, 1) @ gm).reshape(num_in, dim_in, num_out, dim_out)
            gw = gw.transpose(0, 2, 1, 3)
        return gu, gw


def predict(u, w) -> Tensor:
    """Prediction vectors ``[B, I, J, dim_out]`` from capsules ``[B, I, dim_in]``."""
    u, w = as_tensor(u), as_tensor(w)
    if u.ndim != 3:
        raise DimensionError(f"predict: u must be [B, I, dim_in], got {u.shape}")
    return Predict.apply(u, w)


def route(u_hat, iters: int = 3, keep_history: bool = False,
          couplings: np.ndarray | None = None) -> tuple[Tensor, RoutingState]:
    """Dynamic routing-by-agreement over prediction vectors ``[B, I, J, D]``.

    Logit updates are bookkeeping on detached values; the returned parent
    capsules are differentiable with respect to ``u_hat`` through the final
    weighted sum and squash only.  Passing ``couplings`` skips the iterations
    and uses them as the final couplings, which lets a finite-difference
    oracle evaluate exactly the function backprop differentiates.
    """
    if iters < 1:
        raise ContractError(f"route: iters must be >= 1, got {iters}")
    u_hat = as_tensor(u_hat)
    if u_hat.ndim != 4:
        raise DimensionError(f"route: u_hat must be [B, I, J, D], got {u_hat.shape}")
    u = u_hat.data
    b = np.zeros(u.shape[:3], dtype=u.dtype)
    history = []
    if couplings is not None:
        c = np.asarray(couplings, dtype=u.dtype)
        if c.shape != b.shape:
            raise DimensionError(f"route: couplings {c.shape} != {b.shape}")
        s = (u_hat * Tensor(c[..., None])).sum(axis=1)
        return squash(s), RoutingState(logits=b, couplings=c)
    for it in range(iters):
        c = softmax_np(b, axis=2)
        if keep_history:
            history.append(c)
        if it == iters - 1:
            break
        v_np = _squash_np((c[..., None] * u).sum(axis=1))
        b = b + (u * v_np[:, None]).sum(axis=-1)
    s = (u_hat * Tensor(c[..., None])).sum(axis=1)
    return squash(s), RoutingState(logits=b, couplings=c, history=history)


def capsule_logits(v) -> Tensor:
    """Per-class capsule lengths ``[B, K]``."""
    return l2_norm(v, axis=-1)


def predict_class(v) -> np.ndarray:
    """Argmax of capsule lengths; ties go to the lowest class index."""
    data = v.data if isinstance(v, Tensor) else np.asarray(v)
    return np.argmax(np.sqrt((data.astype(np.float64) ** 2).sum(axis=-1)), axis=-1)


def _check_one_hot(targets: np.ndarray) -> None:
    binary = np.isin(targets, (0, 1)).all()
    if targets.ndim != 2 or not binary or not (targets.sum(axis=1) == 1).all():
        raise ContractError("margin_loss: targets must be one-hot rows of shape [B, K]")


def margin_loss(v_norms, targets, cfg: MarginLossConfig = MarginLossConfig()) -> Tensor:
    """Batch mean of the summed per-class hinge-squared capsule loss."""
    v_norms = as_tensor(v_norms)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    _check_one_hot(t)
    if t.shape != v_norms.shape:
        raise DimensionError(f"margin_loss: norms {v_norms.shape} vs targets {t.shape}")
    present = relu(cfg.m_plus - v_norms)
    absent = relu(v_norms - cfg.m_minus)
    weights_present = Tensor(t)
    weights_absent = Tensor(cfg.lambda_down * (1.0 - t))
    per_class = present * present * weights_present + absent * absent * weights_absent
    return per_class.sum(axis=1).mean()
