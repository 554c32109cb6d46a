"""Adam training loop with per-epoch learning-rate decay and CSV metrics."""
from __future__ import annotations

import csv
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .capsule import MarginLossConfig, capsule_logits, margin_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, batches, one_hot
from .decoder import default_recon_multiplier, reconstruction_loss
from .errors import ConfigError, ContractError, NumericalError
from .models import CapsuleModel, ModelOutput, ParamStore
from .tensor import Tensor, no_grad

BASE_COLUMNS = ["epoch", "lr", "margin_loss", "recon_loss", "total_loss", "train_acc", "test_acc", "seconds"]


@dataclass
class TrainConfig:
    lr0: float = 0.001
    decay: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 128
    recon_mult: float | None = None
    routing_iters: int | None = None
    seed: int = 0
    head_isolation: bool | None = None
    checkpoint_every: int = 0
    margin: MarginLossConfig = field(default_factory=MarginLossConfig)
    # per-channel statistics applied to the network input only; the decoder
    # still reconstructs the raw [0, 1] pixels
    input_mean: tuple[float, ...] | None = None
    input_std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.decay ** epoch


# -- Adam --------------------------------------------------------------------------


@dataclass
class AdamState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict(step=np.asarray(self.step, dtype=np.float32))
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8) -> "AdamState":
        state = cls(betas=tuple(betas), eps=eps, step=int(arrays.get("step", 0)))
        for k, a in arrays.items():
            if k.startswith("m/"):
                state.m[k[2:]] = np.array(a)
            elif k.startswith("v/"):
                state.v[k[2:]] = np.array(a)
        return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    missing = [k for k, p in params.items() if p.requires_grad and k not in grads]
    if missing:
        raise ContractError(f"adam_step: no gradient for trainable parameters {missing[:5]}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# -- losses ------------------------------------------------------------------------


def head_names(model: CapsuleModel) -> list[str]:
    n = model.spec.num_heads
    if n == 1:
        return []
    return [f"head{i}" for i in range(1, n)] + ["merged"]


def compute_losses(model: CapsuleModel, out: ModelOutput, images: np.ndarray, targets: np.ndarray,
                   cfg: TrainConfig) -> tuple[Tensor, dict[str, Tensor]]:
    """Total loss: summed per-head margin losses plus the scaled reconstruction error."""
    parts: dict[str, Tensor] = {}
    names = head_names(model) or ["margin"]
    head_losses = [margin_loss(capsule_logits(v), targets, cfg.margin) for v in out.heads]
    for name, loss in zip(names, head_losses):
        parts[name] = loss
    margin = head_losses[0]
    for loss in head_losses[1:]:
        margin = margin + loss
    parts["margin"] = margin
    total = margin
    if out.reconstruction is not None:
        c_out = out.reconstruction.shape[1]
        pixels = out.reconstruction.size // out.reconstruction.shape[0]
        mult = cfg.recon_mult if cfg.recon_mult is not None else default_recon_multiplier(pixels)
        parts["recon"] = reconstruction_loss(out.reconstruction, images[:, :c_out], mult)
        total = total + parts["recon"]
    parts["total"] = total
    return total, parts


def _check_finite(parts: Mapping[str, Tensor], params: ParamStore) -> None:
    for name, t in parts.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"non-finite loss component {name!r}")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
        if not np.all(np.isfinite(p.data)):
            raise NumericalError(f"non-finite value in parameter {name!r}")


def model_input(images: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if cfg.input_mean is None:
        return images
    mean = np.asarray(cfg.input_mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(cfg.input_std, dtype=np.float32)[None, :, None, None]
    return (images - mean) / std


# -- loop ----------------------------------------------------------------------------


@dataclass
class TrainState:
    adam: AdamState
    epoch: int = 0


def new_state(cfg: TrainConfig) -> TrainState:
    return TrainState(AdamState(betas=tuple(cfg.betas), eps=cfg.eps))


def _configure(model: CapsuleModel, cfg: TrainConfig) -> CapsuleModel:
    spec = model.spec
    if cfg.routing_iters is not None and cfg.routing_iters != spec.routing_iters:
        spec = replace(spec, routing_iters=cfg.routing_iters)
    if cfg.head_isolation is not None and cfg.head_isolation != spec.head_isolation:
        spec = replace(spec, head_isolation=cfg.head_isolation)
    if spec is model.spec:
        return model
    return CapsuleModel(spec, model.params)


def train_step(model: CapsuleModel, images: np.ndarray, targets: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, state: TrainState, lr: float) -> tuple[dict[str, float], int]:
    model = _configure(model, cfg)
    model.params.zero_grad()
    out = model(model_input(images, cfg), labels=labels)
    total, parts = compute_losses(model, out, images, targets, cfg)
    _check_finite(parts, model.params)
    total.backward()
    _check_finite({}, model.params)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
    adam_step(model.params, grads, state.adam, lr)
    return {k: float(v.data) for k, v in parts.items()}, int((out.predictions == labels).sum())


def train_epoch(model: CapsuleModel, data: Dataset, cfg: TrainConfig, state: TrainState,
                test: Dataset | None = None, clock: Callable[[], float] = time.perf_counter) -> dict:
    """One pass over ``data`` at ``lr0 * decay**epoch``; returns the metrics row."""
    start = clock()
    epoch = state.epoch
    lr = lr_at(cfg, epoch)
    sums: dict[str, float] = {}
    correct = seen = 0
    for images, targets, labels in batches(data, cfg.batch_size, shuffle_seed=(cfg.seed, epoch)):
        losses, hits = train_step(model, images, targets, labels, cfg, state, lr)
        n = len(labels)
        for k, v in losses.items():
            sums[k] = sums.get(k, 0.0) + v * n
        correct += hits
        seen += n
    state.epoch += 1
    row = {
        "epoch": epoch,
        "lr": lr,
        "margin_loss": sums["margin"] / seen,
        "recon_loss": sums.get("recon", 0.0) / seen,
        "total_loss": sums["total"] / seen,
        "train_acc": correct / seen,
        "test_acc": evaluate(model, test, cfg)["accuracy"] if test is not None and len(test) else float("nan"),
    }
    for name in head_names(model):
        row[f"{name}_loss"] = sums[name] / seen
    row["seconds"] = clock() - start
    return row


def evaluate(model: CapsuleModel, data: Dataset, cfg: TrainConfig | None = None,
             batch_size: int = 256) -> dict:
    """Accuracy and mean loss of argmax-capsule-length predictions, with no graph recorded."""
    if data is None or len(data) == 0:
        raise ContractError("evaluate: empty dataset")
    cfg = cfg or TrainConfig()
    model = _configure(model, cfg)
    k = data.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    loss_sum = 0.0
    with no_grad():
        for images, targets, labels in batches(data, batch_size):
            out = model(model_input(images, cfg))
            total, _ = compute_losses(model, out, images, targets, cfg)
            loss_sum += float(total.data) * len(labels)
            np.add.at(confusion, (labels, out.predictions), 1)
    per_class = np.divide(confusion.diagonal(), confusion.sum(axis=1),
                          out=np.full(k, np.nan), where=confusion.sum(axis=1) > 0)
    return {
        "accuracy": float(confusion.diagonal().sum() / len(data)),
        "loss": loss_sum / len(data),
        "per_class": per_class.tolist(),
        "confusion": confusion.tolist(),
    }


def metric_columns(model: CapsuleModel) -> list[str]:
    return BASE_COLUMNS + [f"{name}_loss" for name in head_names(model)]


def append_metrics(path, rows: list[dict], columns: list[str]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({c: repr(float(row[c])) if c != "epoch" else int(row[c]) for c in columns})


def save_training_checkpoint(path, model: CapsuleModel, state: TrainState, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.update(epoch=state.epoch, spec=model.spec.to_dict(),
                betas=list(state.adam.betas), eps=state.adam.eps)
    save_checkpoint(path, model.params.arrays(), state.adam.to_arrays(), meta)


def load_training_checkpoint(path, model: CapsuleModel) -> tuple[TrainState, dict]:
    params, opt, meta = load_checkpoint(path)
    model.params.load_arrays(params)
    adam = AdamState.from_arrays(opt, meta.get("betas", (0.9, 0.999)), meta.get("eps", 1e-8))
    return TrainState(adam, int(meta.get("epoch", 0))), meta


def fit(model: CapsuleModel, train: Dataset, cfg: TrainConfig, test: Dataset | None = None,
        out_dir=None, state: TrainState | None = None, meta: dict | None = None,
        clock: Callable[[], float] = time.perf_counter) -> list[dict]:
    """Train until ``cfg.epochs`` total epochs, appending to ``out_dir/metrics.csv``."""
    state = state or new_state(cfg)
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.epoch < cfg.epochs:
        row = train_epoch(model, train, cfg, state, test, clock)
        rows.append(row)
        if out is not None:
            append_metrics(out / "metrics.csv", [row], metric_columns(model))
            last = state.epoch == cfg.epochs
            if last or (cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0):
                save_training_checkpoint(out / "checkpoint.cdck", model, state, meta)
    return rows
