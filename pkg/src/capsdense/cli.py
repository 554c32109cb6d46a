"""``capsdense`` command line: train, eval, params, gradcheck, perturb.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure (non-finite values or a gradient check over
tolerance).
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .capsule import MarginLossConfig
from .data import (Dataset, cached_channel_stats, load_cifar10_dir, load_mnist_dir,
                   synth_shapes, write_pgm)
from .errors import (CapsDenseError, ConfigError, ContractError, DimensionError, FormatError,
                     IntegrityError, NumericalError)
from .models import (KINDS, PRESET_TRAIN_DEFAULTS, PRESETS, CapsuleModel, ModelSpec, build,
                     build_preset, param_breakdown, param_count, perturb_sweep)
from .tensor import no_grad
from .trainer import (TrainConfig, evaluate, fit, load_training_checkpoint, model_input,
                      new_state)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATASETS = ("synth", "mnist", "fashion-mnist", "cifar10")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration -------------------------------------------------------------------


def _read_spec_file(path) -> tuple[ModelSpec, dict]:
    """A spec file holds a bare model spec or ``{"model": ..., "train": ...}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"spec file {path} does not exist")
    except json.JSONDecodeError as e:
        raise ConfigError(f"spec file {path} is not valid JSON: {e}")
    if "model" in doc:
        return ModelSpec.from_dict(doc["model"]), dict(doc.get("train", {}))
    return ModelSpec.from_dict(doc), {}


def resolve_model(args) -> tuple[ModelSpec, dict]:
    """Model spec plus the training defaults that travel with it."""
    if args.model and args.preset:
        raise ConfigError("give either --model or --preset, not both")
    if args.model:
        return _read_spec_file(args.model)
    name = args.preset or "synth-dcnet"
    return build_preset(name), dict(PRESET_TRAIN_DEFAULTS.get(name, {}))


_FLAG_TO_FIELD = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr0", "decay": "decay",
    "routing_iters": "routing_iters", "recon_mult": "recon_mult", "seed": "seed",
    "head_isolation": "head_isolation", "checkpoint_every": "checkpoint_every",
}


def train_config(args, defaults: dict) -> TrainConfig:
    """CLI flags override the spec file, which overrides preset defaults."""
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for k, v in defaults.items():
        if k not in known:
            raise ConfigError(f"unknown training option {k!r}")
        values[k] = v
    for flag, name in _FLAG_TO_FIELD.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    if isinstance(values.get("margin"), dict):
        values["margin"] = MarginLossConfig(**values["margin"])
    if "betas" in values:
        values["betas"] = tuple(values["betas"])
    return TrainConfig(**values)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


def data_dir(args) -> Path | None:
    d = args.data_dir or os.environ.get("CAPSDENSE_DATA")
    return Path(d) if d else None


def load_data(args, meta: dict | None = None) -> tuple[Dataset, Dataset, dict]:
    """Train/test datasets from flags, falling back to what a checkpoint recorded."""
    rec = dict((meta or {}).get("data", {}))
    name = args.dataset or rec.get("dataset", "synth")
    train_size = args.train_size if args.train_size is not None else rec.get("train_size")
    test_size = args.test_size if args.test_size is not None else rec.get("test_size")
    data_seed = args.data_seed if args.data_seed is not None else rec.get("data_seed", 0)
    if name == "synth":
        train_size = 1024 if train_size is None else train_size
        test_size = 256 if test_size is None else test_size
        train = synth_shapes(train_size, seed=data_seed)
        test = synth_shapes(test_size, seed=data_seed + 10_000)
    else:
        root = data_dir(args) or (Path(rec["data_dir"]) if rec.get("data_dir") else None)
        if root is None:
            raise ConfigError(f"dataset {name!r} needs --data-dir or CAPSDENSE_DATA")
        sub = root / name if (root / name).is_dir() else root
        try:
            if name == "cifar10":
                train, test = load_cifar10_dir(sub)
            else:
                train, test = load_mnist_dir(sub, name=name)
        except FileNotFoundError as e:
            raise FormatError(str(e))
        if train_size is not None:
            train = train.subset(train_size)
        if test_size is not None:
            test = test.subset(test_size)
        rec["data_dir"] = str(root)
    rec.update(dataset=name, train_size=len(train), test_size=len(test), data_seed=data_seed)
    return train, test, rec


def _cifar_stats(train: Dataset, rec: dict) -> tuple[list, list]:
    cache = Path(rec["data_dir"]) / "channel_stats.json"
    try:
        mean, std = cached_channel_stats(train, cache)
    except OSError:
        from .data import channel_stats
        mean, std = channel_stats(train)
    return [float(m) for m in mean], [float(s) for s in std]


def _check_input(spec: ModelSpec, ds: Dataset) -> None:
    if ds.image_shape != spec.input_shape or ds.num_classes != spec.num_classes:
        raise ConfigError(
            f"model expects {spec.input_shape} images over {spec.num_classes} classes, dataset "
            f"{ds.name} has {ds.image_shape} over {ds.num_classes}"
        )


@contextlib.contextmanager
def thread_limit(n: int | None):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _emit(obj, as_json: bool, text: str) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True) if as_json else text)


# -- commands -------------------------------------------------------------------------


def cmd_train(args) -> int:
    out = Path(args.out)
    if args.checkpoint:
        spec_meta = json.loads(Path(str(args.checkpoint) + ".json").read_text()) \
            if Path(str(args.checkpoint) + ".json").exists() else {}
        if "spec" not in spec_meta:
            raise ConfigError(f"{args.checkpoint} has no metadata sidecar with a model spec")
        spec = ModelSpec.from_dict(spec_meta["spec"])
        defaults = dict(spec_meta.get("train", {}))
        defaults.pop("epochs", None)
    else:
        spec, defaults = resolve_model(args)
        spec_meta = {}
    cfg = train_config(args, defaults)
    train, test, rec = load_data(args, spec_meta)
    if rec["dataset"] == "cifar10" and cfg.input_mean is None:
        cfg.input_mean, cfg.input_std = _cifar_stats(train, rec)
    _check_input(spec, train)
    model = build(spec, cfg.seed)
    state = new_state(cfg)
    if args.checkpoint:
        state, _ = load_training_checkpoint(args.checkpoint, model)
    meta = {"train": config_dict(cfg), "data": rec}
    rows = fit(model, train, cfg, test, out_dir=out, state=state, meta=meta)
    if not rows and not args.checkpoint:
        raise ConfigError("--epochs 0: nothing to train")
    history = _read_metrics(out / "metrics.csv")
    best = max(history, key=lambda r: (r["test_acc"], -r["epoch"])) if history else {}
    summary = {
        "model": spec.kind,
        "param_count": model.params.count(),
        "epochs": state.epoch,
        "best_test_acc": best.get("test_acc"),
        "best_epoch": best.get("epoch"),
        "final": history[-1] if history else None,
        "checkpoint": str(out / "checkpoint.cdck"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if not args.quiet:
        for r in rows:
            print(f"epoch {r['epoch']:3d}  lr {r['lr']:.6f}  loss {r['total_loss']:.5f}  "
                  f"train {r['train_acc']:.4f}  test {r['test_acc']:.4f}  {r['seconds']:.1f}s")
        print(f"wrote {out / 'metrics.csv'}, {out / 'checkpoint.cdck'}, {out / 'summary.json'}")
    return EXIT_OK


def _read_metrics(path: Path) -> list[dict]:
    import csv

    if not path.exists():
        return []
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def _load_model(checkpoint) -> tuple[CapsuleModel, dict, TrainConfig]:
    sidecar = Path(str(checkpoint) + ".json")
    if not Path(checkpoint).exists():
        raise FormatError(f"checkpoint {checkpoint} does not exist")
    if not sidecar.exists():
        raise ConfigError(f"{checkpoint} has no metadata sidecar {sidecar.name}")
    meta = json.loads(sidecar.read_text())
    if "spec" not in meta:
        raise ConfigError(f"{sidecar} does not record a model spec")
    spec = ModelSpec.from_dict(meta["spec"])
    model = build(spec, 0)
    load_training_checkpoint(checkpoint, model)
    train_opts = dict(meta.get("train", {}))
    cfg = train_config(argparse.Namespace(), train_opts) if train_opts else TrainConfig()
    return model, meta, cfg


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model, meta, cfg = _load_model(args.checkpoint)
    _, test, rec = load_data(args, meta)
    if len(test) == 0:
        raise ContractError("evaluation set is empty")
    _check_input(model.spec, test)
    result = evaluate(model, test, cfg)
    result.update(dataset=rec["dataset"], samples=len(test), epoch=meta.get("epoch"))
    text = f"accuracy {result['accuracy']:.4f} on {len(test)} {rec['dataset']} samples\n" + "\n".join(
        f"  class {k}: {a:.4f}" for k, a in enumerate(result["per_class"])
    )
    _emit(result, args.json, text)
    return EXIT_OK


def cmd_params(args) -> int:
    if args.all:
        names = list(KINDS) + [n for n in PRESETS if n not in KINDS]
        report = {n: param_count(build_preset(n)) for n in names}
        _emit(report, args.json, "\n".join(f"{n:22s} {c:>12,d}" for n, c in report.items()))
        return EXIT_OK
    spec, _ = resolve_model(args)
    breakdown = param_breakdown(spec)
    total = sum(breakdown.values())
    report = {"model": spec.kind, "modules": dict(breakdown), "total": total}
    lines = [f"{spec.kind} {spec.input_shape}"]
    lines += [f"  {name:18s} {n:>12,d}" for name, n in breakdown.items()]
    lines.append(f"  {'total':18s} {total:>12,d}")
    _emit(report, args.json, "\n".join(lines))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ctx = gradcheck.corrupted(args.corrupt) if args.corrupt else contextlib.nullcontext()
    with ctx:
        if args.scale == "ops":
            errors = gradcheck.run_op_suite(seed=args.seed or 0)
            limits = {k: gradcheck.OP_TOL for k in errors}
        else:
            errors = gradcheck.run_model_suite(side=args.side, seed=args.seed or 0)
            limits = {k: gradcheck.MODEL_TOL_32 if k.endswith("float32") else gradcheck.MODEL_TOL_64
                      for k in errors}
    failed = sorted(k for k in errors if not errors[k] < limits[k])
    report = {"scale": args.scale, "errors": errors, "tolerances": limits, "failed": failed}
    text = "\n".join(
        f"{'FAIL' if k in failed else 'ok  '} {k:16s} {e:.3e} (tol {limits[k]:.0e})" for k, e in errors.items()
    )
    _emit(report, args.json, text)
    return EXIT_NUMERIC if failed else EXIT_OK


def _as_gray(image: np.ndarray) -> np.ndarray:
    """[C, H, W] -> 2-d, placing channels side by side."""
    return image[0] if image.shape[0] == 1 else np.concatenate(list(image), axis=1)


def cmd_perturb(args) -> int:
    if not args.checkpoint:
        raise ConfigError("perturb needs --checkpoint")
    model, meta, cfg = _load_model(args.checkpoint)
    if model.decoder is None:
        raise ContractError("perturb needs a model with a decoder")
    _, test, rec = load_data(args, meta)
    if not 0 <= args.sample_index < len(test):
        raise ConfigError(f"--sample-index {args.sample_index} outside [0, {len(test)})")
    _check_input(model.spec, test)
    x = test.images[args.sample_index:args.sample_index + 1]
    label = int(test.labels[args.sample_index])
    with no_grad():
        out = model(model_input(x, cfg))
    v = out.v.data[0]
    grid = perturb_sweep(model, v, label, args.delta)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = ["baseline.pgm"] + [f"dim_{d:02d}.pgm" for d in range(v.shape[1])]
    for name, img in zip(files, grid):
        write_pgm(out_dir / name, _as_gray(img))
    index = {
        "checkpoint": str(args.checkpoint), "sample_index": args.sample_index, "label": label,
        "predicted": int(out.predictions[0]), "delta": args.delta, "capsule_dim": int(v.shape[1]),
        "baseline": files[0], "dims": {str(d): f for d, f in enumerate(files[1:])},
    }
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    _emit(index, args.json, f"wrote {len(files)} images to {out_dir}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", help="model spec JSON file")
    common.add_argument("--preset", help=f"named preset ({', '.join(PRESETS)}) or model kind")
    common.add_argument("--data-dir", help="dataset root (default: $CAPSDENSE_DATA)")
    common.add_argument("--dataset", choices=DATASETS)
    common.add_argument("--train-size", type=int)
    common.add_argument("--test-size", type=int)
    common.add_argument("--data-seed", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--checkpoint", help="checkpoint to resume, evaluate or perturb")

    parser = _Parser(prog="capsdense", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", parents=[common], help="train a model and log metrics")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--decay", type=float)
    train.add_argument("--routing-iters", type=int)
    train.add_argument("--recon-mult", type=float)
    train.add_argument("--head-isolation", type=_bool, metavar="BOOL")
    train.add_argument("--checkpoint-every", type=int)
    train.add_argument("--out", default="runs/latest")
    train.add_argument("--quiet", action="store_true")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    ev.set_defaults(func=cmd_eval)

    params = sub.add_parser("params", parents=[common], help="parameter-count audit")
    params.add_argument("--all", action="store_true", help="totals for every kind and preset")
    params.set_defaults(func=cmd_params)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("scale", choices=("ops", "model"))
    gc.add_argument("--side", type=int, default=8, help="input side of the model check")
    gc.add_argument("--corrupt", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    pt = sub.add_parser("perturb", parents=[common], help="capsule perturbation reconstructions")
    pt.add_argument("--sample-index", type=int, default=0)
    pt.add_argument("--delta", type=float, default=-0.2)
    pt.add_argument("--out", default="runs/perturb")
    pt.set_defaults(func=cmd_perturb)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with thread_limit(args.threads):
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, IntegrityError, DimensionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ContractError, CapsDenseError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
