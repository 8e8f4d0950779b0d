"""``eqspike`` command line: train, eval, equilibrium-diag, gradcheck, rates.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 check failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from typing import Any, Dict, List, Optional, Sequence

from . import numerics as nx
from .data import BatchIterator, Dataset, IDXFormatError, load_idx_dataset, synth_dataset
from .dynamics import InputEncoding, simulate
from .equilibrium import SolverConfig
from .idegrad import gradcheck, sample_coordinates, write_gradcheck_csv
from .model import INIT_LOW, NetworkSpec, NeuronKind, build_network
from .train import Trainer, TrainConfig, append_metrics, evaluate, load_checkpoint, save_checkpoint

log = logging.getLogger("eqspike")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECK = 0, 2, 3, 4
DATA_ENV = "EQSPIKE_DATA_DIR"
GRADCHECK_MAX_WIDTH = 64
GRADCHECK_TOL = {"IF": 1e-4, "LIF": 1e-2}

IDX_FILES = {
    "images_path": "train-images-idx3-ubyte",
    "labels_path": "train-labels-idx1-ubyte",
    "test_images_path": "t10k-images-idx3-ubyte",
    "test_labels_path": "t10k-labels-idx1-ubyte",
}
IDX_DATASETS = ("mnist", "fashion-mnist", "idx")
SYNTHETIC = ("blobs", "xor")


class ConfigError(ValueError):
    pass


def _check_keys(section: str, got: Dict[str, Any], allowed: Sequence[str]) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"{section}: expected an object, got {type(got).__name__}")
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(extra)}")


@dataclass
class DatasetConfig:
    name: str = "mnist"
    root: Optional[str] = None
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    test_images_path: Optional[str] = None
    test_labels_path: Optional[str] = None
    limit: Optional[int] = None
    test_limit: Optional[int] = None
    n_classes: int = 10
    n: int = 512  # synthetic only
    dim: int = 2
    separation: float = 5.0

    def validate(self) -> None:
        if self.name not in IDX_DATASETS + SYNTHETIC:
            raise ConfigError(f"dataset.name must be one of {IDX_DATASETS + SYNTHETIC}, got {self.name!r}")
        for k in ("limit", "test_limit"):
            v = getattr(self, k)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"dataset.{k} must be a positive integer")
        if self.n_classes < 2:
            raise ConfigError("dataset.n_classes must be >= 2")
        if self.name in SYNTHETIC and self.n < 8:
            raise ConfigError("dataset.n must be >= 8")

    def path(self, key: str) -> str:
        given = getattr(self, key)
        root = self.root or os.environ.get(DATA_ENV)
        if given is None:
            if self.name == "idx":
                raise ConfigError(f"dataset.{key} is required for name 'idx'")
            if root is None:
                raise ConfigError(f"dataset.root (or ${DATA_ENV}) is needed to locate {self.name}")
            base = os.path.join(root, self.name)
            name = IDX_FILES[key]
            for cand in (os.path.join(base, name), os.path.join(base, name + ".gz"),
                         os.path.join(root, name), os.path.join(root, name + ".gz")):
                if os.path.exists(cand):
                    return cand
            return os.path.join(base, name)
        if not os.path.isabs(given) and not os.path.exists(given) and root is not None:
            return os.path.join(root, given)
        return given


@dataclass
class RunConfig:
    dataset: DatasetConfig
    architecture: str
    neuron: NeuronKind
    v_th: float
    bn: bool
    c: float
    init: str
    train: TrainConfig
    output_dir: str
    seed: int


def parse_run_config(doc: Dict[str, Any]) -> RunConfig:
    """Validate a JSON config document; every problem is a :class:`ConfigError`."""
    _check_keys("config", doc, ("dataset", "architecture", "neuron", "train", "solver", "output_dir", "seed"))
    try:
        ds_doc = doc.get("dataset", {})
        _check_keys("dataset", ds_doc, [f.name for f in fields(DatasetConfig)])
        ds = DatasetConfig(**ds_doc)
        ds.validate()

        arch = doc.get("architecture")
        bn, c, init = True, 1.0, "uniform"
        if isinstance(arch, dict):
            _check_keys("architecture", arch, ("shorthand", "bn", "c", "init"))
            bn, c = bool(arch.get("bn", True)), float(arch.get("c", 1.0))
            init = arch.get("init", "uniform")
            arch = arch.get("shorthand")
        if not isinstance(arch, str) or not arch.strip():
            raise ConfigError("architecture: a shorthand string such as \"400 (F400)\" is required")
        if c <= 0:
            raise ConfigError("architecture.c must be positive")
        if init not in INIT_LOW:
            raise ConfigError(f"architecture.init must be one of {sorted(INIT_LOW)}")

        n_doc = doc.get("neuron", {})
        _check_keys("neuron", n_doc, ("kind", "lambda", "v_th"))
        kind = n_doc.get("kind", "IF")
        lam = float(n_doc.get("lambda", 1.0 if kind == "IF" else 0.95))
        neuron = NeuronKind(kind, lam)
        v_th = float(n_doc.get("v_th", 2.0))
        if not v_th > 0:
            raise ConfigError("neuron.v_th must be positive")

        t_doc = dict(doc.get("train", {}))
        allowed = [f.name for f in fields(TrainConfig) if f.name not in ("backward", "seed", "architecture", "dataset")]
        _check_keys("train", t_doc, allowed)
        s_doc = doc.get("solver", {})
        _check_keys("solver", s_doc, ("method", "max_iters", "tol", "damping"))
        if t_doc.get("forward_refine") is not None:
            _check_keys("train.forward_refine", t_doc["forward_refine"], ("method", "max_iters", "tol", "damping"))
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        train = TrainConfig(backward=SolverConfig(**{"max_iters": 30, "tol": 1e-6, **s_doc}), seed=seed,
                            architecture=arch, dataset=ds.name, **t_doc)
        out = doc.get("output_dir", "runs/default")
        if not isinstance(out, str):
            raise ConfigError("output_dir must be a string")
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(ds, arch, neuron, v_th, bn, c, init, train, out, seed)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_run_config(doc)


def load_data(ds: DatasetConfig, seed: int):
    """(train, test) normalized with training-split statistics."""
    if ds.name in SYNTHETIC:
        full = synth_dataset(ds.name, ds.n, seed=seed, dim=ds.dim, n_classes=ds.n_classes, separation=ds.separation)
        cut = (3 * len(full)) // 4
        train = Dataset(full.images[:cut], full.labels[:cut], full.n_classes, "train", name=ds.name)
        test = Dataset(full.images[cut:], full.labels[cut:], full.n_classes, "test", name=ds.name)
    else:
        train = load_idx_dataset(ds.path("images_path"), ds.path("labels_path"), ds.n_classes,
                                 "train", ds.name, ds.limit)
        test = load_idx_dataset(ds.path("test_images_path"), ds.path("test_labels_path"), ds.n_classes,
                                "test", ds.name, ds.test_limit)
    train = train.normalized()
    return train, test.normalized(train.mean, train.std)


def build_from_config(cfg: RunConfig, input_shape, n_classes) -> NetworkSpec:
    try:
        return build_network(cfg.architecture, input_shape, n_classes, cfg.neuron, cfg.v_th,
                             bn=cfg.bn, c=cfg.c, seed=cfg.seed, init=cfg.init)
    except (ValueError, nx.ShapeError) as e:
        raise ConfigError(f"architecture {cfg.architecture!r}: {e}") from e


def _dataset_shape(ds: DatasetConfig):
    if ds.name in SYNTHETIC:
        return (2 if ds.name == "xor" else ds.dim,), (2 if ds.name == "xor" else ds.n_classes)
    return (28, 28, 1), ds.n_classes


def _out_dir(args, cfg: Optional[RunConfig]) -> str:
    out = args.out or (cfg.output_dir if cfg else ".")
    os.makedirs(out, exist_ok=True)
    return out


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    shape, n_classes = _dataset_shape(cfg.dataset)
    net = build_from_config(cfg, shape, n_classes)
    if args.dry_run:
        print(f"config ok: {net.describe()}")
        print(f"parameters: {net.param_count()}")
        return EXIT_OK
    train, test = load_data(cfg.dataset, cfg.seed)
    if train.sample_shape != tuple(net.input_shape):
        net = build_from_config(cfg, train.sample_shape, train.n_classes)
    out = _out_dir(args, cfg)
    metrics_path = os.path.join(out, "metrics.csv")
    ckpt_path = os.path.join(out, "checkpoint.ide")
    trainer = Trainer(net, cfg.train)
    history: List[float] = []
    if args.checkpoint:
        net, trainer, header = load_checkpoint(args.checkpoint, cfg.train)
        if trainer is None:
            raise ConfigError(f"{args.checkpoint} holds no training state to resume from")
        history = list(header["extra"].get("test_history", []))
    elif os.path.exists(metrics_path):
        os.remove(metrics_path)
    batches = BatchIterator(train, cfg.train.batch_size, seed=cfg.seed, epoch=trainer.epoch,
                            augment=cfg.train.augment)
    extra = {"dataset": vars(cfg.dataset), "normalization": {"mean": train.mean, "std": train.std}}
    while trainer.epoch < cfg.train.epochs:
        m = trainer.train_epoch(batches)
        v = trainer.evaluate(test, threads=args.threads)
        history.append(v.accuracy)
        append_metrics(metrics_path, m)
        append_metrics(metrics_path, v)
        log.info("epoch %d: train loss %.4f acc %.4f | test loss %.4f acc %.4f | residual %.4f rate %.4f%s",
                 m.epoch, m.loss, m.accuracy, v.loss, v.accuracy, v.mean_residual, v.total_firing_rate,
                 "" if m.healthy else " [unhealthy]")
        save_checkpoint(ckpt_path, net, trainer, {**extra, "test_history": history})
    summary = {"best_acc": max(history) if history else None, "final_acc": history[-1] if history else None,
               "epochs": trainer.epoch}
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary))
    return EXIT_OK


def _load_trained(args):
    """Network from ``--checkpoint``, dataset config from ``--config`` or the checkpoint."""
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    net, _, header = load_checkpoint(args.checkpoint)
    if args.config:
        ds = load_run_config(args.config).dataset
    elif "dataset" in header.get("extra", {}):
        ds = DatasetConfig(**header["extra"]["dataset"])
    else:
        raise ConfigError("no dataset: pass --config")
    ds.validate()
    return net, header, ds


def _test_split(ds: DatasetConfig, header, seed: int) -> Dataset:
    _, test = load_data(ds, seed)
    norm = header.get("extra", {}).get("normalization")
    if norm and ds.name not in SYNTHETIC:
        raw = load_idx_dataset(ds.path("test_images_path"), ds.path("test_labels_path"), ds.n_classes, "test",
                               ds.name, ds.test_limit)
        test = raw.normalized(norm["mean"], norm["std"])
    return test


def _steps(args, header) -> int:
    if args.steps is not None:
        if args.steps < 1:
            raise ConfigError("--steps must be >= 1")
        return args.steps
    return int(header.get("config", {}).get("T", 5))


def cmd_eval(args) -> int:
    net, header, ds = _load_trained(args)
    seed = args.seed if args.seed is not None else 0
    test = _test_split(ds, header, seed)
    m = evaluate(net, test, _steps(args, header), threads=args.threads)
    row = {"loss": m.loss, "accuracy": m.accuracy, "mean_residual": m.mean_residual,
           "total_firing_rate": m.total_firing_rate}
    if args.out:
        out = _out_dir(args, None)
        append_metrics(os.path.join(out, "eval.csv"), m)
    print(json.dumps(row))
    return EXIT_OK


def cmd_equilibrium_diag(args) -> int:
    net, header, ds = _load_trained(args)
    test = _test_split(ds, header, args.seed or 0)
    if not 0 <= args.sample < len(test):
        raise ConfigError(f"--sample {args.sample} outside [0, {len(test)})")
    T = args.steps if args.steps is not None else 30
    if T < 1:
        raise ConfigError("--steps must be >= 1")
    _, trace = simulate(net, InputEncoding.constant(test.images[args.sample]), T, per_layer=True)
    if args.out:
        out = _out_dir(args, None)
        path = os.path.join(out, "residuals.csv")
        trace.write_csv(path)
        log.info("wrote %s", path)
    else:
        trace.write_csv(sys.stdout)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.checkpoint:
        net, header, ds = _load_trained(args)
        seed = args.seed or 0
    else:
        if not args.config:
            raise ConfigError("--config or --checkpoint is required")
        cfg = _apply_overrides(load_run_config(args.config), args)
        ds, seed = cfg.dataset, cfg.seed
        shape, n_classes = _dataset_shape(ds)
        net = build_from_config(cfg, shape, n_classes)
    widths = [layer.op.n_out for layer in net.layers]
    if max(widths) > GRADCHECK_MAX_WIDTH:
        raise ConfigError(f"gradcheck is limited to {GRADCHECK_MAX_WIDTH} neurons per layer; "
                          f"this network has {widths}")
    train, _ = load_data(ds, seed)
    if train.sample_shape != tuple(net.input_shape):
        raise ConfigError(f"dataset samples {train.sample_shape} do not fit the network input {net.input_shape}")
    rng = nx.rng_stream(seed, 300)
    pick = rng.choice(len(train), size=min(args.batch, len(train)), replace=False)
    x, y = train.images[pick], train.labels[pick]
    coords = sample_coordinates(net, args.coords, rng)
    rows = gradcheck(net, x, y, coords)
    tol = GRADCHECK_TOL[net.neuron.variant]
    if args.out:
        out = _out_dir(args, None)
        write_gradcheck_csv(rows, os.path.join(out, "gradcheck.csv"))
    else:
        write_gradcheck_csv(rows, sys.stdout)
    bad = [r for r in rows if r.abstained or not r.rel_err <= tol]
    worst = max((r.rel_err for r in rows if not r.abstained), default=0.0)
    verdict = "FAIL" if bad else "PASS"
    print(f"gradcheck {verdict}: {len(rows) - len(bad)}/{len(rows)} coordinates within {tol:g} "
          f"(worst {worst:.2e})", file=sys.stderr)
    return EXIT_CHECK if bad else EXIT_OK


def cmd_rates(args) -> int:
    net, header, ds = _load_trained(args)
    test = _test_split(ds, header, args.seed or 0)
    m = evaluate(net, test, _steps(args, header), threads=args.threads)
    rows = [(str(l), m.layer_rates[l]) for l in sorted(m.layer_rates)] + [("total", m.total_firing_rate)]
    f = open(os.path.join(_out_dir(args, None), "rates.csv"), "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(f)
        w.writerow(["layer", "rate"])
        for layer, r in rows:
            w.writerow([layer, repr(float(r))])
    finally:
        if f is not sys.stdout:
            f.close()
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "equilibrium-diag": cmd_equilibrium_diag,
    "gradcheck": cmd_gradcheck,
    "rates": cmd_rates,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqspike", description="Feedback spiking networks trained at their equilibrium.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--checkpoint", help="checkpoint file (resume for train; model for the others)")
    p.add_argument("--out", help="output directory (default: the config's output_dir, or stdout for CSV commands)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=1, help="batch-level parallelism for evaluation")
    p.add_argument("--dry-run", action="store_true", help="validate the config and print the parameter count")
    p.add_argument("--sample", type=int, default=0, help="test-set index for equilibrium-diag")
    p.add_argument("--steps", type=int, help="simulation steps T for diag/eval/rates")
    p.add_argument("--coords", type=int, default=20, help="coordinates sampled by gradcheck")
    p.add_argument("--batch", type=int, default=4, help="samples in the gradcheck loss")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, IDXFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
