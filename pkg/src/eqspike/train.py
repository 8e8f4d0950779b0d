"""Training loop: simulate, differentiate at the equilibrium, SGD step.

Per mini-batch: simulate ``T`` steps with frozen BN to get ``a[T]``; read out
and take the cross-entropy; solve the adjoint system of the fixed-point map
(BN on batch statistics) at ``a[T]``; assemble the parameter gradients; take
an SGD-with-momentum step; re-clip the feedback scale.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import numerics as nx
from .data import BatchIterator, Dataset
from .dynamics import InputEncoding, RateAccumulator, simulate
from .equilibrium import BROYDEN, FixedPointMap, SolverConfig, residual, solve_fixed_point
from .idegrad import GradientSet, Linearization, param_gradients, solve_adjoint
from .model import NetworkSpec, NeuronKind, build_network, readout_and_loss

log = logging.getLogger(__name__)

NO_DECAY_SUFFIXES = (".bn.gamma", ".bn.beta", "feedback.alpha")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_every: int = 30
    milestones: Optional[List[int]] = None  # overrides decay_every when set
    decay_factor: float = 0.1
    warmup_iters: int = 0
    T: int = 5
    backward: SolverConfig = field(default_factory=lambda: SolverConfig(BROYDEN, 30, 1e-6))
    forward_refine: Optional[SolverConfig] = None
    dropout: float = 0.0
    decay_bn_and_alpha: bool = False
    max_unconverged_fraction: float = 1.0
    augment: bool = False
    eval_batch_size: int = 1000
    seed: int = 0
    dataset: str = ""
    architecture: str = ""

    def __post_init__(self):
        if isinstance(self.backward, dict):
            self.backward = SolverConfig(**self.backward)
        if isinstance(self.forward_refine, dict):
            self.forward_refine = SolverConfig(**self.forward_refine)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(iteration: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_iters`` iterations, then step decay."""
    if cfg.warmup_iters and iteration < cfg.warmup_iters:
        return cfg.lr * iteration / cfg.warmup_iters
    if cfg.milestones is not None:
        passed = sum(1 for m in cfg.milestones if epoch >= m)
    elif cfg.decay_every:
        passed = epoch // cfg.decay_every
    else:
        passed = 0
    return cfg.lr * cfg.decay_factor ** passed


@dataclass
class SGDState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def sgd_step(params: Dict[str, np.ndarray], grads: GradientSet, state: SGDState, lr: float,
             momentum: float, wd: float, no_decay: Callable[[str], bool] = lambda name: False) -> bool:
    """Classical momentum with L2 decay folded into the gradient, in place.

    ``v <- momentum * v + (g + wd * theta)``; ``theta <- theta - lr * v``.
    Returns False (and changes nothing) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise nx.ShapeError(f"gradient {name}: shape {np.shape(g)} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient for %s; optimizer step skipped", name)
            return False
    for name, g in grads.items():
        p = params[name]
        d = g if (wd == 0 or no_decay(name)) else g + wd * p
        v = state.velocity.get(name)
        v = d.copy() if v is None else momentum * v + d
        state.velocity[name] = v
        p -= lr * v
    return True


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float
    mean_residual: float
    total_firing_rate: float
    layer_rates: Dict[int, float] = field(default_factory=dict)
    unconverged_fraction: float = 0.0
    healthy: bool = True


def _collect_arrays(obj, seen: Dict[int, int], exclude: set, depth: int = 0) -> None:
    if depth > 6 or obj is None:
        return
    if isinstance(obj, np.ndarray):
        base = obj if obj.base is None else obj.base
        if id(base) not in exclude and id(obj) not in exclude:
            seen[id(obj)] = obj.nbytes
        return
    if isinstance(obj, (str, bytes, int, float, bool, np.generic)):
        return
    if isinstance(obj, dict):
        for v in obj.values():
            _collect_arrays(v, seen, exclude, depth + 1)
        return
    if isinstance(obj, (list, tuple)):
        for v in obj:
            _collect_arrays(v, seen, exclude, depth + 1)
        return
    if isinstance(obj, NetworkSpec):
        return
    d = getattr(obj, "__dict__", None)
    if d is not None:
        _collect_arrays(d, seen, exclude, depth + 1)


@dataclass
class RetentionReport:
    """Arrays alive between the end of the forward pass and the optimizer step."""

    count: int
    nbytes: int


class Trainer:
    def __init__(self, net: NetworkSpec, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.opt = SGDState()
        self.iteration = 0
        self.epoch = 0
        self.rng = nx.rng_stream(cfg.seed, 77)
        self.retention_probe: Optional[Callable[[RetentionReport], None]] = None

    @property
    def has_bn(self) -> bool:
        return any(layer.bn is not None for layer in self.net.layers)

    def _no_decay(self, name: str) -> bool:
        return (not self.cfg.decay_bn_and_alpha) and name.endswith(NO_DECAY_SUFFIXES)

    def forward(self, x: np.ndarray):
        """Simulate ``T`` steps (BN frozen); returns (a[T], final state)."""
        state, _ = simulate(self.net, InputEncoding.constant(x), self.cfg.T, trace=False)
        a_T = state.rates[-1]
        if self.cfg.forward_refine is not None:
            sol = solve_fixed_point(FixedPointMap(self.net, x), self.cfg.forward_refine, a0=a_T)
            a_T = sol.a_star
        return a_T, state

    def _dropout_masks(self, batch: int):
        p = self.cfg.dropout
        if p <= 0:
            return None
        masks = []
        for layer in self.net.layers:
            keep = self.rng.random((batch,) + tuple(layer.op.output_shape)) >= p
            masks.append(keep / (1.0 - p))
        return masks

    def train_step(self, x: np.ndarray, y: np.ndarray):
        net, cfg = self.net, self.cfg
        a_T, state = self.forward(x)
        ro = readout_and_loss(a_T, net.readout, y)
        correct = int((ro.logits.argmax(axis=1) == y).sum())
        res = residual(FixedPointMap(net, x), a_T)
        spikes = [c.copy() for c in state.spike_count]
        t_sim = state.t
        del state  # forward ends here: only a[T] and summary counts survive

        fmap = FixedPointMap(net, x, bn_mode="batch" if self.has_bn else "frozen",
                             dropout=self._dropout_masks(len(x)))
        lin = Linearization(fmap, a_T)
        bs = solve_adjoint(fmap, a_T, ro.grad_rates, cfg.backward, lin=lin)
        grads = param_gradients(fmap, a_T, bs)
        grads["readout.weight"] = ro.grad_readout
        fmap.update_running_stats(a_T, lin.caches)

        if self.retention_probe is not None:
            seen: Dict[int, int] = {}
            exclude = {id(v) for v in net.params().values()} | {id(v) for v in net.buffers().values()}
            # everything still bound in this frame, so a forgotten per-step buffer would show up
            alive = {k: v for k, v in locals().items() if k not in ("self", "seen", "exclude")}
            _collect_arrays(alive, seen, exclude)
            self.retention_probe(RetentionReport(len(seen), sum(seen.values())))

        lr = lr_at(self.iteration, self.epoch, cfg)
        stepped = sgd_step(net.params(), grads, self.opt, lr, cfg.momentum, cfg.weight_decay, self._no_decay)
        net.refresh()
        self.iteration += 1
        return {"loss": ro.loss * len(y), "correct": correct, "residual": float(np.sum(res)),
                "converged": bs.converged, "spikes": spikes, "t": t_sim, "stepped": stepped}

    def train_epoch(self, batches: BatchIterator) -> EpochMetrics:
        n = loss = correct = res = 0.0
        unconverged = nbatches = 0
        acc = RateAccumulator()
        for x, y in batches:
            out = self.train_step(x, y)
            n += len(y)
            loss += out["loss"]
            correct += out["correct"]
            res += out["residual"]
            nbatches += 1
            unconverged += 0 if out["converged"] else 1
            acc.add_counts(out["spikes"], out["t"])
        frac = unconverged / max(nbatches, 1)
        healthy = frac <= self.cfg.max_unconverged_fraction
        if not healthy:
            log.warning("epoch %d: %.0f%% of backward solves did not converge", self.epoch, 100 * frac)
        stats = acc.stats() if acc.spikes else {"total": 0.0}
        m = EpochMetrics(self.epoch, "train", loss / max(n, 1), correct / max(n, 1), res / max(n, 1),
                         stats["total"], {k: v for k, v in stats.items() if k != "total"}, frac, healthy)
        self.epoch += 1
        return m

    def evaluate(self, data: Dataset, threads: int = 1, T: Optional[int] = None) -> EpochMetrics:
        return evaluate(self.net, data, T or self.cfg.T, self.cfg.eval_batch_size, threads, epoch=self.epoch - 1)


def evaluate(net: NetworkSpec, data: Dataset, T: int, batch_size: int = 1000, threads: int = 1,
             epoch: int = 0, split: str = "test") -> EpochMetrics:
    """Inference with frozen BN: accuracy, loss, mean residual, firing rates."""
    starts = list(range(0, len(data), batch_size))

    def run(s):
        x = data.images[s:s + batch_size]
        y = data.labels[s:s + batch_size]
        state, _ = simulate(net, InputEncoding.constant(x), T, trace=False)
        a = state.rates[-1]
        ro = readout_and_loss(a, net.readout, y)
        res = residual(FixedPointMap(net, x), a)
        return (ro.loss * len(y), int((ro.logits.argmax(axis=1) == y).sum()), float(np.sum(res)),
                [c.copy() for c in state.spike_count], state.t)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    acc = RateAccumulator()
    loss = correct = res = 0.0
    for l_, c_, r_, spikes, t in parts:  # fixed reduction order
        loss += l_
        correct += c_
        res += r_
        acc.add_counts(spikes, t)
    n = max(len(data), 1)
    stats = acc.stats() if acc.spikes else {"total": 0.0}
    return EpochMetrics(epoch, split, loss / n, correct / n, res / n, stats["total"],
                        {k: v for k, v in stats.items() if k != "total"})


METRICS_HEADER = ["epoch", "split", "loss", "accuracy", "mean_residual", "total_firing_rate"]


def append_metrics(path: str, m: EpochMetrics) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(METRICS_HEADER)
        w.writerow([m.epoch, m.split, repr(m.loss), repr(m.accuracy), repr(m.mean_residual),
                    repr(m.total_firing_rate)])


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"IDE1"
FORMAT_VERSION = 1


def model_meta(net: NetworkSpec) -> dict:
    return {
        "architecture": net.arch,
        "input_shape": list(net.input_shape),
        "n_classes": net.n_classes,
        "neuron": {"kind": net.neuron.variant, "lambda": net.neuron.lam},
        "v_th": net.v_th,
        "bn": any(layer.bn is not None for layer in net.layers),
        "c": net.feedback.c,
    }


def net_from_meta(meta: dict) -> NetworkSpec:
    n = meta["neuron"]
    return build_network(meta["architecture"], meta["input_shape"], meta["n_classes"],
                         NeuronKind(n["kind"], n["lambda"]), meta["v_th"], bn=meta["bn"], c=meta["c"])


def save_checkpoint(path: str, net: NetworkSpec, trainer: Optional[Trainer] = None, extra: Optional[dict] = None) -> None:
    """``IDE1`` | u32 version | u64 header length | JSON header | float64 LE tensors."""
    tensors: Dict[str, np.ndarray] = {}
    for k, v in net.params().items():
        tensors["param/" + k] = v
    for k, v in net.buffers().items():
        tensors["buffer/" + k] = v
    # the exact power-iteration state, so a resumed run sees the same sigma
    pi = net.feedback.refresh() if net.feedback._pi is None else net.feedback._pi
    tensors["power/u"] = pi.u
    tensors["power/v"] = pi.v
    header = {"model": model_meta(net), "extra": extra or {},
              "power": {"sigma": float(pi.sigma), "iterations": int(pi.iterations)}}
    if trainer is not None:
        for k, v in trainer.opt.velocity.items():
            tensors["momentum/" + k] = v
        header["config"] = trainer.cfg.to_dict()
        header["counters"] = {"epoch": trainer.epoch, "iteration": trainer.iteration, "skipped": trainer.opt.skipped}
        header["rng"] = trainer.rng.bit_generator.state
    manifest = []
    offset = 0
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f8", order="C")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    header["manifest"] = manifest
    blob = json.dumps(header).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name, arr in tensors.items():
            f.write(np.array(arr, dtype="<f8", order="C").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for item in header["manifest"]:
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=base + item["offset"])
        tensors[item["name"]] = arr.reshape(item["shape"]).astype(np.float64)
    return header, tensors


def load_checkpoint(path: str, cfg: Optional[TrainConfig] = None) -> Tuple[NetworkSpec, Optional[Trainer], dict]:
    """Rebuild the network (and the trainer, if the checkpoint holds one)."""
    header, tensors = read_checkpoint(path)
    net = net_from_meta(header["model"])
    params, buffers = net.params(), net.buffers()
    for name, arr in tensors.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key][...] = arr
        elif kind == "buffer":
            buffers[key][...] = arr
    if "power" in header and "power/u" in tensors:
        net.feedback._pi = nx.PowerIterationResult(header["power"]["sigma"], tensors["power/u"],
                                                   tensors["power/v"], header["power"]["iterations"])
    else:
        net.feedback._pi = nx.power_iteration(net.feedback.raw, iters=net.feedback.power_iters,
                                              tol=net.feedback.power_tol, v0=tensors.get("power/v"))
    net._feedback_op = None
    trainer = None
    if "config" in header:
        c = dict(header["config"])
        trainer = Trainer(net, cfg or TrainConfig(**c))
        trainer.epoch = header["counters"]["epoch"]
        trainer.iteration = header["counters"]["iteration"]
        trainer.opt.skipped = header["counters"].get("skipped", 0)
        trainer.opt.velocity = {name.partition("/")[2]: arr.copy() for name, arr in tensors.items()
                                if name.startswith("momentum/")}
        trainer.rng.bit_generator.state = header["rng"]
    return net, trainer, header
