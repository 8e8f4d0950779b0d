"""Network assembly: architecture shorthand, parameters, batch norm, readout.

A network is a chain of layers ``F^1 .. F^N`` (each an optional-BN linear op
followed by spiking neurons) plus a feedback op ``W^1`` from the last layer
back to the first, stored through a spectral re-parameterization, and a dense
readout on the last layer's rates.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .numerics import LinearOp, Shape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NeuronKind:
    variant: str = "IF"
    lam: float = 1.0

    def __post_init__(self):
        if self.variant not in ("IF", "LIF"):
            raise ValueError(f"neuron variant must be IF or LIF, got {self.variant!r}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"leak factor must lie in (0, 1], got {self.lam}")
        if self.variant == "IF" and self.lam != 1.0:
            raise ValueError("IF neurons have no leak (lambda == 1)")

    @classmethod
    def IF(cls) -> "NeuronKind":
        return cls("IF", 1.0)

    @classmethod
    def LIF(cls, lam: float = 0.95) -> "NeuronKind":
        return cls("LIF", lam)


# -- batch normalization ---------------------------------------------------

@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def identity(cls, channels: int) -> "BatchNorm":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))

    @property
    def channels(self) -> int:
        return len(self.gamma)

    def frozen_scale_shift(self) -> Tuple[np.ndarray, np.ndarray]:
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - scale * self.running_mean


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    count: int


def _channels_view(bn: BatchNorm, z: np.ndarray) -> np.ndarray:
    if z.shape[-1] != bn.channels:
        raise nx.ShapeError(f"batch norm over {bn.channels} channels got input {z.shape}")
    return z.reshape(-1, bn.channels)


def bn_batch_forward(bn: BatchNorm, z: np.ndarray) -> Tuple[np.ndarray, BNCache]:
    flat = _channels_view(bn, z)
    mean = flat.mean(axis=0)
    var = flat.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (flat - mean) * inv_std
    out = bn.gamma * xhat + bn.beta
    return out.reshape(z.shape), BNCache(xhat, inv_std, mean, var, len(flat))


def bn_batch_backward(bn: BatchNorm, cache: BNCache, dout: np.ndarray):
    """VJP of batch-statistics BN: returns (d_input, d_gamma, d_beta)."""
    d = _channels_view(bn, dout)
    dbeta = d.sum(axis=0)
    dgamma = (d * cache.xhat).sum(axis=0)
    dxhat = d * bn.gamma
    m = cache.count
    dz = cache.inv_std / m * (m * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0))
    return dz.reshape(dout.shape), dgamma, dbeta


def bn_update_running(bn: BatchNorm, cache: BNCache) -> None:
    unbiased = cache.var * cache.count / max(cache.count - 1, 1)
    bn.running_mean[...] = (1 - bn.momentum) * bn.running_mean + bn.momentum * cache.mean
    bn.running_var[...] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased


def bn_apply(bn: BatchNorm, z: np.ndarray, mode: str = "frozen", update: bool = True) -> np.ndarray:
    """Frozen mode is the affine map given by the running statistics; batch
    mode normalizes with the batch statistics and (by default) folds them into
    the running estimates."""
    if mode == "frozen":
        _channels_view(bn, z)
        scale, shift = bn.frozen_scale_shift()
        return z * scale + shift
    if mode == "batch":
        out, cache = bn_batch_forward(bn, z)
        if update:
            bn_update_running(bn, cache)
        return out
    raise ValueError(f"unknown batch-norm mode {mode!r}")


def bn_absorb(op: LinearOp, bn: BatchNorm) -> LinearOp:
    """Fold frozen BN into ``op`` so that ``apply(result, x) == BN(apply(op, x))``."""
    scale, shift = bn.frozen_scale_shift()
    w = op.weight
    if op.kind == nx.DENSE:
        w = w * scale[:, None]
    elif op.kind == nx.CONV2D:
        w = w * scale
    else:
        w = w * scale[None, None, :, None]
    return op.with_weight(w, bias=scale * op.bias + shift)


# -- spectral re-parameterization -------------------------------------------

@dataclass
class SpectralReparam:
    """Feedback weight stored as ``alpha * raw / ||raw||_2`` with ``|alpha| <= c``."""

    raw: LinearOp
    alpha: np.ndarray
    c: float = 1.0
    power_iters: int = 200
    power_tol: float = 1e-10
    _pi: Optional[nx.PowerIterationResult] = field(default=None, repr=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(())

    def clip(self) -> None:
        self.alpha[...] = np.clip(self.alpha, -self.c, self.c)

    def refresh(self) -> nx.PowerIterationResult:
        v0 = None if self._pi is None else self._pi.v
        self._pi = nx.power_iteration(self.raw, iters=self.power_iters, tol=self.power_tol, v0=v0)
        return self._pi

    @property
    def sigma(self) -> float:
        if self._pi is None:
            self.refresh()
        return self._pi.sigma

    @property
    def singular_vectors(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._pi is None:
            self.refresh()
        return self._pi.u, self._pi.v

    def chain_gradient(self, g_eff: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Map a gradient w.r.t. the effective weight onto (raw, alpha).

        The norm is differentiated through the current singular vectors,
        ``d sigma / d raw = weight_grad(v, u)``.
        """
        sigma = self.sigma
        u, v = self.singular_vectors
        inner = float(np.vdot(g_eff, self.raw.weight))
        dsigma = nx.weight_grad(self.raw, v[None], u[None])
        a = float(np.clip(self.alpha, -self.c, self.c))
        d_raw = (a / sigma) * (g_eff - (inner / sigma) * dsigma)
        d_alpha = np.asarray(inner / sigma if abs(float(self.alpha)) <= self.c else 0.0)
        return d_raw, d_alpha


def effective_feedback(rp: SpectralReparam) -> LinearOp:
    """Feedback op with spectral norm ``|clip(alpha, -c, c)|``."""
    if not np.any(rp.raw.weight):
        raise ValueError("feedback weight is identically zero; spectral re-parameterization is degenerate")
    sigma = rp.sigma
    if sigma <= 0:
        raise ValueError("feedback weight has zero spectral norm")
    a = float(np.clip(rp.alpha, -rp.c, rp.c))
    return rp.raw.with_weight(rp.raw.weight * (a / sigma))


# -- network ----------------------------------------------------------------

@dataclass
class Layer:
    op: LinearOp
    bn: Optional[BatchNorm] = None


@dataclass
class NetworkSpec:
    layers: List[Layer]
    feedback: SpectralReparam
    readout: LinearOp
    neuron: NeuronKind = field(default_factory=NeuronKind.IF)
    v_th: float = 2.0
    arch: str = ""
    _feedback_op: Optional[LinearOp] = field(default=None, repr=False)

    def __post_init__(self):
        if self.v_th <= 0:
            raise ValueError("v_th must be positive")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.op.output_shape != nxt.op.input_shape:
                raise nx.ShapeError(f"layer chain mismatch: {prev.op.output_shape} -> {nxt.op.input_shape}")
        fb = self.feedback.raw
        if fb.input_shape != self.layers[-1].op.output_shape or fb.output_shape != self.layers[0].op.output_shape:
            raise nx.ShapeError(f"feedback maps {fb.input_shape}->{fb.output_shape}, need "
                                f"{self.layers[-1].op.output_shape}->{self.layers[0].op.output_shape}")
        if self.readout.kind != nx.DENSE or self.readout.n_in != int(np.prod(self.layers[-1].op.output_shape)):
            raise nx.ShapeError("readout must be dense over the last layer's rates")

    @property
    def input_shape(self) -> Shape:
        return self.layers[0].op.input_shape

    @property
    def state_shape(self) -> Shape:
        return self.layers[-1].op.output_shape

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_classes(self) -> int:
        return self.readout.n_out

    def feedback_op(self) -> LinearOp:
        if self._feedback_op is None:
            self._feedback_op = effective_feedback(self.feedback)
        return self._feedback_op

    def refresh(self) -> None:
        """Recompute derived quantities after parameters changed in place."""
        self.feedback.clip()
        self.feedback.refresh()
        self._feedback_op = None

    def params(self) -> Dict[str, np.ndarray]:
        """Trainable tensors by name; the arrays are live (updated in place)."""
        p: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            p[f"layers.{i}.weight"] = layer.op.weight
            p[f"layers.{i}.bias"] = layer.op.bias
            if layer.bn is not None:
                p[f"layers.{i}.bn.gamma"] = layer.bn.gamma
                p[f"layers.{i}.bn.beta"] = layer.bn.beta
        p["feedback.raw"] = self.feedback.raw.weight
        p["feedback.alpha"] = self.feedback.alpha
        p["readout.weight"] = self.readout.weight
        return p

    def buffers(self) -> Dict[str, np.ndarray]:
        b: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            if layer.bn is not None:
                b[f"layers.{i}.bn.running_mean"] = layer.bn.running_mean
                b[f"layers.{i}.bn.running_var"] = layer.bn.running_var
        return b

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params().values()))

    def neuron_count(self) -> int:
        return int(sum(layer.op.n_out for layer in self.layers))

    def product_norm_bound(self) -> float:
        """``||W^1|| * prod_l ||F^l||`` over l >= 2 (frozen BN folded in)."""
        prod = nx.spectral_norm(self.feedback_op(), iters=500, tol=1e-9)
        for layer in self.layers[1:]:
            op = bn_absorb(layer.op, layer.bn) if layer.bn is not None else layer.op
            prod *= nx.spectral_norm(op, iters=500, tol=1e-9)
        return prod

    def describe(self) -> str:
        lines = [f"architecture: {self.arch or to_shorthand(self)}",
                 f"neuron: {self.neuron.variant} lambda={self.neuron.lam} v_th={self.v_th}"]
        for i, layer in enumerate(self.layers, 1):
            lines.append(f"  F{i}: {layer.op.describe()}" + (" + BN" if layer.bn is not None else ""))
        lines.append(f"  W1 (feedback): {self.feedback.raw.describe()} alpha={float(self.feedback.alpha):.4g} c={self.feedback.c}")
        lines.append(f"  readout: {self.readout.describe()}")
        lines.append(f"neurons: {self.neuron_count()}  params: {self.param_count()}")
        return "\n".join(lines)


# -- architecture shorthand ------------------------------------------------

_TOKEN = re.compile(r"^(\d+)(?:C(\d+)([su]?))?$")


@dataclass(frozen=True)
class OpSpec:
    channels: int
    kernel: Optional[int] = None  # None => dense
    mode: str = ""  # "", "s" (stride 2), "u" (transposed, upscale 2)

    def text(self) -> str:
        return str(self.channels) if self.kernel is None else f"{self.channels}C{self.kernel}{self.mode}"


def _parse_token(tok: str) -> OpSpec:
    m = _TOKEN.match(tok.strip())
    if not m:
        raise ValueError(f"cannot parse architecture token {tok!r} (expected e.g. '400', '64C5', '64C5s', '96C4u')")
    ch, k, mode = m.groups()
    return OpSpec(int(ch), int(k) if k else None, mode or "")


def parse_architecture(text: str) -> Tuple[List[OpSpec], OpSpec]:
    """``"64C5s (F64C5)"`` -> ([OpSpec(64, 5, 's')], OpSpec(64, 5, ''))."""
    m = re.match(r"^\s*([^()]+?)\s*\(\s*F\s*([^()]+?)\s*\)\s*$", text)
    if not m:
        raise ValueError(f"architecture {text!r} must look like '<layers> (F<feedback>)'")
    layers = [_parse_token(t) for t in m.group(1).split("-")]
    fb = _parse_token(m.group(2))
    return layers, fb


# lower end of the uniform weight draw; both readings of "standard uniform"
INIT_LOW = {"uniform": 0.0, "symmetric": -1.0}


def _build_op(spec: OpSpec, input_shape: Shape, rng: np.random.Generator, low: float = 0.0) -> LinearOp:
    if spec.kernel is None:
        if spec.mode:
            raise ValueError("stride/upscale suffixes apply to convolutions only")
        n_in = int(np.prod(input_shape))
        w = rng.uniform(low, 1.0, (spec.channels, n_in))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        return LinearOp(nx.DENSE, w, None, input_shape)
    if len(input_shape) != 3:
        raise ValueError(f"convolution {spec.text()} needs an (H, W, C) input, got {input_shape}")
    k = spec.kernel
    c_in = input_shape[-1]
    pad = (k - 1) // 2
    if spec.mode == "u":
        w = rng.uniform(low, 1.0, (k, k, spec.channels, c_in))
        w /= np.sqrt((w * w).sum(axis=(0, 1, 3), keepdims=True))
        return LinearOp(nx.CONV2D_T, w, None, input_shape, stride=2, padding=pad)
    if spec.mode == "" and k % 2 == 0:
        raise ValueError(f"stride-1 convolution {spec.text()} needs an odd kernel to preserve size")
    w = rng.uniform(low, 1.0, (k, k, c_in, spec.channels))
    w /= np.sqrt((w * w).sum(axis=(0, 1, 2), keepdims=True))
    return LinearOp(nx.CONV2D, w, None, input_shape, stride=2 if spec.mode == "s" else 1, padding=pad)


def build_network(arch: str, input_shape: Sequence[int], n_classes: int,
                  neuron: Optional[NeuronKind] = None, v_th: float = 2.0, bn: bool = True,
                  c: float = 1.0, seed: int = 0, init: str = "uniform") -> NetworkSpec:
    """Parse ``arch`` and initialize parameters.

    Weights are drawn from U(0, 1) (``init="symmetric"``: U(-1, 1)) and each
    output unit's fan-in is scaled to unit 2-norm; biases start at zero; BN
    starts as the identity.
    """
    if init not in INIT_LOW:
        raise ValueError(f"init must be one of {sorted(INIT_LOW)}, got {init!r}")
    low = INIT_LOW[init]
    rng = nx.rng_stream(seed, 1)
    specs, fb_spec = parse_architecture(arch)
    shape = tuple(int(d) for d in input_shape)
    layers: List[Layer] = []
    for s in specs:
        op = _build_op(s, shape, rng, low)
        layers.append(Layer(op, BatchNorm.identity(op.channels_out) if bn else None))
        shape = op.output_shape
    fb_raw = _build_op(fb_spec, shape, rng, low)
    if fb_raw.output_shape != layers[0].op.output_shape:
        raise ValueError(f"feedback {fb_spec.text()} maps {shape} to {fb_raw.output_shape}, "
                         f"but the first layer produces {layers[0].op.output_shape}")
    readout = _build_op(OpSpec(n_classes), shape, rng, low)
    rp = SpectralReparam(fb_raw, np.array(0.0), c=c)
    rp.alpha[...] = min(rp.sigma, c)
    return NetworkSpec(layers, rp, readout, neuron or NeuronKind.IF(), v_th, arch=arch)


def init_params(net: NetworkSpec, seed: int, init: str = "uniform") -> NetworkSpec:
    """Fresh parameters for the architecture of ``net``."""
    has_bn = any(layer.bn is not None for layer in net.layers)
    return build_network(net.arch or to_shorthand(net), net.input_shape, net.n_classes,
                         net.neuron, net.v_th, bn=has_bn, c=net.feedback.c, seed=seed, init=init)


def _op_text(op: LinearOp) -> str:
    if op.kind == nx.DENSE:
        return str(op.n_out)
    k = op.weight.shape[0]
    suffix = "u" if op.kind == nx.CONV2D_T else ("s" if op.stride == 2 else "")
    return f"{op.channels_out}C{k}{suffix}"


def to_shorthand(net: NetworkSpec) -> str:
    body = "-".join(_op_text(layer.op) for layer in net.layers)
    return f"{body} (F{_op_text(net.feedback.raw)})"


# -- readout and loss -------------------------------------------------------

@dataclass
class ReadoutResult:
    logits: np.ndarray
    loss: float
    grad_rates: np.ndarray  # dL/da[T], same shape as the rates
    grad_readout: np.ndarray  # dL/dW^o
    probs: np.ndarray


def softmax(o: np.ndarray) -> np.ndarray:
    z = o - o.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def readout_and_loss(a_T: np.ndarray, readout: LinearOp, labels: np.ndarray) -> ReadoutResult:
    """Logits ``o = W^o a[T]`` and mean softmax cross-entropy over the batch."""
    a_T = np.asarray(a_T, dtype=np.float64)
    labels = np.asarray(labels)
    single = labels.ndim == 0
    if single:
        a_T = a_T[None]
        labels = labels[None]
    b = len(labels)
    n_cls = readout.n_out
    if np.any(labels < 0) or np.any(labels >= n_cls) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integer class indices in [0, {n_cls})")
    flat = a_T.reshape(b, -1)
    logits = flat @ readout.weight.T + readout.bias
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(b), labels].mean())
    probs = np.exp(logp)
    d_o = probs.copy()
    d_o[np.arange(b), labels] -= 1.0
    d_o /= b
    grad_rates = (d_o @ readout.weight).reshape(a_T.shape)
    grad_readout = d_o.T @ flat
    if single:
        grad_rates, logits, probs = grad_rates[0], logits[0], probs[0]
    return ReadoutResult(logits, loss, grad_rates, grad_readout, probs)
