"""Dense/convolutional linear operators, power iteration and seeded RNG streams.

Tensors are plain float64 numpy arrays. Every operator carries explicit
``input_shape``/``output_shape`` descriptors for a single sample; ``apply`` and
``adjoint`` also accept any number of leading batch axes.

Image tensors are channels-last: ``(H, W, C)`` per sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Shape = Tuple[int, ...]

DENSE = "dense"
CONV2D = "conv2d"
CONV2D_T = "conv2d_transposed"
KINDS = (DENSE, CONV2D, CONV2D_T)


class ShapeError(ValueError):
    pass


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for the pair ``(seed, stream)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def conv_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> Tuple[int, int]:
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kernel} does not fit input {h}x{w} (padding {padding})")
    return oh, ow


def _patches(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """(B, H, W, C) -> (B, oh, ow, k, k, C) view of zero-padded sliding windows."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))  # (B, H', W', C, k, k)
    win = win[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def _conv_forward(x, weight, stride, padding):
    # x (B,H,W,Cin), weight (k,k,Cin,Cout)
    k = weight.shape[0]
    cols = _patches(x, k, stride, padding)
    return np.tensordot(cols, weight, axes=([3, 4, 5], [0, 1, 2]))


def _conv_backward_input(y, weight, stride, padding, in_hw):
    """Exact transpose of ``_conv_forward`` with respect to its input."""
    k, _, cin, _ = weight.shape
    b, oh, ow, _ = y.shape
    h, w = in_hw
    cols = np.tensordot(y, weight, axes=([3], [3]))  # (B, oh, ow, k, k, Cin)
    out = np.zeros((b, h + 2 * padding, w + 2 * padding, cin))
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    if padding:
        out = out[:, padding:padding + h, padding:padding + w, :]
    return out


def _conv_weight_grad(x, y, kernel, stride, padding):
    # d<y, conv_w(x)>/dw, shape (k,k,Cin,Cout)
    cols = _patches(x, kernel, stride, padding)
    return np.tensordot(cols, y, axes=([0, 1, 2], [0, 1, 2]))


@dataclass
class LinearOp:
    """A linear map plus bias.

    ``dense``: weight ``(out, in)`` acting on the flattened sample.
    ``conv2d``: weight ``(k, k, C_in, C_out)``, input ``(H, W, C_in)``.
    ``conv2d_transposed``: weight ``(k, k, C_out, C_in)``; defined as the
    adjoint of the stride-``s`` convolution from ``output_shape`` to
    ``input_shape`` with that weight, so ``apply`` here is that convolution's
    ``adjoint``.
    """

    kind: str
    weight: np.ndarray
    bias: np.ndarray
    input_shape: Shape
    output_shape: Shape = ()
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown LinearOp kind {self.kind!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.output_shape = self._infer_output_shape()
        if self.bias is None:
            self.bias = np.zeros(self.channels_out)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.channels_out,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.channels_out},)")

    def _infer_output_shape(self) -> Shape:
        if self.kind == DENSE:
            n_in = int(np.prod(self.input_shape))
            if self.weight.ndim != 2 or self.weight.shape[1] != n_in:
                raise ShapeError(f"dense weight {self.weight.shape} incompatible with input {self.input_shape}")
            return (self.weight.shape[0],)
        if len(self.input_shape) != 3 or self.weight.ndim != 4:
            raise ShapeError("conv ops need (H, W, C) inputs and 4-d weights")
        k = self.weight.shape[0]
        h, w, c = self.input_shape
        if self.kind == CONV2D:
            if self.weight.shape[2] != c:
                raise ShapeError(f"conv weight {self.weight.shape} expects {self.weight.shape[2]} input channels, got {c}")
            oh, ow = conv_output_hw(h, w, k, self.stride, self.padding)
            return (oh, ow, self.weight.shape[3])
        if self.weight.shape[3] != c:
            raise ShapeError(f"transposed conv weight {self.weight.shape} expects {self.weight.shape[3]} input channels, got {c}")
        oh, ow = h * self.stride, w * self.stride
        if conv_output_hw(oh, ow, k, self.stride, self.padding) != (h, w):
            raise ShapeError(f"transposed conv geometry (k={k}, s={self.stride}, p={self.padding}) "
                             f"cannot upscale {h}x{w} to {oh}x{ow}")
        return (oh, ow, self.weight.shape[2])

    @property
    def channels_out(self) -> int:
        return self.output_shape[0] if self.kind == DENSE else self.output_shape[-1]

    @property
    def n_in(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def n_out(self) -> int:
        return int(np.prod(self.output_shape))

    def with_weight(self, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> "LinearOp":
        return LinearOp(self.kind, weight, self.bias if bias is None else bias,
                        self.input_shape, stride=self.stride, padding=self.padding)

    def describe(self) -> str:
        if self.kind == DENSE:
            return f"dense {self.n_in}->{self.n_out}"
        k = self.weight.shape[0]
        return f"{self.kind} k={k} s={self.stride} p={self.padding} {self.input_shape}->{self.output_shape}"


def _split_batch(x: np.ndarray, shape: Shape, what: str) -> Tuple[np.ndarray, Shape]:
    x = np.asarray(x, dtype=np.float64)
    nd = len(shape)
    if x.ndim < nd or tuple(x.shape[x.ndim - nd:]) != tuple(shape):
        raise ShapeError(f"{what}: expected trailing shape {tuple(shape)}, got {x.shape}")
    lead = x.shape[:x.ndim - nd]
    return x.reshape((-1,) + tuple(shape)), lead


def linear(op: LinearOp, x: np.ndarray) -> np.ndarray:
    """``op`` applied without bias."""
    xb, lead = _split_batch(x, op.input_shape, "apply")
    if op.kind == DENSE:
        y = xb.reshape(len(xb), -1) @ op.weight.T
    elif op.kind == CONV2D:
        y = _conv_forward(xb, op.weight, op.stride, op.padding)
    else:
        y = _conv_backward_input(xb, op.weight, op.stride, op.padding, op.output_shape[:2])
    return y.reshape(lead + op.output_shape)


def apply(op: LinearOp, x: np.ndarray) -> np.ndarray:
    """``op @ x + bias`` (bias broadcast over spatial positions for convs)."""
    return linear(op, x) + op.bias


def adjoint(op: LinearOp, y: np.ndarray) -> np.ndarray:
    """Transpose of ``linear(op, .)``; the bias is not involved."""
    yb, lead = _split_batch(y, op.output_shape, "adjoint")
    if op.kind == DENSE:
        x = yb.reshape(len(yb), -1) @ op.weight
    elif op.kind == CONV2D:
        x = _conv_backward_input(yb, op.weight, op.stride, op.padding, op.input_shape[:2])
    else:
        x = _conv_forward(yb, op.weight, op.stride, op.padding)
    return x.reshape(lead + op.input_shape)


def weight_grad(op: LinearOp, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of ``sum <y, linear(op, x)>`` over the batch with respect to ``op.weight``."""
    xb, _ = _split_batch(x, op.input_shape, "weight_grad")
    yb, _ = _split_batch(y, op.output_shape, "weight_grad")
    if len(xb) != len(yb):
        raise ShapeError("weight_grad: batch sizes differ")
    if op.kind == DENSE:
        return yb.reshape(len(yb), -1).T @ xb.reshape(len(xb), -1)
    k = op.weight.shape[0]
    if op.kind == CONV2D:
        return _conv_weight_grad(xb, yb, k, op.stride, op.padding)
    # <y, T x> = <C y, x>: roles of the two arguments swap
    return _conv_weight_grad(yb, xb, k, op.stride, op.padding)


def bias_grad(op: LinearOp, y: np.ndarray) -> np.ndarray:
    yb, _ = _split_batch(y, op.output_shape, "bias_grad")
    return yb.reshape(-1, op.channels_out).sum(axis=0)


@dataclass
class PowerIterationResult:
    sigma: float
    u: np.ndarray  # left singular vector, op.output_shape
    v: np.ndarray  # right singular vector, op.input_shape
    iterations: int


def power_iteration(op: LinearOp, iters: int = 50, tol: float = 1e-6,
                    v0: Optional[np.ndarray] = None, seed: int = 0) -> PowerIterationResult:
    """Largest singular value of the bias-free map via iteration on ``op^T op``.

    Stops when the eigen-residual ``||A^T A v - s^2 v|| / s^2`` drops below
    ``tol``. ``v0`` allows warm starts (training keeps the previous vector).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if v0 is None:
        v = rng_stream(seed, 0x5EC7).standard_normal(op.input_shape)
    else:
        v = np.array(v0, dtype=np.float64).reshape(op.input_shape)
    nv = np.linalg.norm(v)
    if nv == 0:
        v = np.ones(op.input_shape)
        nv = np.linalg.norm(v)
    v /= nv
    it = 0
    for it in range(1, iters + 1):
        u = linear(op, v)
        w = adjoint(op, u)
        s2 = float(np.vdot(v, w))
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return PowerIterationResult(0.0, np.zeros(op.output_shape), v, it)
        done = np.linalg.norm(w - s2 * v) <= tol * s2
        v = w / nw
        if done:
            break
    u = linear(op, v)
    sigma = float(np.linalg.norm(u))
    if sigma > 0:
        u /= sigma
    return PowerIterationResult(sigma, u, v, it)


def spectral_norm(op: LinearOp, iters: int = 50, tol: float = 1e-6, seed: int = 0) -> float:
    if not np.any(op.weight):
        return 0.0
    return power_iteration(op, iters=iters, tol=tol, seed=seed).sigma


def transpose_op(op: LinearOp) -> LinearOp:
    """The adjoint map as a LinearOp (zero bias)."""
    if op.kind == DENSE:
        w = op.weight.T
        if len(op.output_shape) != 1:
            raise ShapeError("transpose_op needs a flat dense output")
        return LinearOp(DENSE, w, None, op.output_shape)
    if op.kind == CONV2D:
        return LinearOp(CONV2D_T, op.weight, None, op.output_shape, stride=op.stride, padding=op.padding)
    return LinearOp(CONV2D, op.weight, None, op.output_shape, stride=op.stride, padding=op.padding)


def dense(weight, bias=None) -> LinearOp:
    weight = np.asarray(weight, dtype=np.float64)
    return LinearOp(DENSE, weight, bias, (weight.shape[1],))


def conv2d(weight, input_shape: Sequence[int], stride: int = 1, padding: int = 0, bias=None) -> LinearOp:
    return LinearOp(CONV2D, weight, bias, tuple(input_shape), stride=stride, padding=padding)


def conv2d_transposed(weight, input_shape: Sequence[int], stride: int = 2, padding: int = 0, bias=None) -> LinearOp:
    return LinearOp(CONV2D_T, weight, bias, tuple(input_shape), stride=stride, padding=padding)
