"""Fixed-point maps of average firing rates and the solvers used on them.

For a single-layer network the map is ``f(a) = sigma((W a + F x* + b) / V_th)``.
For ``N`` layers the exposed equilibrium is the last layer's rate and the map
is the composite ``f_N(... f_2(f_1(a^N, x*)))``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, TextIO, Union

import numpy as np

from . import numerics as nx
from .model import BNCache, NetworkSpec, bn_batch_forward, bn_update_running

log = logging.getLogger(__name__)

BROYDEN = "broyden"
FIXED_POINT = "fixed_point"


def clamp_sigma(z):
    """Elementwise clamp to [0, 1]."""
    return np.clip(z, 0.0, 1.0)


def interior(z: np.ndarray) -> np.ndarray:
    """Derivative of ``clamp_sigma``: 1 strictly inside (0, 1), else 0."""
    return ((z > 0.0) & (z < 1.0)).astype(np.float64)


@dataclass
class LayerCache:
    inp: np.ndarray  # what the linear op consumed (after dropout)
    z: np.ndarray  # pre-activation (already divided by v_th)
    rate: np.ndarray
    bn: Optional[BNCache] = None
    pre_bn: Optional[np.ndarray] = None


class FixedPointMap:
    """The rate map of ``net`` for encoded input ``x_star``.

    ``x_star`` is one sample (shape ``net.input_shape``) or a batch with one
    leading axis; rates passed to the map must match. ``bn_mode`` selects
    running statistics ("frozen") or batch statistics ("batch") for every BN
    in the map. ``dropout`` optionally holds one multiplicative mask per layer,
    applied to that layer's rate wherever it is consumed.
    """

    def __init__(self, net: NetworkSpec, x_star: np.ndarray, bn_mode: str = "frozen",
                 dropout: Optional[Sequence[Optional[np.ndarray]]] = None):
        if bn_mode not in ("frozen", "batch"):
            raise ValueError(f"unknown bn_mode {bn_mode!r}")
        self.net = net
        x = np.asarray(x_star, dtype=np.float64)
        if x.shape == tuple(net.input_shape):
            self.batched = False
            x = x[None]
        elif x.shape[1:] == tuple(net.input_shape):
            self.batched = True
        else:
            raise nx.ShapeError(f"input {x.shape} does not match network input {net.input_shape}")
        self.x = x
        self.bn_mode = bn_mode
        self.dropout = list(dropout) if dropout is not None else [None] * net.n_layers
        self.v_th = net.v_th
        self.W = net.feedback_op()
        first = net.layers[0]
        p1 = nx.apply(first.op, x)
        self.drive_pre_bn = p1
        self.drive_cache: Optional[BNCache] = None
        if first.bn is None:
            self.drive = p1
        elif bn_mode == "frozen":
            scale, shift = first.bn.frozen_scale_shift()
            self.drive = p1 * scale + shift
        else:
            self.drive, self.drive_cache = bn_batch_forward(first.bn, p1)

    @property
    def state_shape(self):
        return self.net.state_shape

    @property
    def coupled(self) -> bool:
        """True when batch-statistics BN makes samples interact through the state."""
        return self.bn_mode == "batch" and any(l.bn is not None for l in self.net.layers[1:])

    def _drop(self, l: int, a: np.ndarray) -> np.ndarray:
        m = self.dropout[l]
        return a if m is None else a * m

    def _as_batch(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        want = (len(self.x),) + tuple(self.state_shape)
        if not self.batched and a.shape == tuple(self.state_shape):
            a = a[None]
        if a.shape != want:
            raise nx.ShapeError(f"rate shape {a.shape} does not match {want if self.batched else self.state_shape}")
        return a

    def _unbatch(self, a: np.ndarray) -> np.ndarray:
        return a if self.batched else a[0]

    def forward(self, a: np.ndarray) -> List[LayerCache]:
        """Evaluate every layer, keeping what the backward pass needs."""
        a = self._as_batch(a)
        net = self.net
        n = net.n_layers
        caches: List[LayerCache] = []
        inp = self._drop(n - 1, a)
        z = (nx.linear(self.W, inp) + self.drive) / self.v_th
        rate = clamp_sigma(z)
        caches.append(LayerCache(inp, z, rate))
        for l in range(1, n):
            layer = net.layers[l]
            inp = self._drop(l - 1, rate)
            p = nx.apply(layer.op, inp)
            pre_bn = p
            bn_cache = None
            if layer.bn is not None:
                if self.bn_mode == "frozen":
                    scale, shift = layer.bn.frozen_scale_shift()
                    p = p * scale + shift
                else:
                    p, bn_cache = bn_batch_forward(layer.bn, p)
            z = p / self.v_th
            rate = clamp_sigma(z)
            caches.append(LayerCache(inp, z, rate, bn_cache, pre_bn))
        return caches

    def eval_layers(self, a: np.ndarray) -> List[np.ndarray]:
        return [self._unbatch(c.rate) for c in self.forward(a)]

    def __call__(self, a: np.ndarray) -> np.ndarray:
        return self._unbatch(self.forward(a)[-1].rate)

    def layer_residuals(self, rates: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Per-layer equation residuals ``||f_l(a^{l-1}) - a^l||`` given all layer rates."""
        rates = [self._as_layer_batch(r, l) for l, r in enumerate(rates)]
        out = []
        n = self.net.n_layers
        z = (nx.linear(self.W, self._drop(n - 1, rates[-1])) + self.drive) / self.v_th
        out.append(_norms(clamp_sigma(z) - rates[0]))
        for l in range(1, n):
            layer = self.net.layers[l]
            p = nx.apply(layer.op, self._drop(l - 1, rates[l - 1]))
            if layer.bn is not None:
                if self.bn_mode == "frozen":
                    scale, shift = layer.bn.frozen_scale_shift()
                    p = p * scale + shift
                else:
                    p, _ = bn_batch_forward(layer.bn, p)
            out.append(_norms(clamp_sigma(p / self.v_th) - rates[l]))
        return [self._unbatch(r) for r in out]

    def _as_layer_batch(self, r, l):
        r = np.asarray(r, dtype=np.float64)
        shape = tuple(self.net.layers[l].op.output_shape)
        return r[None] if (not self.batched and r.shape == shape) else r

    def update_running_stats(self, a: np.ndarray, caches: Optional[List[LayerCache]] = None) -> None:
        """Fold this map's batch statistics at ``a`` into the BN running estimates.

        ``caches`` may carry ``self.forward(a)`` when it is already at hand.
        """
        if self.bn_mode != "batch":
            return
        if self.drive_cache is not None:
            bn_update_running(self.net.layers[0].bn, self.drive_cache)
        caches = self.forward(a) if caches is None else caches
        for layer, cache in zip(self.net.layers[1:], caches[1:]):
            if cache.bn is not None:
                bn_update_running(layer.bn, cache.bn)


def eval_map(fmap: FixedPointMap, a: np.ndarray) -> np.ndarray:
    return fmap(a)


def _norms(d: np.ndarray) -> np.ndarray:
    return np.sqrt((d.reshape(len(d), -1) ** 2).sum(axis=1))


def residual(fmap: Callable[[np.ndarray], np.ndarray], a: np.ndarray):
    """``||f(a) - a||_2``; per-sample array for batched maps."""
    d = np.asarray(fmap(a)) - np.asarray(a)
    if isinstance(fmap, FixedPointMap) and fmap.batched:
        return _norms(d)
    return float(np.linalg.norm(d))


# -- solvers -----------------------------------------------------------------

@dataclass
class SolverConfig:
    method: str = BROYDEN
    max_iters: int = 30
    tol: float = 1e-6
    damping: float = 0.5

    def __post_init__(self):
        if self.method not in (BROYDEN, FIXED_POINT):
            raise ValueError(f"solver method must be {BROYDEN!r} or {FIXED_POINT!r}, got {self.method!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class EquilibriumSolution:
    a_star: np.ndarray
    residual: float  # worst sample
    iterations: int
    converged: bool
    residual_trace: List[float] = field(default_factory=list)
    residuals: Optional[np.ndarray] = None  # per sample
    message: str = ""

    def write_csv(self, out: Union[str, TextIO]) -> None:
        """Residual per solver iteration as ``iter,residual`` rows."""
        close = isinstance(out, str)
        f = open(out, "w", newline="") if close else out
        try:
            w = csv.writer(f)
            w.writerow(["iter", "residual"])
            for i, r in enumerate(self.residual_trace):
                w.writerow([i, repr(float(r))])
        finally:
            if close:
                f.close()


def solve_fixed_point(fmap: Callable[[np.ndarray], np.ndarray], cfg: SolverConfig,
                      a0: Optional[np.ndarray] = None, batched: Optional[bool] = None,
                      coupled: Optional[bool] = None) -> EquilibriumSolution:
    """Find ``a = f(a)``.

    Batched maps (leading sample axis) are solved per sample; ``coupled``
    maps are solved as one joint vector. For a :class:`FixedPointMap` both
    flags are read from the map. ``a0`` defaults to zeros.
    """
    if isinstance(fmap, FixedPointMap):
        batched = fmap.batched if batched is None else batched
        coupled = fmap.coupled if coupled is None else coupled
        if a0 is None:
            shape = ((len(fmap.x),) if fmap.batched else ()) + tuple(fmap.state_shape)
            a0 = np.zeros(shape)
    if a0 is None:
        raise ValueError("a0 is required for plain callables")
    a0 = np.array(a0, dtype=np.float64)
    shape = a0.shape
    batched = bool(batched)
    if coupled or not batched:
        rows = 1
    else:
        rows = shape[0]

    def g(flat):
        return (np.asarray(fmap(flat.reshape(shape)), dtype=np.float64).reshape(shape)).reshape(rows, -1) - flat

    x = a0.reshape(rows, -1).copy()
    if cfg.method == BROYDEN:
        x, res, it, trace, msg = _broyden(g, x, cfg)
    else:
        x, res, it, trace, msg = _damped(g, x, cfg)
    converged = bool(np.all(res <= cfg.tol)) and not msg
    if msg:
        log.warning("fixed-point solve aborted: %s", msg)
    if coupled and batched:
        # report per-sample norms of the joint residual
        gx = g(x).reshape(shape)
        res_samples = _norms(gx)
    else:
        res_samples = res
    return EquilibriumSolution(x.reshape(shape), float(np.max(res)), it, converged, trace,
                               res_samples if batched else None, msg)


def _row_norms(g):
    return np.sqrt((g * g).sum(axis=1))


def _damped(g, x, cfg):
    trace: List[float] = []
    d = cfg.damping
    gx = g(x)
    res = _row_norms(gx)
    it = 0
    msg = ""
    while True:
        trace.append(float(res.max()))
        if np.all(res <= cfg.tol) or it >= cfg.max_iters:
            break
        active = (res > cfg.tol)[:, None]
        x_new = np.where(active, x + d * gx, x)
        it += 1
        gx_new = g(x_new)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(gx_new))):
            msg = f"non-finite iterate at iteration {it}"
            break
        x, gx = x_new, gx_new
        res = _row_norms(gx)
    return x, res, it, trace, msg


def _broyden(g, x, cfg):
    """Good Broyden on ``g(x) = f(x) - x`` with a low-rank inverse Jacobian.

    ``H = -I + sum_k U_k V_k^T`` per row; the best iterate seen is returned.
    """
    rows, n = x.shape
    m = cfg.max_iters
    U = np.zeros((rows, m, n))
    V = np.zeros((rows, m, n))
    k = 0

    def h_mul(vec):  # H @ vec, row-wise
        if k == 0:
            return -vec
        coef = np.einsum("rkn,rn->rk", V[:, :k], vec)
        return -vec + np.einsum("rkn,rk->rn", U[:, :k], coef)

    def ht_mul(vec):  # H^T @ vec
        if k == 0:
            return -vec
        coef = np.einsum("rkn,rn->rk", U[:, :k], vec)
        return -vec + np.einsum("rkn,rk->rn", V[:, :k], coef)

    gx = g(x)
    res = _row_norms(gx)
    best_x, best_res = x.copy(), res.copy()
    trace = [float(res.max())]
    msg = ""
    it = 0
    while it < cfg.max_iters and np.any(best_res > cfg.tol):
        active = (best_res > cfg.tol)[:, None]
        dx = np.where(active, -h_mul(gx), 0.0)
        x_new = x + dx
        it += 1
        gx_new = g(x_new)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(gx_new))):
            msg = f"non-finite iterate at iteration {it}"
            break
        dg = gx_new - gx
        x, gx = x_new, gx_new
        res = _row_norms(gx)
        improved = res < best_res
        best_x[improved] = x[improved]
        best_res[improved] = res[improved]
        trace.append(float(best_res.max()))
        if k < m:
            vt = ht_mul(dx)
            denom = (vt * dg).sum(axis=1, keepdims=True)
            ok = np.abs(denom) > 1e-300
            u = np.where(ok & active, (dx - h_mul(dg)) / np.where(ok, denom, 1.0), 0.0)
            U[:, k] = u
            V[:, k] = np.where(active, vt, 0.0)
            k += 1
    return best_x, best_res, it, trace, msg
