"""Gradients through the rate equilibrium by implicit differentiation.

With ``f`` the fixed-point map and ``a*`` its equilibrium, the adjoint state
solves ``beta = J_f(a*)^T beta + dL/da*`` and every parameter gradient is the
vector-Jacobian product ``(df/dtheta)^T beta``. Nothing from the forward
time steps is needed beyond ``a[T]``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from . import numerics as nx
from .equilibrium import (BROYDEN, EquilibriumSolution, FixedPointMap, LayerCache, SolverConfig,
                          interior, solve_fixed_point)
from .model import NetworkSpec, bn_batch_backward, readout_and_loss

log = logging.getLogger(__name__)

GradientSet = Dict[str, np.ndarray]


class Linearization:
    """``f`` linearized at ``a_star``: caches one forward pass for repeated VJPs."""

    def __init__(self, fmap: FixedPointMap, a_star: np.ndarray):
        self.fmap = fmap
        self.a_star = np.asarray(a_star, dtype=np.float64)
        self.caches: List[LayerCache] = fmap.forward(a_star)
        self.masks = [interior(c.z) for c in self.caches]

    @property
    def mask(self) -> np.ndarray:
        """Linear-region mask of the first layer (the one fed by the feedback)."""
        return self.fmap._unbatch(self.masks[0])

    def _backward(self, v: np.ndarray, want_params: bool):
        fmap = self.fmap
        net = fmap.net
        v_th = fmap.v_th
        delta = fmap._as_batch(v)
        grads: GradientSet = {}
        n = net.n_layers
        for l in range(n - 1, 0, -1):
            layer = net.layers[l]
            c = self.caches[l]
            dp = delta * self.masks[l] / v_th
            if layer.bn is not None:
                if fmap.bn_mode == "batch":
                    dp, dgamma, dbeta = bn_batch_backward(layer.bn, c.bn, dp)
                else:
                    dp, dgamma, dbeta = _frozen_bn_backward(layer.bn, c.pre_bn, dp)
                if want_params:
                    grads[f"layers.{l}.bn.gamma"] = dgamma
                    grads[f"layers.{l}.bn.beta"] = dbeta
            if want_params:
                grads[f"layers.{l}.weight"] = nx.weight_grad(layer.op, c.inp, dp)
                grads[f"layers.{l}.bias"] = nx.bias_grad(layer.op, dp)
            delta = nx.adjoint(layer.op, dp)
            m = fmap.dropout[l - 1]
            if m is not None:
                delta = delta * m
        c = self.caches[0]
        dz = delta * self.masks[0] / v_th
        d_state = nx.adjoint(fmap.W, dz)
        m = fmap.dropout[n - 1]
        if m is not None:
            d_state = d_state * m
        if want_params:
            grads["feedback.weight"] = nx.weight_grad(fmap.W, c.inp, dz)
            first = net.layers[0]
            dp = dz
            if first.bn is not None:
                if fmap.bn_mode == "batch":
                    dp, dgamma, dbeta = bn_batch_backward(first.bn, fmap.drive_cache, dz)
                else:
                    dp, dgamma, dbeta = _frozen_bn_backward(first.bn, fmap.drive_pre_bn, dz)
                grads["layers.0.bn.gamma"] = dgamma
                grads["layers.0.bn.beta"] = dbeta
            grads["layers.0.weight"] = nx.weight_grad(first.op, fmap.x, dp)
            grads["layers.0.bias"] = nx.bias_grad(first.op, dp)
        return d_state, grads

    def vjp_state(self, v: np.ndarray) -> np.ndarray:
        d, _ = self._backward(v, want_params=False)
        return self.fmap._unbatch(d)

    def vjp_params(self, v: np.ndarray) -> GradientSet:
        """``(df/dtheta)^T v`` summed over the batch; feedback w.r.t. its effective weight."""
        return self._backward(v, want_params=True)[1]


def _frozen_bn_backward(bn, pre, dout):
    """VJP of running-statistics BN: (d_input, d_gamma, d_beta)."""
    inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
    xhat = ((pre - bn.running_mean) * inv_std).reshape(-1, bn.channels)
    d = dout.reshape(-1, bn.channels)
    return dout * (bn.gamma * inv_std), (d * xhat).sum(axis=0), d.sum(axis=0)


def map_vjp_state(fmap: FixedPointMap, a_star: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``J_f(a_star)^T v``."""
    return Linearization(fmap, a_star).vjp_state(v)


@dataclass
class BackwardState:
    beta_star: np.ndarray
    mask: np.ndarray
    seed: np.ndarray
    iterations: int
    residual: float
    converged: bool
    linearization: Optional[Linearization] = None
    residual_trace: Optional[List[float]] = None


def solve_adjoint(fmap: FixedPointMap, a_star: np.ndarray, dL_da: np.ndarray, cfg: SolverConfig,
                  lin: Optional[Linearization] = None) -> BackwardState:
    """Solve ``(I - J_f^T) beta = dL/da*`` with the configured solver."""
    dL_da = np.asarray(dL_da, dtype=np.float64)
    if dL_da.shape != np.shape(a_star):
        raise nx.ShapeError(f"loss gradient {dL_da.shape} does not match state {np.shape(a_star)}")
    lin = lin or Linearization(fmap, a_star)

    def h(beta):
        return lin.vjp_state(beta) + dL_da

    sol: EquilibriumSolution = solve_fixed_point(h, cfg, a0=dL_da, batched=fmap.batched, coupled=fmap.coupled)
    if not sol.converged:
        log.debug("adjoint solve stopped at residual %.3e after %d iterations", sol.residual, sol.iterations)
    return BackwardState(sol.a_star, lin.mask, dL_da, sol.iterations, sol.residual, sol.converged, lin,
                         sol.residual_trace)


def param_gradients(fmap: FixedPointMap, a_star: np.ndarray, bs: BackwardState,
                    reparam: bool = True) -> GradientSet:
    """Parameter gradients from the adjoint state.

    With ``reparam`` the feedback gradient is mapped onto ``feedback.raw`` and
    ``feedback.alpha``; otherwise it is reported as ``feedback.weight`` (with
    respect to the effective weight).
    """
    if np.shape(bs.beta_star) != np.shape(a_star):
        raise nx.ShapeError("backward state does not belong to this equilibrium (shape mismatch)")
    lin = bs.linearization
    if lin is None or lin.fmap is not fmap or not np.array_equal(lin.a_star, a_star):
        lin = Linearization(fmap, a_star)
    grads = lin.vjp_params(bs.beta_star)
    if reparam:
        g_eff = grads.pop("feedback.weight")
        grads["feedback.raw"], grads["feedback.alpha"] = fmap.net.feedback.chain_gradient(g_eff)
    return grads


def hebbian_gradients(fmap: FixedPointMap, a_star: np.ndarray, beta_star: np.ndarray) -> GradientSet:
    """Closed forms for a single dense layer without BN:
    ``grad W = M beta a*^T / V_th``, ``grad F = M beta x*^T / V_th``, ``grad b = M beta / V_th``."""
    net = fmap.net
    if net.n_layers != 1 or net.layers[0].bn is not None or net.layers[0].op.kind != nx.DENSE:
        raise ValueError("closed-form gradients cover single dense layers without batch norm")
    a = fmap._as_batch(a_star).reshape(len(fmap.x), -1)
    beta = fmap._as_batch(beta_star).reshape(len(fmap.x), -1)
    x = fmap.x.reshape(len(fmap.x), -1)
    W = fmap.W.weight
    F = net.layers[0].op
    z = (a @ W.T + x @ F.weight.T + F.bias) / net.v_th
    m = ((z > 0) & (z < 1)).astype(np.float64)
    mb = m * beta / net.v_th
    return {"feedback.weight": mb.T @ a, "layers.0.weight": mb.T @ x, "layers.0.bias": mb.sum(axis=0)}


# -- finite-difference oracle ----------------------------------------------

@dataclass
class FDResult:
    value: float
    abstained: bool = False
    message: str = ""


def equilibrium_loss(net: NetworkSpec, x: np.ndarray, labels: np.ndarray, cfg: SolverConfig,
                     a0: Optional[np.ndarray] = None, bn_mode: str = "frozen") -> Tuple[float, EquilibriumSolution]:
    fmap = FixedPointMap(net, x, bn_mode=bn_mode)
    sol = solve_fixed_point(fmap, cfg, a0=a0)
    return readout_and_loss(sol.a_star, net.readout, labels).loss, sol


FD_SOLVER = SolverConfig(BROYDEN, max_iters=400, tol=1e-13)


def finite_diff_oracle(net: NetworkSpec, x: np.ndarray, labels: np.ndarray, name: str, index: Tuple[int, ...],
                       h: float = 1e-5, cfg: SolverConfig = FD_SOLVER, a0: Optional[np.ndarray] = None,
                       bn_mode: str = "frozen") -> FDResult:
    """Central difference of the equilibrium loss along one parameter coordinate.

    A feedback scale resting on its clip bound gets a second-order one-sided
    difference from inside the bound instead. Each evaluation re-solves the
    equilibrium (warm-started at ``a0``); the parameter is restored afterwards.
    Abstains if any solve fails.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = net.params()
    if name not in params:
        raise KeyError(f"unknown parameter {name!r}")
    p = params[name]
    index = tuple(index)
    orig = float(p[index])
    # alpha on the clip bound sits on a kink: difference one-sidedly, into the feasible side
    on_bound = name == "feedback.alpha" and abs(orig) >= net.feedback.c
    if on_bound:
        inward = -np.sign(orig) * h
        steps, weights, scale = (0.0, 1.0, 2.0), (-3.0, 4.0, -1.0), 2 * inward
    else:
        steps, weights, scale = (1.0, -1.0), (1.0, -1.0), 2 * h
    total = 0.0
    try:
        for k, wgt in zip(steps, weights):
            p[index] = orig + k * (inward if on_bound else h)
            net.refresh()
            loss, sol = equilibrium_loss(net, x, labels, cfg, a0=a0, bn_mode=bn_mode)
            if not sol.converged:
                return FDResult(float("nan"), True, f"perturbed solve did not converge (residual {sol.residual:.2e})")
            total += wgt * loss
    finally:
        p[index] = orig
        net.refresh()
    return FDResult(total / scale)


def implicit_gradients(net: NetworkSpec, x: np.ndarray, labels: np.ndarray,
                       fwd: SolverConfig = FD_SOLVER, bwd: SolverConfig = FD_SOLVER,
                       a_star: Optional[np.ndarray] = None, bn_mode: str = "frozen"):
    """Full gradient of the equilibrium loss: solve, seed from the readout, adjoint, assemble."""
    fmap = FixedPointMap(net, x, bn_mode=bn_mode)
    if a_star is None:
        a_star = solve_fixed_point(fmap, fwd).a_star
    ro = readout_and_loss(a_star, net.readout, labels)
    bs = solve_adjoint(fmap, a_star, ro.grad_rates, bwd)
    grads = param_gradients(fmap, a_star, bs)
    grads["readout.weight"] = ro.grad_readout
    return grads, a_star, bs


@dataclass
class GradcheckRow:
    param: str
    coordinate: Tuple[int, ...]
    implicit: float
    fd: float
    rel_err: float
    abstained: bool = False


def rel_error(implicit: float, fd: float) -> float:
    return abs(fd - implicit) / (abs(fd) + 1e-8)


def sample_coordinates(net: NetworkSpec, n: int, rng: np.random.Generator,
                       names: Optional[Sequence[str]] = None) -> List[Tuple[str, Tuple[int, ...]]]:
    params = net.params()
    names = list(names or params)
    sizes = np.array([params[k].size for k in names], dtype=float)
    out = []
    for _ in range(n):
        k = names[rng.choice(len(names), p=np.sqrt(sizes) / np.sqrt(sizes).sum())]
        flat = int(rng.integers(params[k].size))
        out.append((k, tuple(int(i) for i in np.unravel_index(flat, params[k].shape))))
    return out


def gradcheck(net: NetworkSpec, x: np.ndarray, labels: np.ndarray, coords, h: float = 1e-5,
              bn_mode: str = "frozen") -> List[GradcheckRow]:
    grads, a_star, _ = implicit_gradients(net, x, labels, bn_mode=bn_mode)
    rows = []
    for name, idx in coords:
        g = float(grads[name][idx])
        fd = finite_diff_oracle(net, x, labels, name, idx, h=h, a0=a_star, bn_mode=bn_mode)
        if fd.abstained:
            rows.append(GradcheckRow(name, idx, g, float("nan"), float("nan"), True))
        else:
            rows.append(GradcheckRow(name, idx, g, fd.value, rel_error(g, fd.value)))
    return rows


def write_gradcheck_csv(rows: Sequence[GradcheckRow], out: Union[str, TextIO]) -> None:
    close = isinstance(out, str)
    f = open(out, "w", newline="") if close else out
    try:
        w = csv.writer(f)
        w.writerow(["param", "coordinate", "implicit", "fd", "rel_err"])
        for r in rows:
            w.writerow([r.param, ":".join(map(str, r.coordinate)), repr(r.implicit), repr(r.fd), repr(r.rel_err)])
    finally:
        if close:
            f.close()
