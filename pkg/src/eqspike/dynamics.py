"""Discrete-time simulation of feedback spiking networks.

One step updates every layer synchronously::

    u <- lam * u + I;  s = H(u - V_th);  u <- u - V_th * s

Layer 1 receives ``W^1 s^N[t] + BN(F^1 x[t] + b^1)`` (feedback delayed by one
step); layer ``l+1`` receives ``BN(F^{l+1} s^l[t+1] + b^{l+1})``, i.e. the
spikes its predecessor emitted in the same step. BN always runs on running
statistics here.

Rates are kept as running sums, ``a = num / den`` with ``num <- lam*num + s``
and ``den <- lam*den + 1``; for IF (lam == 1) this is the plain average, for
LIF the weighted average. No per-step history is kept unless asked for.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO, Union

import numpy as np

from . import numerics as nx
from .equilibrium import FixedPointMap
from .model import NetworkSpec


class SimulationError(FloatingPointError):
    pass


@dataclass
class InputEncoding:
    """Input delivered to the network.

    ``constant``: ``payload`` (one sample or a batch) is the input current at
    every step. ``spikes``: ``payload`` has a leading time axis; step ``t``
    (1-based) consumes ``payload[t - 1]``.
    """

    mode: str
    payload: np.ndarray

    def __post_init__(self):
        if self.mode not in ("constant", "spikes"):
            raise ValueError(f"unknown input mode {self.mode!r}")
        self.payload = np.asarray(self.payload, dtype=np.float64)

    @classmethod
    def constant(cls, x) -> "InputEncoding":
        return cls("constant", x)

    @classmethod
    def spikes(cls, train) -> "InputEncoding":
        return cls("spikes", train)

    @property
    def horizon(self) -> Optional[int]:
        return None if self.mode == "constant" else len(self.payload)

    def at(self, t: int) -> np.ndarray:
        return self.payload if self.mode == "constant" else self.payload[t - 1]


@dataclass
class SimState:
    u: List[np.ndarray]
    s: List[np.ndarray]
    rate_num: List[np.ndarray]
    spike_count: List[np.ndarray]
    rate_den: float = 0.0
    x_num: Optional[np.ndarray] = None
    x_den: float = 0.0
    t: int = 0

    @classmethod
    def zeros(cls, net: NetworkSpec, batch: Optional[int] = None) -> "SimState":
        lead = () if batch is None else (batch,)
        shapes = [lead + tuple(layer.op.output_shape) for layer in net.layers]
        z = lambda: [np.zeros(s) for s in shapes]  # noqa: E731
        return cls(z(), z(), z(), z())

    @property
    def rates(self) -> List[np.ndarray]:
        """Per-layer (weighted) average firing rate ``a[t]``."""
        if self.t == 0:
            return [np.zeros_like(n) for n in self.rate_num]
        return [n / self.rate_den for n in self.rate_num]

    @property
    def x_avg(self) -> Optional[np.ndarray]:
        """(Weighted) average of the inputs consumed so far."""
        return None if self.x_num is None else self.x_num / self.x_den

    def copy(self) -> "SimState":
        c = lambda xs: [x.copy() for x in xs]  # noqa: E731
        return SimState(c(self.u), c(self.s), c(self.rate_num), c(self.spike_count), self.rate_den,
                        None if self.x_num is None else self.x_num.copy(), self.x_den, self.t)


def input_drive(net: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """``BN(F^1 x + b^1)`` with running statistics."""
    first = net.layers[0]
    p = nx.apply(first.op, x)
    if first.bn is not None:
        scale, shift = first.bn.frozen_scale_shift()
        p = p * scale + shift
    return p


def _layer_input(net: NetworkSpec, l: int, spikes: np.ndarray) -> np.ndarray:
    layer = net.layers[l]
    p = nx.apply(layer.op, spikes)
    if layer.bn is not None:
        scale, shift = layer.bn.frozen_scale_shift()
        p = p * scale + shift
    return p


def step(state: SimState, net: NetworkSpec, x_t: np.ndarray, drive: Optional[np.ndarray] = None,
         in_place: bool = False) -> SimState:
    """Advance every layer by one time step.

    ``drive`` may carry a precomputed ``BN(F^1 x_t + b^1)`` (constant inputs).
    """
    st = state if in_place else state.copy()
    lam = net.neuron.lam
    v_th = net.v_th
    if drive is None:
        drive = input_drive(net, x_t)
    fb = net.feedback_op()
    prev_last = st.s[-1]
    for l in range(net.n_layers):
        if l == 0:
            current = nx.linear(fb, prev_last) + drive
        else:
            current = _layer_input(net, l, st.s[l - 1])
        u = lam * st.u[l] + current
        if not np.all(np.isfinite(u)):
            raise SimulationError(f"non-finite membrane potential in layer {l + 1} at step {st.t + 1}")
        s = (u >= v_th).astype(np.float64)
        st.u[l] = u - v_th * s
        st.s[l] = s
        st.rate_num[l] = lam * st.rate_num[l] + s
        st.spike_count[l] = st.spike_count[l] + s
    st.rate_den = lam * st.rate_den + 1.0
    x_t = np.asarray(x_t, dtype=np.float64)
    st.x_num = x_t.copy() if st.x_num is None else lam * st.x_num + x_t
    st.x_den = lam * st.x_den + 1.0
    st.t += 1
    return st


@dataclass
class ResidualTrace:
    """Residuals per step. ``values[layer]`` has shape (T,) or (T, batch).

    Layer ``N`` (the last) holds the composite-map residual of the last
    layer's rate; lower layers, when recorded, hold their own equation
    residual ``||f_l(a^{l-1}[t]) - a^l[t]||``.
    """

    steps: np.ndarray
    values: Dict[int, np.ndarray]

    def rows(self, sample: Optional[int] = None):
        for i, t in enumerate(self.steps):
            for layer in sorted(self.values):
                v = self.values[layer][i]
                if np.ndim(v):
                    v = v[0 if sample is None else sample]
                yield int(t), layer, float(v)

    def write_csv(self, out: Union[str, TextIO], sample: Optional[int] = None) -> None:
        close = False
        if isinstance(out, str):
            out = open(out, "w", newline="")
            close = True
        try:
            w = csv.writer(out)
            w.writerow(["t", "layer", "residual"])
            for t, layer, r in self.rows(sample):
                w.writerow([t, layer, repr(r)])
        finally:
            if close:
                out.close()

    def to_csv(self, sample: Optional[int] = None) -> str:
        buf = io.StringIO()
        self.write_csv(buf, sample)
        return buf.getvalue()

    def last(self, layer: Optional[int] = None):
        layer = max(self.values) if layer is None else layer
        return self.values[layer][-1]


def simulate(net: NetworkSpec, inp: InputEncoding, T: int, trace: bool = True, per_layer: bool = False,
             record_spikes: bool = False):
    """Run ``T`` steps from rest (``u[0] = 0, s[0] = 0``).

    Returns ``(state, trace)``; ``trace`` is a :class:`ResidualTrace` (or
    None when ``trace=False``). With ``record_spikes`` a third element holds
    the per-layer spike history (time-major), for firing statistics only.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if inp.mode == "spikes" and inp.horizon < T:
        raise ValueError(f"spike-train input covers {inp.horizon} steps, need {T}")
    x0 = inp.at(1)
    in_shape = tuple(net.input_shape)
    if x0.shape == in_shape:
        batch = None
    elif x0.shape[1:] == in_shape:
        batch = x0.shape[0]
    else:
        raise nx.ShapeError(f"input {x0.shape} does not match network input {in_shape}")
    state = SimState.zeros(net, batch)
    const_drive = input_drive(net, x0) if inp.mode == "constant" else None
    const_map = FixedPointMap(net, x0) if (trace and inp.mode == "constant") else None
    n = net.n_layers
    layers = list(range(1, n + 1)) if per_layer else [n]
    values = {l: [] for l in layers}
    spikes: List[List[np.ndarray]] = [[] for _ in range(n)] if record_spikes else []
    for t in range(1, T + 1):
        step(state, net, inp.at(t), drive=const_drive, in_place=True)
        if record_spikes:
            for l in range(n):
                spikes[l].append(state.s[l].copy())
        if trace:
            fmap = const_map if const_map is not None else FixedPointMap(net, state.x_avg)
            rates = state.rates
            last = rates[-1]
            d = fmap(last) - last
            values[n].append(_sample_norms(d, batch))
            if per_layer and n > 1:
                per = fmap.layer_residuals(rates)
                for l in range(1, n):
                    values[l].append(per[l - 1])
    tr = None
    if trace:
        tr = ResidualTrace(np.arange(1, T + 1), {l: np.asarray(v) for l, v in values.items()})
    if record_spikes:
        return state, tr, [np.asarray(s) for s in spikes]
    return state, tr


def _sample_norms(d: np.ndarray, batch: Optional[int]):
    if batch is None:
        return float(np.linalg.norm(d))
    return np.sqrt((d.reshape(batch, -1) ** 2).sum(axis=1))


def firing_stats(spike_trace: Sequence[np.ndarray]) -> Dict[Union[int, str], float]:
    """Mean firing rate per layer (1-based keys) and over all neurons (``"total"``).

    Each entry is a binary spike record of any shape, e.g. (T, batch, ...);
    the mean runs over every axis.
    """
    if not spike_trace:
        raise ValueError("empty spike trace")
    out: Dict[Union[int, str], float] = {}
    spikes = 0.0
    slots = 0
    for l, rec in enumerate(spike_trace, 1):
        rec = np.asarray(rec, dtype=np.float64)
        if rec.size == 0:
            raise ValueError(f"layer {l} spike record is empty")
        out[l] = float(rec.mean())
        spikes += float(rec.sum())
        slots += rec.size
    out["total"] = spikes / slots
    return out


@dataclass
class RateAccumulator:
    """Streaming firing statistics from simulation spike counts (no history)."""

    spikes: List[float] = field(default_factory=list)
    slots: List[float] = field(default_factory=list)

    def add(self, state: SimState) -> None:
        self.add_counts(state.spike_count, state.t)

    def add_counts(self, spike_count: Sequence[np.ndarray], t: int) -> None:
        if not self.spikes:
            self.spikes = [0.0] * len(spike_count)
            self.slots = [0.0] * len(spike_count)
        for l, c in enumerate(spike_count):
            self.spikes[l] += float(np.sum(c))
            self.slots[l] += float(np.size(c)) * t

    def stats(self) -> Dict[Union[int, str], float]:
        out: Dict[Union[int, str], float] = {l + 1: s / n for l, (s, n) in enumerate(zip(self.spikes, self.slots))}
        out["total"] = sum(self.spikes) / sum(self.slots)
        return out
