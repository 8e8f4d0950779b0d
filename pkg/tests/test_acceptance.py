"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
Criterion 7 trains real models through the CLI: the MNIST fast gate from
scratch every time, the Fashion-MNIST run resumed from
``runs/acceptance/fashion`` when an earlier (possibly partial) run left a
checkpoint there.
"""
import csv
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from eqspike import numerics as nx
from eqspike.cli import EXIT_OK, main
from eqspike.data import BatchIterator, synth_dataset
from eqspike.dynamics import InputEncoding, simulate
from eqspike.equilibrium import BROYDEN, FIXED_POINT, FixedPointMap, SolverConfig, solve_fixed_point
from eqspike.idegrad import (finite_diff_oracle, hebbian_gradients, implicit_gradients, map_vjp_state,
                             param_gradients, rel_error, sample_coordinates, solve_adjoint)
from eqspike.model import BatchNorm, NeuronKind, bn_absorb, bn_apply, build_network, readout_and_loss
from eqspike.train import Trainer, TrainConfig

sys.path.insert(0, str(Path(__file__).resolve().parent))
from conftest import REPO, dense_matrix, random_batch, random_net  # noqa: E402

TIGHT = SolverConfig(BROYDEN, 400, 1e-12)
RUNS = REPO / "runs" / "acceptance"
# the CLI only reads the env var, so make the ./data default visible to it too
DATA_DIR = Path(os.environ.setdefault("EQSPIKE_DATA_DIR", str(REPO / "data")))


def widths(n, seed):
    return np.random.default_rng(seed).integers(5, 21, n)


def test_c01_gradients_match_finite_differences(criterion):
    t0 = time.perf_counter()
    worst, checked, bad = 0.0, 0, []
    for i, w in enumerate(widths(20, 101)):
        net = random_net([int(w)], seed=i)
        x, y = random_batch(net, 3, i)
        grads, a, _ = implicit_gradients(net, x, y)
        for name, idx in sample_coordinates(net, 6, np.random.default_rng(i)):
            fd = finite_diff_oracle(net, x, y, name, idx, a0=a)
            err = float("inf") if fd.abstained else rel_error(float(grads[name][idx]), fd.value)
            worst = max(worst, err)
            checked += 1
            if not err <= 1e-4:
                bad.append((i, name, idx, err))
    dt = time.perf_counter() - t0
    criterion(1, not bad and dt < 60,
              f"{checked} coordinates on 20 nets, worst rel err {worst:.2e} (<= 1e-4), {dt:.1f}s (< 60s)"
              + (f"; failures {bad[:3]}" if bad else ""))


def test_c02_vjp_equals_hebbian(criterion):
    worst = 0.0
    for i, w in enumerate(widths(20, 202)):
        net = random_net([int(w)], seed=100 + i)
        x, y = random_batch(net, 4, 100 + i)
        fmap = FixedPointMap(net, x)
        a = solve_fixed_point(fmap, TIGHT).a_star
        bs = solve_adjoint(fmap, a, readout_and_loss(a, net.readout, y).grad_rates, TIGHT)
        generic = param_gradients(fmap, a, bs, reparam=False)
        for k, v in hebbian_gradients(fmap, a, bs.beta_star).items():
            worst = max(worst, float(np.max(np.abs(generic[k] - v))))
    criterion(2, worst <= 1e-12, f"max |generic - closed form| = {worst:.2e} over 20 instances (<= 1e-12)")


def test_c03_single_layer_simulation_converges(criterion):
    t0 = time.perf_counter()
    close, decreasing, worst_gap = 0, 0, []
    for i in range(50):
        w = int(widths(1, 300 + i)[0])
        net = random_net([w], seed=300 + i)
        x = np.random.default_rng(300 + i).standard_normal(6)
        a_star = solve_fixed_point(FixedPointMap(net, x), TIGHT).a_star
        state, trace = simulate(net, InputEncoding.constant(x), 1000)
        gap = float(np.max(np.abs(state.rates[0] - a_star)))
        worst_gap.append(gap)
        close += gap <= 5 / 1000 + 1e-5
        r = trace.values[1]
        decreasing += r[999] <= r[9]
    dt = time.perf_counter() - t0
    criterion(3, close >= 45 and decreasing == 50 and dt < 120,
              f"{close}/50 within 5/T+1e-5 of Broyden a* (need 45; median gap {np.median(worst_gap):.1e}), "
              f"residual(1000) <= residual(10) on {decreasing}/50, {dt:.1f}s")


def test_c04_multilayer_residual_decreases(criterion):
    t0 = time.perf_counter()
    ok, bounds, i = 0, [], 0
    while len(bounds) < 20:
        rng = np.random.default_rng(400 + i)
        net = random_net([int(v) for v in rng.integers(5, 16, 3)], seed=400 + i)
        i += 1
        bound = net.product_norm_bound() / net.v_th ** net.n_layers
        if bound >= 1.0:
            continue
        bounds.append(bound)
        _, trace = simulate(net, InputEncoding.constant(rng.standard_normal(6)), 1000)
        r = trace.values[net.n_layers]
        ok += r[999] <= r[9]
    dt = time.perf_counter() - t0
    criterion(4, ok == 20 and dt < 120,
              f"residual(1000) <= residual(10) on {ok}/20 three-layer nets (product bound max {max(bounds):.2f} < 1, "
              f"{i - 20} rejected), {dt:.1f}s")


def test_c05_lif_residual_bounded(criterion):
    t0 = time.perf_counter()
    ok, ratios = 0, []
    for i in range(20):
        w = int(widths(1, 500 + i)[0])
        net = random_net([w], seed=500 + i, neuron=NeuronKind.LIF(0.95))
        _, trace = simulate(net, InputEncoding.constant(np.random.default_rng(500 + i).standard_normal(6)), 1000)
        r = trace.values[1]
        ratios.append(r[999] / np.sqrt(w))
        ok += bool(np.isfinite(r[999]) and r[999] <= r[9] and r[999] <= 0.2 * np.sqrt(w))
    dt = time.perf_counter() - t0
    criterion(5, ok == 20 and dt < 120,
              f"{ok}/20 LIF(0.95) nets bounded and non-increasing; max residual/sqrt(n) {max(ratios):.3f} "
              f"(<= 0.2), {dt:.1f}s")


# -- trained models --------------------------------------------------------------

def _have(dataset):
    return (DATA_DIR / dataset / "train-images-idx3-ubyte").exists() or \
        (DATA_DIR / dataset / "train-images-idx3-ubyte.gz").exists()


@pytest.fixture(scope="session")
def mnist_fast():
    """Train the MNIST fast gate from scratch through the CLI."""
    if not _have("mnist"):
        return None
    out = RUNS / "mnist_fast"
    shutil.rmtree(out, ignore_errors=True)
    t0 = time.perf_counter()
    code = main(["train", "--config", str(REPO / "configs" / "mnist_fast.json"), "--out", str(out)])
    elapsed = time.perf_counter() - t0
    if code != EXIT_OK:
        return None
    summary = json.loads((out / "summary.json").read_text())
    return {"dir": out, "elapsed": elapsed, **summary}


@pytest.fixture(scope="session")
def fashion():
    """The 30-epoch Fashion-MNIST run, resumed from its last checkpoint if one exists."""
    if not _have("fashion-mnist"):
        return None
    out = RUNS / "fashion"
    ck = out / "checkpoint.ide"
    args = ["train", "--config", str(REPO / "configs" / "fashion_mnist.json"), "--out", str(out)]
    if ck.exists():
        args += ["--checkpoint", str(ck)]
    if main(args) != EXIT_OK:
        return None
    return {"dir": out, **json.loads((out / "summary.json").read_text())}


def _diag(ckpt, sample, steps, capsys):
    capsys.readouterr()
    assert main(["equilibrium-diag", "--checkpoint", str(ckpt), "--sample", str(sample),
                 "--steps", str(steps)]) == EXIT_OK
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    return np.array([float(r["residual"]) for r in rows if r["layer"] == "1"])


def test_c06_trained_residual_drops(criterion, mnist_fast, capsys):
    if mnist_fast is None:
        criterion(6, False, "no trained model (MNIST files missing or training failed)")
    ratios = [(lambda r: r[29] / r[2])(_diag(mnist_fast["dir"] / "checkpoint.ide", s, 30, capsys)) for s in range(5)]
    criterion(6, max(ratios) < 0.25,
              f"residual(t=30)/residual(t=3) = {', '.join(f'{v:.3f}' for v in ratios)} on 5 test samples "
              f"of the MNIST fast-gate model (< 0.25)")


def test_trained_residual_mostly_non_increasing(mnist_fast, capsys):
    if mnist_fast is None:
        pytest.skip("no trained model")
    r = _diag(mnist_fast["dir"] / "checkpoint.ide", 0, 100, capsys)
    frac = float(np.mean(np.diff(r[9:]) <= 0))
    assert frac >= 0.9, f"residual non-increasing on {frac:.0%} of steps after t=10 (need 90%)"


def test_c07_accuracy(criterion, mnist_fast, fashion):
    parts, ok = [], True
    if mnist_fast is None:
        ok = False
        parts.append("MNIST fast gate: did not run (MNIST files missing or training failed)")
    else:
        gate = mnist_fast["final_acc"] >= 0.95 and mnist_fast["elapsed"] <= 15 * 60
        ok &= gate
        parts.append(f"MNIST fast gate {100 * mnist_fast['final_acc']:.2f}% (>= 95%) in "
                     f"{mnist_fast['elapsed'] / 60:.1f} min (<= 15)")
    if fashion is None:
        ok = False
        parts.append(f"Fashion-MNIST 30 epochs: no data under {DATA_DIR / 'fashion-mnist'}")
    else:
        ok &= fashion["epochs"] == 30 and fashion["final_acc"] >= 0.88
        parts.append(f"Fashion-MNIST {fashion['epochs']} epochs {100 * fashion['final_acc']:.2f}% (>= 88%)")
    criterion(7, ok, "; ".join(parts))


def test_trained_model_is_sparse(fashion, capsys):
    if fashion is None:
        pytest.skip("no Fashion-MNIST model")
    capsys.readouterr()
    assert main(["rates", "--checkpoint", str(fashion["dir"] / "checkpoint.ide")]) == EXIT_OK
    rows = dict(csv.reader(capsys.readouterr().out.splitlines()))
    total = float(rows["total"])
    assert total < 0.15, f"total firing rate {total:.3f} on the Fashion-MNIST model (need < 0.15)"


# -- training-path properties ----------------------------------------------------

def test_c08_retention_independent_of_T(criterion):
    data = synth_dataset("blobs", 32, seed=8, dim=4, n_classes=3)
    reports = {}
    for T in (10, 100):
        net = build_network("12-8 (F12)", (4,), 3, bn=True, seed=8)
        trainer = Trainer(net, TrainConfig(batch_size=8, T=T, dropout=0.2, seed=8))
        seen = []
        trainer.retention_probe = seen.append
        trainer.train_epoch(BatchIterator(data, 8, seed=8))
        reports[T] = [(r.count, r.nbytes) for r in seen]
    same = reports[10] == reports[100]
    c, b = reports[10][0]
    criterion(8, same, f"{c} arrays / {b} bytes retained between forward end and optimizer step at T=10 "
                       f"and T=100 on every step ({'identical' if same else 'different'})")


def test_c09_feedback_norm_bounded_every_step(criterion):
    worst = []
    for arch, shape, dim in (("12 (F12)", (4,), 4), ("4C3s-4C3 (F4C3)", (6, 6, 1), 36)):
        data = synth_dataset("blobs", 64, seed=9, dim=dim, n_classes=3)
        data.images = data.images.reshape((-1,) + shape)
        net = build_network(arch, shape, 3, bn=True, seed=9)
        trainer = Trainer(net, TrainConfig(batch_size=8, T=8, lr=0.5, seed=9))
        batches = BatchIterator(data, 8, seed=9)
        steps = 0
        while steps < 100:
            for x, y in batches:
                trainer.train_step(x, y)
                sigma = float(np.linalg.norm(dense_matrix(net.feedback_op()), 2))
                worst.append(sigma - net.feedback.c)
                steps += 1
                if steps == 100:
                    break
    ok = max(worst) <= 1e-5
    criterion(9, ok, f"200 steps (dense and conv feedback), max sigma - c = {max(worst):.2e} (<= 1e-5)")


def test_c10_bn_absorption(criterion):
    rng = np.random.default_rng(10)
    worst = 0.0
    for trial in range(30):
        kind = trial % 3
        if kind == 0:
            op = nx.dense(rng.standard_normal((7, 5)), rng.standard_normal(7))
        elif kind == 1:
            op = nx.conv2d(rng.standard_normal((3, 3, 2, 7)), (6, 6, 2), stride=2, padding=1,
                           bias=rng.standard_normal(7))
        else:
            op = nx.conv2d_transposed(rng.standard_normal((4, 4, 7, 2)), (3, 3, 2), stride=2, padding=1,
                                      bias=rng.standard_normal(7))
        bn = BatchNorm(rng.uniform(0.2, 3, 7), rng.standard_normal(7), rng.standard_normal(7),
                       rng.uniform(0.05, 4, 7))
        x = rng.standard_normal((16,) + op.input_shape)
        worst = max(worst, float(np.max(np.abs(nx.apply(bn_absorb(op, bn), x) - bn_apply(bn, nx.apply(op, x))))))
    criterion(10, worst <= 1e-10, f"max |absorbed - BN(linear)| = {worst:.2e} over 30 dense/conv/transposed ops")


def test_c11_adjoint_matches_dense_solve(criterion):
    worst = {BROYDEN: 0.0, FIXED_POINT: 0.0}
    for i, w in enumerate((8, 20, 35, 50)):
        net = random_net([w], seed=1100 + i, alpha=0.9 * 2.0, bn=True)
        x, y = random_batch(net, 1, 1100 + i)
        fmap = FixedPointMap(net, x[0])
        a = solve_fixed_point(fmap, TIGHT).a_star
        J = np.stack([map_vjp_state(fmap, a, e) for e in np.eye(w)])
        g = readout_and_loss(a, net.readout, np.asarray(y[0])).grad_rates
        oracle = np.linalg.solve(np.eye(w) - J.T, g)
        for method in worst:
            bs = solve_adjoint(fmap, a, g, SolverConfig(method, 5000, 1e-13))
            worst[method] = max(worst[method], float(np.max(np.abs(bs.beta_star - oracle))))
    criterion(11, max(worst.values()) <= 1e-8,
              f"max |beta - dense solve|: Broyden {worst[BROYDEN]:.1e}, damped {worst[FIXED_POINT]:.1e} "
              f"on widths 8-50 (<= 1e-8)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
