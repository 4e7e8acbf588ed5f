"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line; the lines are echoed in the
pytest terminal summary and printed directly when this file runs as a
script (``python tests/test_acceptance.py``).
"""
import subprocess
import sys
import time

import numpy as np
import pytest

from stagg.classify import EvaluationReport, evaluate, primal_objective, svm_train
from stagg.cli import main
from stagg.dataio import SynthSpec, read_features, synthesize, write_features
from stagg.errors import FeatureFormatError, ModelFormatError
from stagg.experiment import run_experiment
from stagg.numkit import circular_convolve
from stagg.optim import TrainOptions
from stagg.pipeline import EMOTIONS, load_model, preset, save_model
from stagg.pooling import SketchParams, bilinear_pool, cbp_pool

from test_classify import REFERENCE_ACCURACIES, blobs, grid_oracle

RESULTS: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}"
    RESULTS[number] = line
    print(line)
    return passed


def splits(items):
    by = {"train": [], "val": [], "test": []}
    for entry, seq in items:
        by[entry.split].append(seq)
    return by["train"], by["val"], by["test"]


# 1 --------------------------------------------------------------------------

def correlated_pairs(rng, n_pairs, dim):
    x = rng.standard_normal((n_pairs, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    z = rng.standard_normal((n_pairs, dim))
    z -= np.sum(z * x, axis=1, keepdims=True) * x
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    c = rng.uniform(0.5, 1.0, n_pairs) * rng.choice([-1.0, 1.0], n_pairs)
    return x, c[:, None] * x + np.sqrt(1 - c[:, None] ** 2) * z


def test_sketch_fidelity():
    t0 = time.perf_counter()
    x, y = correlated_pairs(np.random.default_rng(2024), 50, 32)
    exact = np.sum(x * y, axis=1) ** 2
    assert exact.min() >= 0.25 - 1e-12
    est = np.zeros(50)
    for seed in range(200):
        p = SketchParams.generate(32, 512, seed=seed)
        est += np.sum(cbp_pool(x[:, None], p) * cbp_pool(y[:, None], p), axis=1)
    est /= 200
    close = np.mean(np.abs(est - exact) <= 0.10 * exact)
    seconds = time.perf_counter() - t0
    ok = close >= 0.90 and seconds < 30
    assert record(1, ok, f"{100 * close:.0f}% of pairs within 10% (need >= 90%), {seconds:.1f}s (need < 30s)")


# 2 --------------------------------------------------------------------------

def test_oracle_equivalence():
    # FFT convolution against direct summation
    rng = np.random.default_rng(7)
    conv_err = 0.0
    for n in (1, 2, 8, 64, 256, 1024):
        a, b = rng.standard_normal((2, n))
        direct = np.array([sum(a[j] * b[(k - j) % n] for j in range(n)) for k in range(n)])
        conv_err = max(conv_err, float(np.max(np.abs(circular_convolve(a, b) - direct))))
    # single-seed sketch against exact outer-product pooling, d = D^2
    worst = 1.0
    for dim in (2, 4, 8):
        p = SketchParams.generate(dim, dim * dim, seed=0)
        xs = rng.standard_normal((500, 1, dim))
        ys = rng.standard_normal((500, 1, dim))
        est = np.sum(cbp_pool(xs, p) * cbp_pool(ys, p), axis=1)
        exact = np.array([bilinear_pool(a) @ bilinear_pool(b) for a, b in zip(xs, ys)])
        worst = min(worst, float(np.corrcoef(est, exact)[0, 1]))
    ok = worst >= 0.99 and conv_err <= 1e-8
    assert record(2, ok, f"min Pearson over D in (2, 4, 8) = {worst:.3f} (need >= 0.99); "
                         f"FFT vs direct convolution max error {conv_err:.1e} (need <= 1e-8)")


# 3 --------------------------------------------------------------------------

def test_gradient_suite(tmp_path):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "stagg.cli", "gradcheck", "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=600)
    seconds = time.perf_counter() - t0
    rows = [r.split(",") for r in (tmp_path / "gradcheck.csv").read_text().splitlines()[1:]]
    fewest = min(int(r[1]) for r in rows)
    worst = max(float(r[2]) for r in rows)
    ok = proc.returncode == 0 and fewest >= 20 and worst < 1e-4 and seconds < 120
    assert record(3, ok, f"{len(rows)} components, >= {fewest} instances each, max relative error "
                         f"{worst:.1e} (need < 1e-4), exit {proc.returncode} in {seconds:.1f}s (need < 120s)")


# 4 --------------------------------------------------------------------------

ORDER_OPTIONS = TrainOptions(max_iters=3000, eval_every=250, patience=4, seed=0)


def test_order_sensitivity():
    t0 = time.perf_counter()
    items = synthesize(SynthSpec(task="order", seed=7, videos_per_class=50))
    train, val, test = splits(items)
    acc = {}
    for name in ("cbp", "rnn+cbp", "cbp+rnn+cbp"):
        cfg = preset(name, grid_dim=128, hidden_dim=32)
        acc[name] = run_experiment(train, val, test, cfg, ORDER_OPTIONS).report.overall
    seconds = time.perf_counter() - t0
    ordered = acc["cbp+rnn+cbp"] >= acc["rnn+cbp"] - 0.02 and acc["rnn+cbp"] >= acc["cbp"] - 0.02
    ok = len(items) >= 300 and acc["cbp"] <= 0.60 and acc["cbp+rnn+cbp"] >= 0.90 and ordered and seconds < 900
    shown = ", ".join(f"{k.upper()} {100 * v:.1f}%" for k, v in acc.items())
    assert record(4, ok, f"{len(items)} videos: {shown}; ordering {'holds' if ordered else 'inverted'}, "
                         f"{seconds:.0f}s (need < 900s)")


# 5 --------------------------------------------------------------------------

def test_bilinear_signal():
    t0 = time.perf_counter()
    items = synthesize(SynthSpec(task="cooccurrence", seed=11, videos_per_class=50))
    train, val, test = splits(items)
    cbp = run_experiment(train, val, test, preset("cbp")).report.overall
    mean = run_experiment(train, val, test, preset("cbp", video_pooler="mean")).report.overall
    seconds = time.perf_counter() - t0
    gap = 100 * (cbp - mean)
    ok = gap >= 25 and seconds < 300
    assert record(5, ok, f"CBP+SVM {100 * cbp:.1f}% vs mean+SVM {100 * mean:.1f}%, gap {gap:.1f} points "
                         f"(need >= 25), {seconds:.1f}s (need < 300s)")


# 6 --------------------------------------------------------------------------

def test_metric_pinning():
    preds, truth = {}, {}
    for e in EMOTIONS:
        right = int(round(10 * REFERENCE_ACCURACIES[e]))
        for k in range(10):
            label = "real" if k % 2 else "fake"
            truth[f"{e}{k}"] = (e, label)
            preds[f"{e}{k}"] = label if k < right else ("fake" if label == "real" else "real")
    overall = 100 * evaluate(preds, truth).overall
    direct = 100 * EvaluationReport.from_accuracies(REFERENCE_ACCURACIES).overall
    ok = abs(overall - 68.33) <= 0.01 and abs(direct - 68.33) <= 0.01
    assert record(6, ok, f"overall {overall:.4f}% from predictions, {direct:.4f}% from accuracies "
                         f"(need 68.33 +/- 0.01)")


# 7 --------------------------------------------------------------------------

def test_svm_correctness():
    worst_gap, monotone, separable = 0.0, True, True
    for seed in range(25):
        X, y = blobs(seed, n=20, dim=2, gap=4.0, spread=0.5)
        m = svm_train(X, y, C=1.0)
        separable &= bool(np.all(y * (X @ m.weights + m.bias) > 0))
        worst_gap = max(worst_gap, abs(primal_objective(m.weights, m.bias, X, y, 1.0) - grid_oracle(X, y, 1.0)))
        h = m.history
        monotone &= all(b <= a + 1e-12 * max(1.0, abs(a)) for a, b in zip(h, h[1:]))
    ok = worst_gap < 1e-3 and monotone and separable
    assert record(7, ok, f"25 seeds: max |objective - grid oracle| {worst_gap:.1e} (need < 1e-3), "
                         f"dual objective monotone: {monotone}")


# 8 --------------------------------------------------------------------------

def tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism_and_formats(tmp_path, capsys, monkeypatch):
    small = ["--set", "grid_dim=32", "--set", "hidden_dim=8", "--max-iters", "100", "--eval-every", "50"]
    for run in ("a", "b"):
        # relative paths keep even the config snapshots comparable
        (tmp_path / run).mkdir()
        monkeypatch.chdir(tmp_path / run)
        assert main(["synth", "--seed", "5", "--videos-per-class", "10", "--out", "data"]) == 0
        assert main(["train", "--manifest", "data/manifest.tsv", "--seed", "3", "--out", "models", *small]) == 0
        assert main(["evaluate", "--manifest", "data/manifest.tsv", "--models", "models", "--out", "eval"]) == 0
    capsys.readouterr()
    same = {part: tree(tmp_path / "a" / part) == tree(tmp_path / "b" / part) for part in ("data", "models", "eval")}

    feats = tmp_path / "a" / "data" / "features"
    frames, fps = read_features(next(feats.iterdir()))
    write_features(frames, tmp_path / "copy.rfex", fps)
    again, _ = read_features(tmp_path / "copy.rfex")
    agg_path = tmp_path / "a" / "models" / "aggregator_anger.stag"
    save_model(load_model(agg_path), tmp_path / "copy.stag")
    round_trip = again.tobytes() == frames.tobytes() and (tmp_path / "copy.stag").read_bytes() == agg_path.read_bytes()

    named = True
    (tmp_path / "bad.rfex").write_bytes((tmp_path / "copy.rfex").read_bytes()[:-5])
    (tmp_path / "bad.stag").write_bytes(b"JUNK" + agg_path.read_bytes()[4:])
    for path, loader, err in ((tmp_path / "bad.rfex", read_features, FeatureFormatError),
                              (tmp_path / "bad.stag", load_model, ModelFormatError)):
        with pytest.raises(err):
            loader(path)
            named = False
    ok = all(same.values()) and round_trip and named
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items())
    assert record(8, ok, f"two seeded runs: {detail}; round trips bit-exact: {round_trip}; "
                         f"corrupt files raise named errors: {named}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
