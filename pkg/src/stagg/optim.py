"""Adam, the staircase learning-rate schedule, finite-difference checking and
the per-emotion training loop for the learnable parts of an aggregator."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._fs import atomic_write_text
from .errors import DegenerateLabels, EmptyInput, InvalidLength, NumericalError, VideoTooShort
from .pipeline import (
    Aggregator,
    LocalFeatureSequence,
    PipelineConfig,
    build_aggregator,
    grid_table,
    interval_inputs,
    interval_representations,
    sample_intervals,
    subject_normalize,
)
from .pooling import (
    NetVladParams,
    cbp_pool,
    cbp_pool_backward,
    init_netvlad,
    l2_normalize,
    l2_normalize_backward,
    netvlad_backward,
    netvlad_forward,
    pca_fit,
)
from .temporal import RnnParams, rnn_backward, rnn_forward

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Adam and schedule
# --------------------------------------------------------------------------

def lr_schedule(t: int, base: float = 0.001, factor: float = 0.1, every: int = 40000) -> float:
    """Staircase decay: ``base * factor ** floor(t / every)``."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    return base * factor ** (t // every)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.7
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None):
    """One bias-corrected Adam update.

    ``lr`` overrides ``state.lr`` (the schedule passes it in). Returns the
    new parameter dict and the same, advanced, state object.
    """
    if set(grads) != set(params):
        raise InvalidLength(f"gradient keys {sorted(grads)} != parameter keys {sorted(params)}")
    lr = state.lr if lr is None else lr
    state.t += 1
    t = state.t
    out = {}
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        if g.shape != theta.shape:
            raise InvalidLength(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t) if state.beta1 else m
        v_hat = v / (1.0 - state.beta2 ** t) if state.beta2 else v
        out[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numeric_gradient(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def grad_check(fn: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
               point, step: float = 1e-5) -> float:
    """Max relative error between ``grad(point)`` and central differences of ``fn``."""
    analytic = np.asarray(grad(np.array(point, dtype=np.float64)), dtype=np.float64)
    if not np.all(np.isfinite(analytic)):
        raise NumericalError("analytic gradient is not finite")
    numeric = numeric_gradient(fn, point, step)
    if analytic.shape != numeric.shape:
        raise InvalidLength(f"gradient shape {analytic.shape} != point shape {numeric.shape}")
    return float(relative_error(analytic, numeric).max()) if numeric.size else 0.0


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainOptions:
    max_iters: int = 50000
    batch_size: int = 64
    lr: float = 0.001
    beta1: float = 0.7
    beta2: float = 0.999
    eps: float = 1e-8
    decay_every: int = 40000
    decay_factor: float = 0.1
    eval_every: int = 500
    patience: int = 10
    min_delta: float = 1e-4
    netvlad_iters: int = 2000
    netvlad_features: int = 128
    pca_samples: int = 20000
    val_intervals: int = 1024
    seed: int = 0


@dataclass
class TrainRecord:
    iteration: int
    train_loss: float
    val_loss: float
    lr: float


def records_to_csv(records: Sequence[TrainRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "train_loss", "val_loss", "lr"])
    for r in records:
        w.writerow([r.iteration, repr(float(r.train_loss)), repr(float(r.val_loss)), repr(float(r.lr))])
    return buf.getvalue()


def write_records(records: Sequence[TrainRecord], path) -> None:
    atomic_write_text(path, records_to_csv(records))


def bce_with_logits(z, y):
    """Mean binary cross-entropy and its gradient with respect to the logits."""
    z = np.asarray(z, dtype=np.float64)
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(loss), (p - y) / z.size


def label_targets(seqs: Sequence[LocalFeatureSequence]) -> np.ndarray:
    return np.array([1.0 if s.label == "real" else 0.0 for s in seqs])


def interval_loss(inputs, targets, rnn: RnnParams, head_w, head_b):
    """BCE of a linear head on the final RNN output; returns loss and all grads."""
    out, tape = rnn_forward(inputs, rnn)
    z = out @ head_w + head_b
    loss, gz = bce_with_logits(z, targets)
    grads, g_inputs = rnn_backward(tape, np.outer(gz, head_w) if out.ndim == 2 else gz * head_w, rnn)
    grads["head_w"] = out.T @ gz if out.ndim == 2 else gz * out
    grads["head_b"] = np.atleast_1d(np.sum(gz))
    return loss, grads, g_inputs


def encoder_loss(intervals, targets, agg: Aggregator, head_w, head_b):
    """Interval loss from raw local features, for end-to-end gradient checks.

    ``intervals`` is ``(B, K*T, M, D)``. The chain is grid assembly, CBP (or
    the position mean when grids are not pooled), per-grid L2, the recurrent
    encoder and the logistic head. Returns ``(loss, grads, grad_intervals)``
    where ``grads`` covers the RNN and the head.
    """
    cfg = agg.config
    x = np.asarray(intervals, dtype=np.float64)
    b, _, m, d = x.shape
    if agg.pca is not None:
        x = (x - agg.pca.mean) @ agg.pca.basis
    grids = x.reshape(b, cfg.interval_grids, cfg.grid_frames * m, x.shape[-1])
    if cfg.grid_pooler == "cbp":
        pooled = cbp_pool(grids, agg.grid_sketch)
        ys = l2_normalize(pooled)
    else:
        ys = grids.mean(axis=-2)
    loss, grads, g_ys = interval_loss(ys, targets, agg.rnn, head_w, head_b)
    if cfg.grid_pooler == "cbp":
        g_grids = cbp_pool_backward(grids, agg.grid_sketch, l2_normalize_backward(pooled, g_ys))
    else:
        g_grids = np.repeat(g_ys[..., None, :] / grids.shape[-2], grids.shape[-2], axis=-2)
    g_x = g_grids.reshape(b, -1, m, g_grids.shape[-1])
    if agg.pca is not None:
        g_x = g_x @ agg.pca.basis.T
    return loss, grads, g_x.reshape(b, -1, m, d)


class _EarlyStop:
    def __init__(self, patience: int, min_delta: float):
        self.patience, self.min_delta = patience, min_delta
        self.best = np.inf
        self.best_state = None
        self.bad = 0

    def update(self, val_loss: float, state) -> bool:
        """Record a check; returns True when training should stop."""
        if val_loss < self.best - self.min_delta:
            self.best, self.best_state, self.bad = val_loss, state, 0
            return False
        if self.best_state is None:
            self.best_state = state
        self.bad += 1
        return self.bad >= self.patience


def _check_labels(seqs, name="training"):
    labels = {s.label for s in seqs}
    if len(seqs) == 0:
        raise EmptyInput(f"{name} set is empty")
    if labels != {"real", "fake"}:
        emotions = sorted({s.emotion for s in seqs})
        raise DegenerateLabels(f"{name} data for {', '.join(emotions)} has only labels {sorted(labels)}")


def _train_rnn(agg: Aggregator, train, val, opts: TrainOptions, rng, records, it0=0) -> int:
    cfg = agg.config
    tables = [grid_table(s.frames, agg) for s in train]
    feasible = [s.n_frames - cfg.interval_frames + 1 for s in train]
    y_train = label_targets(train)

    if val:
        vt = [grid_table(s.frames, agg) for s in val]
        pairs = [(i, st) for i, s in enumerate(val) for st in sample_intervals(s.n_frames, cfg)]
        if len(pairs) > opts.val_intervals:
            keep = np.random.default_rng(opts.seed + 1).choice(len(pairs), opts.val_intervals, replace=False)
            pairs = [pairs[k] for k in np.sort(keep)]
        val_x = np.stack([interval_inputs(vt[i], [st], agg)[0] for i, st in pairs])
        val_y = label_targets(val)[[i for i, _ in pairs]]

    params = {**agg.rnn.as_dict(), "head_w": np.zeros(cfg.hidden_dim), "head_b": np.zeros(1)}
    state = AdamState(opts.lr, opts.beta1, opts.beta2, opts.eps)
    stopper = _EarlyStop(opts.patience, opts.min_delta)
    running = []
    it = 0
    for it in range(1, opts.max_iters + 1):
        vid = rng.integers(0, len(train), size=opts.batch_size)
        starts = np.array([rng.integers(0, feasible[v]) for v in vid])
        x = np.stack([interval_inputs(tables[v], [st], agg)[0] for v, st in zip(vid, starts)])
        rnn = RnnParams(params["w_in"], params["w_rec"], params["b"], cfg.cell)
        loss, grads, _ = interval_loss(x, y_train[vid], rnn, params["head_w"], params["head_b"][0])
        if not np.isfinite(loss):
            raise NumericalError(f"training loss diverged at iteration {it}")
        running.append(loss)
        lr = lr_schedule(it0 + it - 1, opts.lr, opts.decay_factor, opts.decay_every)
        params, state = adam_step(params, grads, state, lr)
        if it % opts.eval_every == 0 or it == opts.max_iters:
            if val:
                rnn = RnnParams(params["w_in"], params["w_rec"], params["b"], cfg.cell)
                out = rnn_forward(val_x, rnn)[0]
                val_loss = bce_with_logits(out @ params["head_w"] + params["head_b"][0], val_y)[0]
            else:
                val_loss = float(np.mean(running))
            records.append(TrainRecord(it0 + it, float(np.mean(running)), val_loss, lr))
            log.debug("iter %d train %.4f val %.4f", it0 + it, records[-1].train_loss, val_loss)
            running = []
            if stopper.update(val_loss, params):
                break
    best = stopper.best_state if stopper.best_state is not None else params
    agg.rnn = RnnParams(best["w_in"].copy(), best["w_rec"].copy(), best["b"].copy(), cfg.cell)
    return it0 + it


def _pad_sets(sets, cap: int | None = None, rng=None):
    """Stack variable-size sets into ``(B, N, D)`` plus a row mask.

    With ``cap`` each set larger than ``cap`` is replaced by a random subset.
    """
    if cap is not None:
        sets = [s[rng.choice(len(s), size=cap, replace=False)] if len(s) > cap else s for s in sets]
    n = max(len(s) for s in sets)
    x = np.zeros((len(sets), n, sets[0].shape[1]))
    mask = np.zeros((len(sets), n))
    for i, s in enumerate(sets):
        x[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return x, mask


def video_netvlad_loss(sets, targets, agg: Aggregator, params: dict, cap: int | None = None, rng=None):
    """Mean BCE of a linear head on projected NetVLAD outputs over several videos."""
    nv = NetVladParams(params["centers"], params["weights"], params["biases"])
    x, mask = _pad_sets(sets, cap, rng)
    out, cache = netvlad_forward(x, nv, mask)
    feat = out @ agg.projection.T if agg.projection is not None else out
    z = feat @ params["head_w"] + params["head_b"][0]
    loss, gz = bce_with_logits(z, np.asarray(targets, dtype=np.float64))
    g_feat = gz[:, None] * params["head_w"]
    g_out = g_feat @ agg.projection if agg.projection is not None else g_feat
    _, grads = netvlad_backward(cache, nv, g_out)
    grads["head_w"] = gz @ feat
    grads["head_b"] = np.array([gz.sum()])
    return loss, grads


def _train_netvlad(agg: Aggregator, train, val, opts: TrainOptions, rng, records, it0=0) -> int:
    cfg = agg.config
    train_sets = [interval_representations(s, agg, normalized=True) for s in train]
    val_sets = [interval_representations(s, agg, normalized=True) for s in val]
    nv = init_netvlad(np.concatenate(train_sets), cfg.netvlad_clusters, seed=cfg.init_seed,
                      alpha=cfg.netvlad_alpha)
    agg.netvlad = nv
    if opts.netvlad_iters <= 0:
        return it0
    y_train, y_val = label_targets(train), label_targets(val)
    params = {**nv.as_dict(), "head_w": np.zeros(cfg.video_dim), "head_b": np.zeros(1)}
    state = AdamState(opts.lr, opts.beta1, opts.beta2, opts.eps)
    stopper = _EarlyStop(opts.patience, opts.min_delta)
    batch = min(opts.batch_size, len(train))
    eval_every = max(1, min(opts.eval_every, opts.netvlad_iters // 4 or 1))
    running = []
    it = 0
    for it in range(1, opts.netvlad_iters + 1):
        idx = rng.integers(0, len(train), size=batch)
        loss, grads = video_netvlad_loss([train_sets[i] for i in idx], y_train[idx], agg, params,
                                         cap=opts.netvlad_features, rng=rng)
        if not np.isfinite(loss):
            raise NumericalError(f"NetVLAD training diverged at iteration {it}")
        running.append(loss)
        lr = lr_schedule(it0 + it - 1, opts.lr, opts.decay_factor, opts.decay_every)
        params, state = adam_step(params, grads, state, lr)
        if it % eval_every == 0 or it == opts.netvlad_iters:
            val_loss = (video_netvlad_loss(val_sets, y_val, agg, params)[0] if val
                        else float(np.mean(running)))
            records.append(TrainRecord(it0 + it, float(np.mean(running)), val_loss, lr))
            running = []
            if stopper.update(val_loss, params):
                break
    best = stopper.best_state if stopper.best_state is not None else params
    agg.netvlad = NetVladParams(best["centers"].copy(), best["weights"].copy(), best["biases"].copy())
    return it0 + it


def train_aggregator(train: Sequence[LocalFeatureSequence], val: Sequence[LocalFeatureSequence],
                     config: PipelineConfig, options: TrainOptions | None = None,
                     emotion: str | None = None) -> tuple[Aggregator, list[TrainRecord]]:
    """Fit the learnable parts of an aggregator for one emotion type.

    The recurrent encoder is trained on randomly sampled intervals with a
    logistic head on its final output. With a
    NetVLAD video pooler its centers are seeded by k-means on the training
    interval vectors and then tuned on whole videos. Pooling-only configs
    run no optimizer at all. The heads used for training are discarded.

    Args:
        train, val: sequences, filtered to ``emotion`` when it is given.
        config: pipeline configuration.
        options: optimizer settings; defaults follow the paper's setup.
        emotion: optional emotion tag used to filter both sets.

    Returns:
        ``(aggregator, records)``.
    """
    opts = options or TrainOptions()
    if emotion is not None:
        train = [s for s in train if s.emotion == emotion]
        val = [s for s in val if s.emotion == emotion]
    train, val = list(train), list(val)
    _check_labels(train)
    rng = np.random.default_rng(opts.seed)
    train = [subject_normalize(s, config.subject_norm) for s in train]
    val = [subject_normalize(s, config.subject_norm) for s in val]
    for s in train + val:
        if s.n_frames < config.interval_frames:
            raise VideoTooShort(f"{s.video_id}: {s.n_frames} frames < K*T={config.interval_frames}")

    pca = None
    if config.use_pca:
        feats = np.concatenate([s.frames.reshape(-1, s.dim) for s in train])
        if feats.shape[0] > opts.pca_samples:
            feats = feats[np.random.default_rng(opts.seed + 2).choice(feats.shape[0], opts.pca_samples,
                                                                     replace=False)]
        pca = pca_fit(feats, config.pca_dim)
    agg = build_aggregator(config, train[0].dim, pca=pca)
    records: list[TrainRecord] = []
    it = 0
    if config.use_rnn:
        it = _train_rnn(agg, train, val, opts, rng, records)
    if config.video_pooler == "netvlad":
        it = _train_netvlad(agg, train, val, opts, rng, records, it0=it)
    if emotion is not None:
        agg.extra["emotion"] = emotion
    return agg, records
