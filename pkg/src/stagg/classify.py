"""Linear SVM on video vectors and the per-emotion evaluation statistic."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DegenerateLabels, IncompleteEvaluation, InvalidLength, ModelFormatError, NumericalError
from .pipeline import EMOTIONS, read_tensor_file, write_tensor_file


@dataclass
class SvmModel:
    weights: np.ndarray
    bias: float
    C: float = 1.0
    history: list = field(default_factory=list, repr=False)   # dual objective per epoch
    primal_history: list = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


def to_signs(labels) -> np.ndarray:
    """Map ``real``/``fake`` (or +-1) labels to +1/-1."""
    arr = np.asarray(labels)
    if arr.dtype.kind in "US O":
        out = np.array([1.0 if str(v) == "real" else -1.0 if str(v) == "fake" else np.nan for v in arr])
    else:
        out = np.where(arr > 0, 1.0, np.where(arr < 0, -1.0, np.nan)).astype(np.float64)
    if np.any(np.isnan(out)):
        raise ValueError("labels must be 'real'/'fake' or +1/-1")
    return out


def primal_objective(w, b, X, y, C) -> float:
    margins = 1.0 - y * (X @ w + b)
    return float(0.5 * w @ w + C * np.maximum(margins, 0.0).sum())


def svm_train(X, labels, C: float = 1.0, tol: float = 1e-10, max_epochs: int = 10000) -> SvmModel:
    """Soft-margin linear SVM with an unregularized bias.

    Solves the dual ``min 1/2 a'Qa - 1'a`` s.t. ``0 <= a <= C, y'a = 0`` by
    sequential minimal optimization with maximal-violating-pair selection,
    on a precomputed Gram matrix. Each pair update minimizes the dual exactly,
    so the recorded dual objective never increases. Deterministic.

    Args:
        X: ``(n, d)`` samples.
        labels: ``real``/``fake`` strings or +1/-1.
        C: hinge penalty.
        tol: stopping threshold on the maximal KKT violation.

    Returns:
        SvmModel with ``history`` (dual objective after each epoch of ``n``
        pair updates) and ``primal_history``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidLength("X must be an (n, d) array")
    y = to_signs(labels)
    if y.shape[0] != X.shape[0]:
        raise InvalidLength(f"{X.shape[0]} samples but {y.shape[0]} labels")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise DegenerateLabels("SVM training needs both real and fake samples")
    if C <= 0:
        raise ValueError("C must be positive")
    n = X.shape[0]
    K = X @ X.T
    Q = (y[:, None] * y[None, :]) * K
    diag = np.diag(Q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)  # Q a - 1

    def dual(a, g):
        # 1/2 a'Qa - 1'a = 1/2 a'(g + 1) - 1'a
        return float(0.5 * a @ (g + 1.0) - a.sum())

    history, primal = [], []
    converged = False
    for _epoch in range(max_epochs):
        for _ in range(n):
            yg = -y * grad
            up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
            low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
            if not up.any() or not low.any():
                converged = True
                break
            i = int(np.flatnonzero(up)[np.argmax(yg[up])])
            j = int(np.flatnonzero(low)[np.argmin(yg[low])])
            if yg[i] - yg[j] < tol:
                converged = True
                break
            ai, aj = alpha[i], alpha[j]
            _update_pair(i, j, alpha, grad, Q, diag, y, C)
            di, dj = alpha[i] - ai, alpha[j] - aj
            grad += Q[:, i] * di + Q[:, j] * dj
        history.append(dual(alpha, grad))
        w = (alpha * y) @ X
        b = _bias(alpha, grad, y, C)
        primal.append(primal_objective(w, b, X, y, C))
        if len(history) > 1 and history[-1] > history[-2] + 1e-12 * max(1.0, abs(history[-2])):
            raise NumericalError("SVM dual objective increased between epochs")
        if converged:
            break
    w = (alpha * y) @ X
    b = _bias(alpha, grad, y, C)
    return SvmModel(w, float(b), float(C), history, primal)


def _update_pair(i, j, alpha, grad, Q, diag, y, C):
    # two-variable subproblem along y_i a_i + y_j a_j = const, clipped to the box
    tau = 1e-12
    if y[i] != y[j]:
        quad = max(diag[i] + diag[j] + 2 * Q[i, j], tau)
        delta = (-grad[i] - grad[j]) / quad
        diff = alpha[i] - alpha[j]
        alpha[i] += delta
        alpha[j] += delta
        if diff > 0:
            if alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = diff
        elif alpha[i] < 0:
            alpha[i] = 0.0
            alpha[j] = -diff
        if diff > 0:
            if alpha[i] > C:
                alpha[i] = C
                alpha[j] = C - diff
        elif alpha[j] > C:
            alpha[j] = C
            alpha[i] = C + diff
    else:
        quad = max(diag[i] + diag[j] - 2 * Q[i, j], tau)
        delta = (grad[i] - grad[j]) / quad
        total = alpha[i] + alpha[j]
        alpha[i] -= delta
        alpha[j] += delta
        if total > C:
            if alpha[i] > C:
                alpha[i] = C
                alpha[j] = total - C
        elif alpha[j] < 0:
            alpha[j] = 0.0
            alpha[i] = total
        if total > C:
            if alpha[j] > C:
                alpha[j] = C
                alpha[i] = total - C
        elif alpha[i] < 0:
            alpha[i] = 0.0
            alpha[j] = total


def _bias(alpha, grad, y, C) -> float:
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = yg[free].mean()
    else:
        at_upper = alpha >= C
        at_lower = alpha <= 0
        ub_mask = ((at_upper & (y < 0)) | (at_lower & (y > 0)))
        lb_mask = ((at_upper & (y > 0)) | (at_lower & (y < 0)))
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = 0.5 * (ub + lb)
    return -float(rho)


def decision_function(model: SvmModel, X) -> np.ndarray:
    """Raw margin ``w.x + b``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.dim:
        raise InvalidLength(f"input dim {X.shape[-1]} != model dim {model.dim}")
    return X @ model.weights + model.bias


def svm_predict(model: SvmModel, X):
    """``real`` where the margin is >= 0 (ties included), else ``fake``."""
    margin = decision_function(model, X)
    if np.ndim(margin) == 0:
        return "real" if margin >= 0 else "fake"
    return np.where(margin >= 0, "real", "fake")


def save_svm(model: SvmModel, path) -> None:
    write_tensor_file(path, {"kind": "svm", "C": model.C},
                      {"weights": model.weights, "bias": np.array([model.bias])})


def load_svm(path) -> SvmModel:
    meta, t = read_tensor_file(path)
    if meta.get("kind") != "svm":
        raise ModelFormatError(f"{path}: not an SVM model (kind={meta.get('kind')!r})")
    try:
        return SvmModel(t["weights"], float(t["bias"][0]), float(meta["C"]))
    except (KeyError, IndexError) as exc:
        raise ModelFormatError(f"{path}: incomplete SVM model ({exc})") from exc


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def average_precision(scores, labels) -> float:
    """Ranking AP of ``real`` videos ordered by decreasing score."""
    s = np.asarray(scores, dtype=np.float64)
    y = to_signs(labels) > 0
    if not y.any():
        return float("nan")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].mean())


@dataclass
class EvaluationReport:
    per_emotion: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)
    average_precision: dict[str, float] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        return float(np.mean([self.per_emotion[e] for e in EMOTIONS]))

    @classmethod
    def from_accuracies(cls, accuracies: Mapping[str, float]) -> "EvaluationReport":
        missing = [e for e in EMOTIONS if e not in accuracies]
        if missing:
            raise IncompleteEvaluation(f"no accuracy for {', '.join(missing)}")
        return cls({e: float(accuracies[e]) for e in EMOTIONS})

    def table(self, title: str = "accuracy") -> str:
        width = max(len(e) for e in EMOTIONS + ("Average",))
        show_ap = bool(self.average_precision)
        head = f"{'Emotion':<{width}}  {title:>9}" + (f"  {'AP':>9}" if show_ap else "")
        rule = "=" * len(head)
        lines = [rule, head, "-" * len(head)]
        for e in EMOTIONS:
            row = f"{e.capitalize():<{width}}  {100 * self.per_emotion[e]:>8.2f}%"
            if show_ap:
                row += f"  {100 * self.average_precision.get(e, float('nan')):>8.2f}%"
            lines.append(row)
        lines.append("-" * len(head))
        avg = f"{'Average':<{width}}  {100 * self.overall:>8.2f}%"
        if show_ap:
            avg += f"  {100 * np.nanmean([self.average_precision.get(e, np.nan) for e in EMOTIONS]):>8.2f}%"
        lines += [avg, rule]
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["emotion", "accuracy"])
        for e in EMOTIONS:
            w.writerow([e, repr(self.per_emotion[e])])
        w.writerow(["average", repr(self.overall)])
        return buf.getvalue()


def evaluate(predictions: Mapping[str, str], truth: Mapping[str, tuple[str, str]],
             scores: Mapping[str, float] | None = None) -> EvaluationReport:
    """Per-emotion accuracy and its unweighted mean.

    Args:
        predictions: ``video_id -> 'real' | 'fake'``.
        truth: ``video_id -> (emotion, label)``.
        scores: optional ``video_id -> margin`` for the secondary AP statistic.
    """
    missing = sorted(set(truth) - set(predictions))
    extra = sorted(set(predictions) - set(truth))
    if missing or extra:
        raise IncompleteEvaluation(
            f"prediction/truth mismatch: {len(missing)} unpredicted, {len(extra)} unknown videos")
    by_emotion: dict[str, list[str]] = {e: [] for e in EMOTIONS}
    for vid, (emotion, _label) in truth.items():
        if emotion not in by_emotion:
            raise IncompleteEvaluation(f"unknown emotion {emotion!r} for {vid}")
        by_emotion[emotion].append(vid)
    absent = [e for e, vids in by_emotion.items() if not vids]
    if absent:
        raise IncompleteEvaluation(f"no videos for emotion(s): {', '.join(absent)}")
    acc, counts, ap = {}, {}, {}
    for e, vids in by_emotion.items():
        vids = sorted(vids)
        acc[e] = float(np.mean([predictions[v] == truth[v][1] for v in vids]))
        counts[e] = len(vids)
        if scores is not None:
            ap[e] = average_precision([scores[v] for v in vids], [truth[v][1] for v in vids])
    return EvaluationReport(acc, counts, ap)
