"""Per-emotion workflow: fit aggregators and SVMs, predict, score.

One aggregator and one linear SVM are fitted per emotion type, on that
emotion's training videos only. Everything here is a thin loop over the
library calls; the CLI and the ablation runner share it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .classify import EvaluationReport, SvmModel, decision_function, evaluate, svm_train
from .optim import TrainOptions, TrainRecord, train_aggregator
from .pipeline import EMOTIONS, Aggregator, LocalFeatureSequence, PipelineConfig, encode_video


@dataclass
class EmotionModel:
    aggregator: Aggregator
    svm: SvmModel
    records: list[TrainRecord] = field(default_factory=list)


@dataclass
class ExperimentResult:
    report: EvaluationReport
    models: dict[str, EmotionModel]
    seconds: float


def embed(seqs: Sequence[LocalFeatureSequence], agg: Aggregator) -> np.ndarray:
    return np.stack([encode_video(s, agg).values for s in seqs])


def fit_emotion(train: Sequence[LocalFeatureSequence], val: Sequence[LocalFeatureSequence],
                config: PipelineConfig, options: TrainOptions, emotion: str,
                C: float = 1.0) -> EmotionModel:
    """Aggregator plus SVM for one emotion; both see only that emotion's videos."""
    train = [s for s in train if s.emotion == emotion]
    val = [s for s in val if s.emotion == emotion]
    agg, records = train_aggregator(train, val, config, options, emotion=emotion)
    svm = svm_train(embed(train, agg), [s.label for s in train], C=C)
    return EmotionModel(agg, svm, records)


def predict(models: Mapping[str, EmotionModel], seqs: Sequence[LocalFeatureSequence]):
    """``(labels, margins)`` keyed by video id, each video routed to its emotion's model."""
    labels, margins = {}, {}
    for s in seqs:
        m = models[s.emotion]
        margin = float(decision_function(m.svm, encode_video(s, m.aggregator).values))
        margins[s.video_id] = margin
        labels[s.video_id] = "real" if margin >= 0 else "fake"
    return labels, margins


def score(models: Mapping[str, EmotionModel], seqs: Sequence[LocalFeatureSequence]) -> EvaluationReport:
    labels, margins = predict(models, seqs)
    return evaluate(labels, {s.video_id: (s.emotion, s.label) for s in seqs}, margins)


def run_experiment(train: Sequence[LocalFeatureSequence], val: Sequence[LocalFeatureSequence],
                   held_out: Sequence[LocalFeatureSequence], config: PipelineConfig,
                   options: TrainOptions | None = None, C: float = 1.0,
                   emotions: Sequence[str] = EMOTIONS) -> ExperimentResult:
    """Fit every emotion, then score ``held_out``."""
    options = options or TrainOptions()
    t0 = time.perf_counter()
    models = {e: fit_emotion(train, val, config, options, e, C) for e in emotions}
    report = score(models, held_out)
    return ExperimentResult(report, models, time.perf_counter() - t0)
