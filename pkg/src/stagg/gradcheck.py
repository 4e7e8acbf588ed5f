"""Finite-difference audit of every hand-written backward pass.

Each component draws ``trials`` small random instances and compares the
analytic gradient to central differences; the worst relative error per
component is reported. ``corrupt`` names one component whose analytic
gradient is deliberately scaled, which lets callers confirm that a broken
backward pass is caught.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import NumericalError
from .optim import encoder_loss, grad_check
from .pipeline import PipelineConfig, build_aggregator
from .pooling import (
    NetVladParams,
    SketchParams,
    cbp_pool,
    cbp_pool_backward,
    l2_normalize,
    l2_normalize_backward,
    netvlad_backward,
    netvlad_forward,
    pca_fit,
    power_normalize,
    power_normalize_backward,
)
from .temporal import RnnParams, rnn_backward, rnn_forward

TOLERANCE = 1e-4
CORRUPTION = 1.01


@dataclass
class ComponentResult:
    name: str
    max_error: float
    instances: int
    seconds: float
    error: str = ""

    @property
    def passed(self) -> bool:
        return not self.error and self.max_error < TOLERANCE


def _cbp(r):
    dim, d, n = int(r.integers(1, 9)), int(2 ** r.integers(0, 5)), int(r.integers(1, 5))
    p = SketchParams.generate(dim, d, seed=int(r.integers(1 << 30)))
    g = r.standard_normal(d)
    yield (lambda x: g @ cbp_pool(x, p), lambda x: cbp_pool_backward(x, p, g), r.standard_normal((n, dim)))


def _netvlad(r):
    # a single feature makes the soft-assignment path structurally flat
    dim, clusters, n = int(r.integers(1, 9)), int(r.integers(1, 5)), int(r.integers(2, 7))
    base = {"centers": r.standard_normal((clusters, dim)),
            "weights": 0.5 * r.standard_normal((clusters, dim)),
            "biases": 0.5 * r.standard_normal(clusters)}
    x0 = r.standard_normal((n, dim))
    g = r.standard_normal(clusters * dim)
    for wrt in ("features", *base):
        def split(v, wrt=wrt):
            params = dict(base) if wrt == "features" else {**base, wrt: v}
            return (v if wrt == "features" else x0), NetVladParams(**params)

        def f(v, split=split):
            x, p = split(v)
            return g @ netvlad_forward(x, p)[0]

        def grad(v, split=split, wrt=wrt):
            x, p = split(v)
            out, cache = netvlad_forward(x, p)
            gx, gp = netvlad_backward(cache, p, g)
            return gx if wrt == "features" else gp[wrt]

        yield f, grad, (x0 if wrt == "features" else base[wrt])


def _power_norm(r):
    x0 = r.uniform(1e-3, 2.0, size=6) * r.choice([-1, 1], size=6)
    g = r.standard_normal(6)
    sigma = r.uniform(0.2, 1.0)
    yield (lambda x: g @ power_normalize(x, sigma),
           lambda x: power_normalize_backward(x, g, sigma), x0)


def _l2_norm(r):
    x0, g = r.standard_normal((2, 5))
    yield lambda x: g @ l2_normalize(x), lambda x: l2_normalize_backward(x, g), x0


def _rnn(cell):
    def make(r):
        hidden, dim, steps = int(r.integers(1, 9)), int(r.integers(1, 9)), int(r.integers(1, 9))
        p = RnnParams.init(dim, hidden, seed=int(r.integers(1 << 30)), cell=cell)
        p.b[:] = 0.2 * r.standard_normal(p.b.shape)
        y = r.standard_normal((steps, dim))
        g = r.standard_normal(hidden)
        for wrt in ("w_in", "w_rec", "b", "inputs"):
            def build(v, wrt=wrt):
                d = {**p.as_dict()}
                if wrt != "inputs":
                    d[wrt] = v
                return RnnParams(d["w_in"], d["w_rec"], d["b"], cell), (v if wrt == "inputs" else y)

            def f(v, build=build):
                q, inputs = build(v)
                return float(g @ rnn_forward(inputs, q)[0])

            def grad(v, build=build, wrt=wrt):
                q, inputs = build(v)
                grads, gy = rnn_backward(rnn_forward(inputs, q)[1], g, q)
                return gy if wrt == "inputs" else grads[wrt]

            yield f, grad, (y if wrt == "inputs" else p.as_dict()[wrt])
    return make


def _encoder(r):
    cfg = PipelineConfig(grid_dim=int(2 ** r.integers(3, 6)), hidden_dim=int(r.integers(2, 6)),
                         interval_grids=int(r.integers(1, 4)), grid_frames=int(r.integers(1, 3)))
    dim = int(r.integers(3, 7))
    if r.random() < 0.25:
        cfg = cfg.replace(use_pca=True, pca_dim=3)
    if r.random() < 0.2:
        cfg = cfg.replace(grid_pooler="none", grid_frames=1)
    pca = pca_fit(r.standard_normal((50, dim)), cfg.pca_dim) if cfg.use_pca else None
    agg = build_aggregator(cfg, dim, pca=pca)
    agg.rnn.b[:] = 0.2 * r.standard_normal(agg.rnn.b.shape)
    x0 = r.standard_normal((3, cfg.interval_frames, 2, dim))
    y = r.integers(0, 2, size=3).astype(float)
    w, b = r.standard_normal(cfg.hidden_dim), float(r.standard_normal())
    yield (lambda v: encoder_loss(v, y, agg, w, b)[0],
           lambda v: encoder_loss(v, y, agg, w, b)[2], x0)


COMPONENTS: dict[str, Callable] = {
    "cbp": _cbp,
    "netvlad": _netvlad,
    "power_norm": _power_norm,
    "l2_norm": _l2_norm,
    "rnn_vanilla": _rnn("vanilla"),
    "rnn_lstm": _rnn("lstm"),
    "encoder_loss": _encoder,
}


def check_component(name: str, trials: int = 20, seed: int = 0, corrupt: bool = False) -> ComponentResult:
    """Worst relative error over ``trials`` random instances of one component."""
    make = COMPONENTS[name]
    rng = np.random.default_rng([seed, sorted(COMPONENTS).index(name)])
    worst, count = 0.0, 0
    t0 = time.perf_counter()
    try:
        for _ in range(trials):
            for fn, grad, point in make(rng):
                if corrupt:
                    grad = (lambda g: lambda v: CORRUPTION * np.asarray(g(v)))(grad)
                worst = max(worst, grad_check(fn, grad, point))
                count += 1
    except NumericalError as exc:
        return ComponentResult(name, float("inf"), count, time.perf_counter() - t0, str(exc))
    return ComponentResult(name, worst, count, time.perf_counter() - t0)


def run_suite(trials: int = 20, seed: int = 0, corrupt: Iterable[str] = (),
              components: Iterable[str] | None = None) -> list[ComponentResult]:
    corrupt = set(corrupt)
    unknown = corrupt - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown component(s): {sorted(unknown)}")
    names = list(components) if components is not None else list(COMPONENTS)
    return [check_component(n, trials, seed, n in corrupt) for n in names]
