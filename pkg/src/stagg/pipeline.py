"""Composition of the aggregation method.

A video is a sequence of frames, each holding ``M`` local feature vectors.
Encoding runs per-subject centering, cuts dense intervals of ``K`` grids of
``T`` frames, pools each grid with a tensor sketch, runs the recurrent
encoder over the ``K`` grid vectors and finally pools the set of interval
vectors into one power- and L2-normalized video vector.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import numkit
from ._fs import atomic_write_bytes
from .errors import (
    InvalidInterval,
    InvalidLength,
    ModelFormatError,
    VideoTooShort,
)
from .pooling import (
    NetVladParams,
    PcaModel,
    SketchParams,
    cbp_pool,
    l2_normalize,
    netvlad_pool,
    pca_transform,
    power_normalize,
)
from .temporal import RnnParams, rnn_forward

EMOTIONS = ("anger", "happiness", "surprise", "disgust", "contentment", "sadness")
LABELS = ("real", "fake")

GRID_POOLERS = ("cbp", "none")
VIDEO_POOLERS = ("cbp", "netvlad", "mean")
SUBJECT_NORMS = ("position", "global", "none")


@dataclass
class LocalFeatureSequence:
    video_id: str
    subject_id: str
    emotion: str
    label: str
    fps: float
    frames: np.ndarray  # (F, M, D)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise InvalidLength(f"frames must be (F, M, D), got shape {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def positions(self) -> int:
        return self.frames.shape[1]

    @property
    def dim(self) -> int:
        return self.frames.shape[2]

    def with_frames(self, frames) -> "LocalFeatureSequence":
        return dataclasses.replace(self, frames=frames)


@dataclass(frozen=True)
class PipelineConfig:
    use_pca: bool = False
    pca_dim: int = 128
    grid_pooler: str = "cbp"
    use_rnn: bool = True
    cell: str = "vanilla"
    video_pooler: str = "cbp"
    grid_frames: int = 3          # T
    interval_grids: int = 5       # K
    stride: int = 5
    grid_dim: int = 512           # d_g
    hidden_dim: int = 128         # H
    video_dim: int = 512          # d_v
    sigma: float = 0.5
    final_l2: bool = True
    netvlad_clusters: int = 32
    netvlad_alpha: float = 10.0
    subject_norm: str = "position"
    sketch_seed: int = 1
    init_seed: int = 2

    def __post_init__(self):
        if self.grid_pooler not in GRID_POOLERS:
            raise ValueError(f"grid_pooler must be one of {GRID_POOLERS}")
        if self.video_pooler not in VIDEO_POOLERS:
            raise ValueError(f"video_pooler must be one of {VIDEO_POOLERS}")
        if self.subject_norm not in SUBJECT_NORMS:
            raise ValueError(f"subject_norm must be one of {SUBJECT_NORMS}")
        if self.cell not in ("vanilla", "lstm"):
            raise ValueError("cell must be 'vanilla' or 'lstm'")
        if min(self.grid_frames, self.interval_grids, self.stride, self.hidden_dim) < 1:
            raise ValueError("T, K, stride and hidden_dim must be positive")
        if self.grid_pooler == "none" and self.grid_frames != 1:
            raise ValueError("grid_pooler='none' feeds single frames and requires T=1")
        if not 0 < self.sigma <= 1:
            raise ValueError("sigma must lie in (0, 1]")
        if self.grid_pooler == "cbp" and not numkit.is_power_of_two(self.grid_dim):
            raise ValueError(f"grid_dim must be a power of two, got {self.grid_dim}")
        if self.video_pooler == "cbp" and not numkit.is_power_of_two(self.video_dim):
            raise ValueError(f"video_dim must be a power of two, got {self.video_dim}")

    @property
    def interval_frames(self) -> int:
        return self.grid_frames * self.interval_grids

    @property
    def pools_frames_directly(self) -> bool:
        """No grid pooling and no recurrence: the video pooler sees every local feature."""
        return self.grid_pooler == "none" and not self.use_rnn

    @property
    def trains_rnn(self) -> bool:
        return self.use_rnn

    @property
    def has_trainable(self) -> bool:
        return self.use_rnn or self.video_pooler == "netvlad"

    def interval_seconds(self, fps: float) -> float:
        return self.interval_frames / fps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


# Ablation combinations. Frame-level rows use single-frame grids; "rnn+cbp"
# keeps the 15-frame interval span of the main method.
_FRAME = dict(grid_pooler="none", grid_frames=1, interval_grids=1, stride=1, use_rnn=False)
PRESETS: dict[str, dict] = {
    "cbp": dict(_FRAME, video_pooler="cbp"),
    "pca+cbp": dict(_FRAME, video_pooler="cbp", use_pca=True),
    "netvlad": dict(_FRAME, video_pooler="netvlad"),
    "pca+netvlad": dict(_FRAME, video_pooler="netvlad", use_pca=True),
    "rnn+cbp": dict(grid_pooler="none", grid_frames=1, interval_grids=15, use_rnn=True,
                    video_pooler="cbp"),
    "pca+rnn+cbp": dict(grid_pooler="none", grid_frames=1, interval_grids=15, use_rnn=True,
                        video_pooler="cbp", use_pca=True),
    "cbp+rnn+cbp": dict(),
    "pca+cbp+rnn+cbp": dict(use_pca=True),
    "cbp+rnn+netvlad": dict(video_pooler="netvlad"),
    "pca+cbp+rnn+netvlad": dict(video_pooler="netvlad", use_pca=True),
}


def preset(name: str, **overrides) -> PipelineConfig:
    """Config for a named ablation row, e.g. ``preset("cbp+rnn+cbp", hidden_dim=32)``."""
    key = name.lower()
    if key not in PRESETS:
        raise KeyError(f"unknown pipeline {name!r}; choose from {sorted(PRESETS)}")
    return PipelineConfig(**{**PRESETS[key], **overrides})


@dataclass
class VideoRepresentation:
    values: np.ndarray
    video_id: str = ""
    emotion: str = ""
    label: str = ""


@dataclass
class Aggregator:
    """Every parameter needed to encode a video under one config."""

    config: PipelineConfig
    input_dim: int
    pca: PcaModel | None = None
    grid_sketch: SketchParams | None = None
    rnn: RnnParams | None = None
    video_sketch: SketchParams | None = None
    netvlad: NetVladParams | None = None
    projection: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.pca.dim if self.pca is not None else self.input_dim

    @property
    def grid_vector_dim(self) -> int:
        return self.config.grid_dim if self.config.grid_pooler == "cbp" else self.feature_dim

    @property
    def interval_dim(self) -> int:
        if self.config.pools_frames_directly:
            return self.feature_dim
        return self.config.hidden_dim if self.config.use_rnn else self.grid_vector_dim

    @property
    def output_dim(self) -> int:
        cfg = self.config
        if cfg.video_pooler == "mean":
            return self.interval_dim
        return cfg.video_dim


def build_aggregator(config: PipelineConfig, input_dim: int, pca: PcaModel | None = None,
                     netvlad: NetVladParams | None = None) -> Aggregator:
    """Seeded construction of all non-data-dependent parameters.

    NetVLAD centers come from k-means over training data, so they are passed
    in (or set later by the trainer).
    """
    if config.use_pca and pca is None:
        raise ValueError("config.use_pca requires a fitted PcaModel")
    if pca is not None and pca.mean.shape[0] != input_dim:
        raise InvalidLength("PCA model does not match the input dimension")
    agg = Aggregator(config, int(input_dim), pca=pca if config.use_pca else None)
    if config.grid_pooler == "cbp":
        agg.grid_sketch = SketchParams.generate(agg.feature_dim, config.grid_dim, config.sketch_seed)
    if config.use_rnn:
        agg.rnn = RnnParams.init(agg.grid_vector_dim, config.hidden_dim, seed=config.init_seed,
                                 cell=config.cell)
    if config.video_pooler == "cbp":
        agg.video_sketch = SketchParams.generate(agg.interval_dim, config.video_dim,
                                                 config.sketch_seed + 1)
    elif config.video_pooler == "netvlad":
        vlad_dim = config.netvlad_clusters * agg.interval_dim
        if vlad_dim != config.video_dim:
            rng = np.random.default_rng(config.sketch_seed + 2)
            agg.projection = rng.standard_normal((config.video_dim, vlad_dim)) / np.sqrt(config.video_dim)
        agg.netvlad = netvlad
    return agg


# --------------------------------------------------------------------------
# per-video preprocessing and interval layout
# --------------------------------------------------------------------------

def subject_normalize(seq: LocalFeatureSequence, mode: str = "position") -> LocalFeatureSequence:
    """Remove the subject's own average from every frame of the video.

    ``position`` subtracts, for each spatial position, that position's mean
    over all frames; ``global`` subtracts one mean vector pooled over frames
    and positions.
    """
    if mode == "none":
        return seq
    frames = seq.frames
    # shifting by the first frame first makes a constant video exactly zero
    if mode == "position":
        shifted = frames - frames[:1]
        centered = shifted - shifted.mean(axis=0, keepdims=True)
    elif mode == "global":
        shifted = frames - frames[:1, :1]
        centered = shifted - shifted.mean(axis=(0, 1), keepdims=True)
    else:
        raise ValueError(f"unknown subject normalization {mode!r}")
    return seq.with_frames(centered)


def assemble_grids(interval, interval_grids: int, grid_frames: int) -> np.ndarray:
    """Split ``K*T`` frames into ``K`` grids of ``T*M`` local features each."""
    x = np.asarray(interval, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != interval_grids * grid_frames:
        raise InvalidInterval(
            f"interval must hold exactly K*T={interval_grids * grid_frames} frames, "
            f"got {x.shape[0] if x.ndim else 0}")
    k, t = interval_grids, grid_frames
    return x.reshape(k, t * x.shape[1], x.shape[2])


def sample_intervals(n_frames: int, config: PipelineConfig, mode: str = "dense",
                     n: int | None = None, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Start frames of intervals; the interval at ``s`` is ``frames[s : s + K*T]``.

    ``dense`` returns ``0, stride, 2*stride, ...`` while the interval fits;
    ``random`` draws ``n`` starts uniformly (with replacement) from the
    feasible range. Incomplete trailing intervals are dropped.
    """
    span = config.interval_frames
    if n_frames < span:
        raise VideoTooShort(f"video has {n_frames} frames, one interval needs K*T={span}")
    if mode == "dense":
        return np.arange(0, n_frames - span + 1, config.stride)
    if mode == "random":
        if n is None or n < 1:
            raise ValueError("random mode needs n >= 1")
        rng = np.random.default_rng(rng)
        return rng.integers(0, n_frames - span + 1, size=n)
    raise ValueError(f"unknown sampling mode {mode!r}")


def _project_features(frames, agg: Aggregator) -> np.ndarray:
    return pca_transform(frames, agg.pca) if agg.pca is not None else np.asarray(frames, dtype=np.float64)


# --------------------------------------------------------------------------
# interval encoding
# --------------------------------------------------------------------------

def grid_vectors(interval, agg: Aggregator) -> np.ndarray:
    """``(K, d)`` grid representations of one interval (reference path)."""
    cfg = agg.config
    grids = assemble_grids(_project_features(interval, agg), cfg.interval_grids, cfg.grid_frames)
    if cfg.grid_pooler == "cbp":
        return l2_normalize(np.stack([cbp_pool(g, agg.grid_sketch) for g in grids]))
    return grids.mean(axis=1)


def encode_interval(interval, agg: Aggregator) -> np.ndarray:
    """Interval representation of exactly ``K*T`` frames of local features."""
    ys = grid_vectors(interval, agg)
    if agg.config.use_rnn:
        return rnn_forward(ys, agg.rnn)[0]
    return ys.mean(axis=0)


def grid_table(frames, agg: Aggregator) -> np.ndarray:
    """Grid vectors for every possible grid start of a video.

    Row ``f`` is the representation of the grid spanning frames
    ``f .. f+T-1``. Sketch pooling is a sum over features, so per-frame
    pools are computed once and summed over each window.
    """
    cfg = agg.config
    x = _project_features(frames, agg)
    n_frames, t = x.shape[0], cfg.grid_frames
    if n_frames < t:
        raise VideoTooShort(f"video has {n_frames} frames, a grid needs {t}")
    if cfg.grid_pooler == "none":
        return x.mean(axis=1)
    spectra = agg.grid_sketch.feature_spectra(x).sum(axis=1)
    windows = sum(spectra[i: n_frames - t + 1 + i] for i in range(t))
    return l2_normalize(numkit.ifft(windows).real)


def interval_inputs(table, starts, agg: Aggregator) -> np.ndarray:
    """Gather the ``(n, K, d)`` grid sequences of intervals starting at ``starts``."""
    cfg = agg.config
    offsets = cfg.grid_frames * np.arange(cfg.interval_grids)
    return table[np.asarray(starts)[:, None] + offsets[None, :]]


def encode_intervals(table, starts, agg: Aggregator) -> np.ndarray:
    ys = interval_inputs(table, starts, agg)
    if agg.config.use_rnn:
        return rnn_forward(ys, agg.rnn)[0]
    return ys.mean(axis=1)


def interval_representations(seq: LocalFeatureSequence, agg: Aggregator,
                             normalized: bool = False) -> np.ndarray:
    """Set of vectors the video pooler consumes for one video.

    For pooling-only configs without grids this is every local feature of the
    video; otherwise one vector per dense interval.
    """
    cfg = agg.config
    if not normalized:
        seq = subject_normalize(seq, cfg.subject_norm)
    starts = sample_intervals(seq.n_frames, cfg, "dense")
    if cfg.pools_frames_directly:
        used = seq.frames[: starts[-1] + cfg.interval_frames]
        x = _project_features(used, agg)
        return x.reshape(-1, x.shape[-1])
    return encode_intervals(grid_table(seq.frames, agg), starts, agg)


def video_pool(reps, agg: Aggregator) -> np.ndarray:
    """Order-free pooling of a set of interval vectors, before normalization."""
    cfg = agg.config
    if cfg.video_pooler == "cbp":
        return cbp_pool(reps, agg.video_sketch)
    if cfg.video_pooler == "netvlad":
        if agg.netvlad is None:
            raise ValueError("NetVLAD pooler has no parameters; train or initialize it first")
        out = netvlad_pool(reps, agg.netvlad)
        return agg.projection @ out if agg.projection is not None else out
    return np.asarray(reps, dtype=np.float64).mean(axis=0)


def finalize_video(pooled, config: PipelineConfig) -> np.ndarray:
    out = power_normalize(pooled, config.sigma)
    return l2_normalize(out) if config.final_l2 else out


def encode_video(seq: LocalFeatureSequence, agg: Aggregator) -> VideoRepresentation:
    """Video-level representation fed to the classifier."""
    reps = interval_representations(seq, agg)
    values = finalize_video(video_pool(reps, agg), agg.config)
    return VideoRepresentation(values, seq.video_id, seq.emotion, seq.label)


def encode_videos(seqs: Iterable[LocalFeatureSequence], agg: Aggregator) -> list[VideoRepresentation]:
    return [encode_video(s, agg) for s in seqs]


# --------------------------------------------------------------------------
# tensor file container
# --------------------------------------------------------------------------

MODEL_MAGIC = b"STAG"
MODEL_VERSION = 1


def write_tensor_file(path, meta: dict, tensors: dict[str, np.ndarray],
                      version: int = MODEL_VERSION) -> None:
    """Little-endian container: magic, version, JSON block, named f64 tensors."""
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", version))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    atomic_write_bytes(path, buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ModelFormatError(f"{self.path}: truncated model file")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_tensor_file(path, version: int = MODEL_VERSION) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ModelFormatError(f"{path}: cannot read model file ({exc})") from exc
    r = _Reader(data, path)
    if r.take(4) != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic, not a model file")
    found = r.u32()
    if found != version:
        raise ModelFormatError(f"{path}: model format version {found}, expected version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt config block") from exc
    tensors = {}
    for _ in range(r.u32()):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFormatError(f"{path}: corrupt tensor name") from exc
        rank = r.u32()
        if rank > 8:
            raise ModelFormatError(f"{path}: implausible tensor rank {rank}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - r.pos} unexpected trailing bytes")
    return meta, tensors


def _sketch_tensors(prefix: str, sk: SketchParams) -> dict:
    return {f"{prefix}.h1": sk.h1, f"{prefix}.h2": sk.h2, f"{prefix}.s1": sk.s1, f"{prefix}.s2": sk.s2}


def _load_sketch(prefix: str, meta: dict, tensors: dict, path) -> SketchParams:
    info = meta[prefix]
    sk = SketchParams.generate(info["input_dim"], info["sketch_dim"], info["seed"])
    for attr in ("h1", "h2", "s1", "s2"):
        stored = tensors.get(f"{prefix}.{attr}")
        if stored is None or not np.array_equal(stored, getattr(sk, attr)):
            raise ModelFormatError(f"{path}: sketch map {prefix}.{attr} disagrees with its seed")
    return sk


def save_model(agg: Aggregator, path) -> None:
    meta = {"kind": "aggregator", "config": agg.config.to_dict(), "input_dim": agg.input_dim,
            "extra": agg.extra}
    tensors: dict[str, np.ndarray] = {}
    for prefix in ("grid_sketch", "video_sketch"):
        sk = getattr(agg, prefix)
        if sk is not None:
            meta[prefix] = {"input_dim": sk.input_dim, "sketch_dim": sk.sketch_dim, "seed": sk.seed}
            tensors.update(_sketch_tensors(prefix, sk))
    if agg.pca is not None:
        tensors["pca.mean"] = agg.pca.mean
        tensors["pca.basis"] = agg.pca.basis
        tensors["pca.explained_variance"] = agg.pca.explained_variance
        meta["pca_total_variance"] = agg.pca.total_variance
    if agg.rnn is not None:
        tensors.update({f"rnn.{k}": v for k, v in agg.rnn.as_dict().items()})
    if agg.netvlad is not None:
        tensors.update({f"netvlad.{k}": v for k, v in agg.netvlad.as_dict().items()})
    if agg.projection is not None:
        tensors["projection"] = agg.projection
    write_tensor_file(path, meta, tensors)


def load_model(path) -> Aggregator:
    meta, t = read_tensor_file(path)
    if meta.get("kind") != "aggregator":
        raise ModelFormatError(f"{path}: not an aggregator model (kind={meta.get('kind')!r})")
    try:
        config = PipelineConfig.from_dict(meta["config"])
        agg = Aggregator(config, int(meta["input_dim"]), extra=meta.get("extra", {}))
        if "pca.mean" in t:
            agg.pca = PcaModel(t["pca.mean"], t["pca.basis"], t["pca.explained_variance"],
                               meta["pca_total_variance"])
        for prefix in ("grid_sketch", "video_sketch"):
            if prefix in meta:
                setattr(agg, prefix, _load_sketch(prefix, meta, t, path))
        if "rnn.w_in" in t:
            agg.rnn = RnnParams(t["rnn.w_in"], t["rnn.w_rec"], t["rnn.b"], cell=config.cell)
        if "netvlad.centers" in t:
            agg.netvlad = NetVladParams(t["netvlad.centers"], t["netvlad.weights"], t["netvlad.biases"])
        agg.projection = t.get("projection")
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: inconsistent model contents ({exc})") from exc
    return agg
