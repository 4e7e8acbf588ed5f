"""Feature files, manifests and the synthetic real/fake corpus.

Feature file layout (little-endian)::

    magic "RFEX" | u32 version | u32 F | u32 M | u32 D | f32 fps | F*M*D f32

Values are stored frame-major, then position, then feature index. Manifests
are tab-separated text, one video per line, ``#`` starts a comment.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._fs import atomic_write_bytes, atomic_write_text
from .errors import FeatureFormatError, InvalidSpec, ManifestError
from .pipeline import EMOTIONS, LABELS, LocalFeatureSequence

FEATURE_MAGIC = b"RFEX"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIf")
HEADER_BYTES = _HEADER.size
SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("video_id", "subject_id", "emotion", "label", "fps", "path", "split")


def encode_features(frames, fps: float) -> bytes:
    arr = np.asarray(frames)
    if arr.ndim != 3:
        raise FeatureFormatError(f"frames must be (F, M, D), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FeatureFormatError("feature payload must be finite")
    f, m, d = arr.shape
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, f, m, d, fps) + arr.astype("<f4").tobytes()


def write_features(seq_or_frames, path, fps: float | None = None) -> None:
    """Write a sequence (or a bare ``(F, M, D)`` array plus ``fps``) to ``path``."""
    if isinstance(seq_or_frames, LocalFeatureSequence):
        frames, fps = seq_or_frames.frames, seq_or_frames.fps
    else:
        frames = seq_or_frames
        if fps is None:
            raise ValueError("fps is required when writing a bare array")
    atomic_write_bytes(path, encode_features(frames, fps))


def decode_features(data: bytes, source="<bytes>") -> tuple[np.ndarray, float]:
    if len(data) < HEADER_BYTES:
        raise FeatureFormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, f, m, d, fps = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{source}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{source}: feature format version {version}, expected {FEATURE_VERSION}")
    expected = 4 * f * m * d
    payload = len(data) - HEADER_BYTES
    if payload != expected:
        raise FeatureFormatError(f"{source}: payload has {payload} bytes, header implies {expected}")
    frames = np.frombuffer(data, dtype="<f4", offset=HEADER_BYTES).reshape(f, m, d)
    if not np.all(np.isfinite(frames)):
        raise FeatureFormatError(f"{source}: non-finite values in payload")
    return frames.astype(np.float64), float(fps)


def read_features(path) -> tuple[np.ndarray, float]:
    """Returns ``(frames, fps)`` with frames as float64 ``(F, M, D)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FeatureFormatError(f"{path}: cannot read ({exc})") from exc
    return decode_features(data, path)


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    subject_id: str
    emotion: str
    label: str
    fps: float
    path: str
    split: str


class Manifest:
    def __init__(self, entries: Iterable[ManifestEntry], root="."):
        self.entries = list(entries)
        self.root = Path(root)
        seen = set()
        for e in self.entries:
            if e.video_id in seen:
                raise ManifestError(f"duplicate video_id {e.video_id!r}")
            seen.add(e.video_id)
            if e.emotion not in EMOTIONS:
                raise ManifestError(f"{e.video_id}: unknown emotion {e.emotion!r}")
            if e.label not in LABELS:
                raise ManifestError(f"{e.video_id}: unknown label {e.label!r}")
            if e.split not in SPLITS:
                raise ManifestError(f"{e.video_id}: unknown split {e.split!r}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def select(self, split: str | None = None, emotion: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if (split is None or e.split == split) and (emotion is None or e.emotion == emotion)]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def check_paths(self) -> None:
        dangling = [e.video_id for e in self.entries if not self.resolve(e).is_file()]
        if dangling:
            raise ManifestError(f"{len(dangling)} dangling path(s), first: {dangling[0]}")

    def load(self, entry: ManifestEntry) -> LocalFeatureSequence:
        frames, fps = read_features(self.resolve(entry))
        return LocalFeatureSequence(entry.video_id, entry.subject_id, entry.emotion, entry.label,
                                    fps, frames)

    def load_split(self, split: str, emotion: str | None = None) -> list[LocalFeatureSequence]:
        return [self.load(e) for e in self.select(split, emotion)]

    def to_text(self) -> str:
        lines = ["# " + "\t".join(MANIFEST_FIELDS)]
        for e in self.entries:
            lines.append("\t".join([e.video_id, e.subject_id, e.emotion, e.label, repr(float(e.fps)),
                                    e.path, e.split]))
        return "\n".join(lines) + "\n"

    def counts(self) -> dict[str, int]:
        return {s: len(self.select(s)) for s in SPLITS}


def parse_manifest(text: str, root=".") -> Manifest:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip("\r\n")
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != len(MANIFEST_FIELDS):
            raise ManifestError(f"line {lineno}: expected {len(MANIFEST_FIELDS)} tab-separated fields, "
                                f"got {len(parts)}")
        try:
            fps = float(parts[4])
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: bad fps {parts[4]!r}") from exc
        entries.append(ManifestEntry(parts[0], parts[1], parts[2], parts[3], fps, parts[5], parts[6]))
    return Manifest(entries, root)


def read_manifest(path, check: bool = True) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc})") from exc
    manifest = parse_manifest(text, root=path.parent)
    if check:
        manifest.check_paths()
    return manifest


def write_manifest(manifest: Manifest, path) -> None:
    atomic_write_text(path, manifest.to_text())


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale stand-in for a real/fake expression corpus.

    ``order``: every emotion owns ``states`` latent micro-state prototypes,
    each a set of ``positions`` local feature means. The average over
    positions of a prototype is a small state vector of scale
    ``mean_signal``, so the state sequence is only faintly visible once the
    spatial layout is averaged away. Real videos cycle through the states in one order,
    fake videos in the reverse order, so single frames are identically
    distributed in both classes.

    ``cooccurrence``: features are isotropic noise plus, for a few emotion
    specific index pairs ``(i, j)``, a shared latent that enters ``i`` and
    ``j`` with equal sign (real) or opposite sign (fake). Only products of
    features carry the label.
    """

    task: str = "order"
    seed: int = 0
    videos_per_class: int = 25
    frames: int = 90
    positions: int = 9
    dim: int = 16
    states: int = 4
    dwell: int = 4
    noise: float = 0.3
    mean_signal: float = 0.05
    subjects: int = 50
    subject_scale: float = 0.5
    pairs: int = 4
    pair_scale: float = 1.0
    fps: float = 100.0
    interval_frames: int = 15

    def validate(self) -> None:
        if self.task not in ("order", "cooccurrence"):
            raise InvalidSpec(f"unknown synthetic task {self.task!r}")
        if self.frames < self.interval_frames:
            raise InvalidSpec(
                f"frames={self.frames} is shorter than one interval (K*T={self.interval_frames}); "
                f"every video would raise VideoTooShort")
        if min(self.videos_per_class, self.positions, self.dim, self.subjects) < 1:
            raise InvalidSpec("counts and dimensions must be positive")
        if self.task == "order" and (self.states < 2 or self.dwell < 1):
            raise InvalidSpec("order task needs at least 2 states and dwell >= 1")
        if self.task == "cooccurrence" and 2 * self.pairs > self.dim:
            raise InvalidSpec("cooccurrence task needs 2*pairs <= dim")
        if self.noise < 0 or self.fps <= 0:
            raise InvalidSpec("noise must be >= 0 and fps > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _split_for(index: int, n: int) -> str:
    n_train, n_val = int(0.8 * n), int(0.1 * n)
    if index < n_train:
        return "train"
    return "val" if index < n_train + n_val else "test"


def state_schedule(n_frames: int, order: Sequence[int], dwell: int, phase: int) -> np.ndarray:
    """Latent state index of every frame for a cyclic schedule."""
    order = np.asarray(order)
    return order[((np.arange(n_frames) + phase) // dwell) % len(order)]


def synthesize(spec: SynthSpec) -> list[tuple[ManifestEntry, LocalFeatureSequence]]:
    """Generate the corpus in memory; values are rounded to float32 as on disk."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    subject_offsets = spec.subject_scale * rng.standard_normal((spec.subjects, spec.positions, spec.dim))
    out = []
    for emotion in EMOTIONS:
        if spec.task == "order":
            protos = rng.standard_normal((spec.states, spec.positions, spec.dim))
            protos -= protos.mean(axis=1, keepdims=True)
            protos += spec.mean_signal * rng.standard_normal((spec.states, 1, spec.dim))
        else:
            idx = rng.permutation(spec.dim)[: 2 * spec.pairs].reshape(spec.pairs, 2)
        for label in LABELS:
            perm = rng.permutation(spec.videos_per_class)
            for k in range(spec.videos_per_class):
                subj = int(rng.integers(spec.subjects))
                noise = spec.noise * rng.standard_normal((spec.frames, spec.positions, spec.dim))
                if spec.task == "order":
                    order = np.arange(spec.states) if label == "real" else np.arange(spec.states)[::-1]
                    phase = int(rng.integers(spec.states * spec.dwell))
                    frames = protos[state_schedule(spec.frames, order, spec.dwell, phase)] + noise
                else:
                    frames = noise
                    z = spec.pair_scale * rng.standard_normal((spec.frames, spec.positions, spec.pairs))
                    sign = 1.0 if label == "real" else -1.0
                    frames[..., idx[:, 0]] += z
                    frames[..., idx[:, 1]] += sign * z
                frames = (frames + subject_offsets[subj]).astype(np.float32).astype(np.float64)
                vid = f"{emotion}_{label}_{k:04d}"
                entry = ManifestEntry(vid, f"S{subj:03d}", emotion, label, float(spec.fps),
                                      f"features/{vid}.rfex", _split_for(int(perm[k]), spec.videos_per_class))
                out.append((entry, LocalFeatureSequence(vid, entry.subject_id, emotion, label,
                                                        float(spec.fps), frames)))
    return out


def generate_synthetic(spec: SynthSpec, out_dir) -> Manifest:
    """Write feature files plus ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    items = synthesize(spec)
    for entry, seq in items:
        write_features(seq, out_dir / entry.path)
    manifest = Manifest([e for e, _ in items], root=out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
