"""Embedding data model, synthetic identities, null-embedding corruption and dataset files.

A dataset is held column-wise (one row per clip, face and voice matrices side by
side) so the fusion networks can run over it in a single matrix product. Single
samples are materialised as :class:`PairedSample` on indexing.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from ._io import atomic_write_text, canonical_json, fmt_vector
from .errors import (
    DimensionMismatch,
    InsufficientFrames,
    InvalidConfig,
    MalformedRecord,
    ZeroVector,
)

FACE_DIM = 512
VOICE_DIM = 600
FORMAT_VERSION = 1
ZERO_NORM = 1e-12
# Frame-level voice embeddings: 25 ms window, 10 ms hop.
FRAME_WINDOW_SEC = 0.025
FRAME_HOP_SEC = 0.010

Modality = Literal["face", "voice"]
MODALITIES = ("face", "voice")


@dataclass(frozen=True)
class EmbeddingRecord:
    identity_id: str
    clip_id: str
    frame_index: int
    modality: str
    vector: np.ndarray
    segment_length_sec: float = 0.0


@dataclass(frozen=True)
class PairedSample:
    identity_id: str
    clip_id: str
    face: np.ndarray
    voice: np.ndarray
    face_normalized: bool = True
    voice_normalized: bool = True
    frame_index: int = 0
    segment_length_sec: float = 0.0


@dataclass
class Dataset:
    """Paired face/voice embeddings, one row per clip."""

    identity_ids: list
    clip_ids: list
    face: np.ndarray
    voice: np.ndarray
    frame_index: np.ndarray = None
    segment_length_sec: np.ndarray = None
    face_normalized: np.ndarray = None
    voice_normalized: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.identity_ids)
        self.face = np.asarray(self.face, dtype=float)
        self.voice = np.asarray(self.voice, dtype=float)
        if self.face.ndim != 2 or self.voice.ndim != 2:
            raise DimensionMismatch("face and voice must be 2-d arrays")
        if len(self.clip_ids) != n or self.face.shape[0] != n or self.voice.shape[0] != n:
            raise DimensionMismatch("column lengths disagree")
        if self.frame_index is None:
            self.frame_index = np.zeros(n, dtype=np.int64)
        if self.segment_length_sec is None:
            self.segment_length_sec = np.zeros(n)
        if self.face_normalized is None:
            self.face_normalized = np.ones(n, dtype=bool)
        if self.voice_normalized is None:
            self.voice_normalized = np.ones(n, dtype=bool)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        self.segment_length_sec = np.asarray(self.segment_length_sec, dtype=float)
        self.face_normalized = np.asarray(self.face_normalized, dtype=bool)
        self.voice_normalized = np.asarray(self.voice_normalized, dtype=bool)

    def __len__(self):
        return len(self.identity_ids)

    def __getitem__(self, i):
        return PairedSample(
            identity_id=self.identity_ids[i],
            clip_id=self.clip_ids[i],
            face=self.face[i],
            voice=self.voice[i],
            face_normalized=bool(self.face_normalized[i]),
            voice_normalized=bool(self.voice_normalized[i]),
            frame_index=int(self.frame_index[i]),
            segment_length_sec=float(self.segment_length_sec[i]),
        )

    @property
    def face_dim(self):
        return self.face.shape[1]

    @property
    def voice_dim(self):
        return self.voice.shape[1]

    def modality(self, name):
        if name == "face":
            return self.face
        if name == "voice":
            return self.voice
        raise ValueError(f"unknown modality {name!r}")

    def copy(self):
        return Dataset(
            identity_ids=list(self.identity_ids),
            clip_ids=list(self.clip_ids),
            face=self.face.copy(),
            voice=self.voice.copy(),
            frame_index=self.frame_index.copy(),
            segment_length_sec=self.segment_length_sec.copy(),
            face_normalized=self.face_normalized.copy(),
            voice_normalized=self.voice_normalized.copy(),
            meta=dict(self.meta),
        )

    def identity_groups(self):
        """Map identity -> {clip_id: [row indices]} preserving first-appearance order."""
        groups = {}
        for i, (ident, clip) in enumerate(zip(self.identity_ids, self.clip_ids)):
            groups.setdefault(ident, {}).setdefault(clip, []).append(i)
        return groups

    def equals(self, other):
        return (
            self.identity_ids == other.identity_ids
            and self.clip_ids == other.clip_ids
            and np.array_equal(self.face, other.face)
            and np.array_equal(self.voice, other.voice)
            and np.array_equal(self.frame_index, other.frame_index)
            and np.array_equal(self.segment_length_sec, other.segment_length_sec)
            and np.array_equal(self.face_normalized, other.face_normalized)
            and np.array_equal(self.voice_normalized, other.voice_normalized)
        )

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        return cls(
            identity_ids=[s.identity_id for s in samples],
            clip_ids=[s.clip_id for s in samples],
            face=np.stack([s.face for s in samples]),
            voice=np.stack([s.voice for s in samples]),
            frame_index=[s.frame_index for s in samples],
            segment_length_sec=[s.segment_length_sec for s in samples],
            face_normalized=[s.face_normalized for s in samples],
            voice_normalized=[s.voice_normalized for s in samples],
        )


def l2_normalize(v):
    """Scale `v` to unit Euclidean length. Raises ZeroVector for (near) zero input."""
    v = np.asarray(v, dtype=float)
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ValueError("vector must be non-empty and finite")
    norm = np.linalg.norm(v)
    if norm < ZERO_NORM:
        raise ZeroVector("cannot normalise a zero vector")
    return v / norm


def l2_normalize_rows(m):
    m = np.asarray(m, dtype=float)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms < ZERO_NORM):
        raise ZeroVector("cannot normalise a zero row")
    return m / norms


def average_voice_window(frames, window):
    """Entrywise mean of the first `window` frame-level voice embeddings."""
    if window < 1:
        raise ValueError("window must be >= 1")
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 2:
        raise ValueError("frames must be a sequence of equal-length vectors")
    if frames.shape[0] < window:
        raise InsufficientFrames(f"need {window} frames, got {frames.shape[0]}")
    return frames[:window].mean(axis=0)


def window_span_sec(window):
    """Audio duration covered by `window` successive frames (10 -> 0.115 s, 100 -> 1.015 s)."""
    return FRAME_WINDOW_SEC + FRAME_HOP_SEC * (window - 1)


@dataclass(frozen=True)
class SyntheticConfig:
    """Spherical-cluster stand-in for real face/voice embeddings.

    `noise_stream` selects an independent draw of clip noise around the same
    identity prototypes, so stream 0 and stream 1 give disjoint clips of the
    same people (train vs test).
    """

    n_identities: int = 50
    clips_per_identity: int = 10
    face_noise_sigma: float = 0.1
    voice_noise_sigma: float = 0.4
    seed: int = 0
    noise_stream: int = 0
    segment_length_sec: float = 0.115
    face_dim: int = FACE_DIM
    voice_dim: int = VOICE_DIM

    def validate(self):
        for name in ("face_noise_sigma", "voice_noise_sigma", "segment_length_sec"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                raise InvalidConfig(f"{name} must be finite and >= 0, got {value!r}")
        if self.n_identities < 2:
            raise InvalidConfig(f"n_identities must be >= 2, got {self.n_identities}")
        if self.clips_per_identity < 2:
            raise InvalidConfig(f"clips_per_identity must be >= 2, got {self.clips_per_identity}")
        if (self.face_dim, self.voice_dim) != (FACE_DIM, VOICE_DIM):
            raise InvalidConfig("face_dim/voice_dim are fixed at 512/600")
        if not 0 <= self.seed < 2**64 or not 0 <= self.noise_stream < 2**32:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _unit_rows(rng, n, dim):
    g = rng.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def generate_synthetic(config):
    config.validate()
    n, k = config.n_identities, config.clips_per_identity
    proto_rng = _rng(config.seed, 0)
    face_protos = _unit_rows(proto_rng, n, config.face_dim)
    voice_protos = _unit_rows(proto_rng, n, config.voice_dim)

    noise_rng = _rng(config.seed, 1, config.noise_stream)
    face = np.repeat(face_protos, k, axis=0)
    voice = np.repeat(voice_protos, k, axis=0)
    face = face + config.face_noise_sigma * noise_rng.standard_normal(face.shape)
    voice = voice + config.voice_noise_sigma * noise_rng.standard_normal(voice.shape)

    ids = [f"id{i:04d}" for i in range(n) for _ in range(k)]
    clips = [f"id{i:04d}-n{config.noise_stream}-c{j:03d}" for i in range(n) for j in range(k)]
    return Dataset(
        identity_ids=ids,
        clip_ids=clips,
        face=l2_normalize_rows(face),
        voice=l2_normalize_rows(voice),
        segment_length_sec=np.full(n * k, config.segment_length_sec),
    )


@dataclass(frozen=True)
class CorruptionSpec:
    target_modality: str = "voice"
    mode: str = "random_standard_normal"
    fraction: float = 1.0
    seed: int = 0
    renormalize: bool = False

    def validate(self):
        if self.target_modality not in MODALITIES:
            raise InvalidConfig(f"target_modality must be face or voice, got {self.target_modality!r}")
        if self.mode not in ("random_standard_normal", "zeros"):
            raise InvalidConfig(f"mode must be random_standard_normal or zeros, got {self.mode!r}")
        if not (0.0 <= self.fraction <= 1.0):
            raise InvalidConfig(f"fraction must lie in [0, 1], got {self.fraction!r}")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")


def corrupted_indices(n, spec):
    """Sorted row indices `corrupt` replaces for a dataset of `n` rows."""
    spec.validate()
    count = round(spec.fraction * n)
    rng = _rng(spec.seed, 2)
    return np.sort(rng.choice(n, size=count, replace=False))


def corrupt(dataset, spec):
    """Replace the target modality on a seeded subset of rows with a null embedding.

    By default replacements are left un-normalised: noise rows have norm near
    sqrt(dim) and their `*_normalized` flag is cleared. With ``renormalize=True``
    noise rows are scaled to unit length like every clean embedding, so only
    their direction is off-manifold. Zero rows always stay zero.
    """
    out = dataset.copy()
    idx = corrupted_indices(len(dataset), spec)
    if idx.size == 0:
        return out
    target = out.modality(spec.target_modality)
    if spec.mode == "zeros":
        target[idx] = 0.0
    else:
        rng = _rng(spec.seed, 3)
        noise = rng.standard_normal((idx.size, target.shape[1]))
        target[idx] = l2_normalize_rows(noise) if spec.renormalize else noise
    flags = out.face_normalized if spec.target_modality == "face" else out.voice_normalized
    flags[idx] = spec.renormalize and spec.mode != "zeros"
    return out


# -- dataset files -------------------------------------------------------------


def _record_line(ident, clip, frame, modality, seg, vector, normalized):
    head = json.dumps(
        {
            "identity_id": ident,
            "clip_id": clip,
            "frame_index": int(frame),
            "modality": modality,
            "segment_length_sec": float(seg),
            "normalized": bool(normalized),
        }
    )
    return head[:-1] + ', "vector": ' + fmt_vector(vector) + "}"


def format_dataset(dataset, manifest=None):
    if not (np.all(np.isfinite(dataset.face)) and np.all(np.isfinite(dataset.voice))):
        raise ValueError("dataset contains non-finite entries")
    header = {"format_version": FORMAT_VERSION, "face_dim": dataset.face_dim, "voice_dim": dataset.voice_dim}
    if manifest is not None:
        header["manifest"] = manifest
    lines = [canonical_json(header)]
    for i in range(len(dataset)):
        ident, clip, frame = dataset.identity_ids[i], dataset.clip_ids[i], dataset.frame_index[i]
        lines.append(_record_line(ident, clip, frame, "face", 0.0, dataset.face[i], dataset.face_normalized[i]))
        lines.append(
            _record_line(
                ident, clip, frame, "voice", dataset.segment_length_sec[i], dataset.voice[i], dataset.voice_normalized[i]
            )
        )
    return "\n".join(lines) + "\n"


def write_dataset(dataset, path, manifest=None):
    atomic_write_text(path, format_dataset(dataset, manifest))


_REQUIRED = ("identity_id", "clip_id", "frame_index", "modality", "segment_length_sec", "vector")


def read_dataset(path):
    """Load a dataset file, pairing face and voice records by (identity, clip, frame)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MalformedRecord(1, "empty file, expected header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedRecord(1, f"bad header: {exc}") from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise MalformedRecord(1, "header must declare format_version 1")
    try:
        dims = {"face": int(header["face_dim"]), "voice": int(header["voice_dim"])}
    except (KeyError, TypeError, ValueError):
        raise MalformedRecord(1, "header must declare integer face_dim and voice_dim") from None

    order = []
    rows = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(line_no, str(exc)) from None
        if not isinstance(rec, dict) or any(k not in rec for k in _REQUIRED):
            raise MalformedRecord(line_no, f"record must carry {', '.join(_REQUIRED)}")
        modality = rec["modality"]
        if modality not in MODALITIES:
            raise MalformedRecord(line_no, f"unknown modality {modality!r}")
        try:
            vec = np.asarray(rec["vector"], dtype=float)
        except (TypeError, ValueError):
            raise MalformedRecord(line_no, "vector must be a list of numbers") from None
        if vec.ndim != 1:
            raise MalformedRecord(line_no, "vector must be flat")
        if vec.size != dims[modality]:
            raise DimensionMismatch(
                f"line {line_no}: {modality} vector has {vec.size} entries, header declares {dims[modality]}"
            )
        if not np.all(np.isfinite(vec)):
            raise MalformedRecord(line_no, "vector has non-finite entries")
        key = (rec["identity_id"], rec["clip_id"], int(rec["frame_index"]))
        slot = rows.get(key)
        if slot is None:
            slot = rows[key] = {}
            order.append(key)
        if modality in slot:
            raise MalformedRecord(line_no, f"duplicate {modality} record for {key}")
        slot[modality] = (vec, bool(rec.get("normalized", True)), float(rec["segment_length_sec"]), line_no)

    for key in order:
        missing = [m for m in MODALITIES if m not in rows[key]]
        if missing:
            raise MalformedRecord(
                next(iter(rows[key].values()))[3], f"clip {key[1]} lacks a {missing[0]} record"
            )
    n = len(order)
    face = np.empty((n, dims["face"]))
    voice = np.empty((n, dims["voice"]))
    for i, key in enumerate(order):
        face[i] = rows[key]["face"][0]
        voice[i] = rows[key]["voice"][0]
    return Dataset(
        identity_ids=[k[0] for k in order],
        clip_ids=[k[1] for k in order],
        face=face,
        voice=voice,
        frame_index=[k[2] for k in order],
        segment_length_sec=[rows[k]["voice"][2] for k in order],
        face_normalized=[rows[k]["face"][1] for k in order],
        voice_normalized=[rows[k]["voice"][1] for k in order],
        meta={"header": header},
    )


def records(dataset):
    """Yield the dataset as per-modality EmbeddingRecords (face then voice per clip)."""
    for i in range(len(dataset)):
        s = dataset[i]
        yield EmbeddingRecord(s.identity_id, s.clip_id, s.frame_index, "face", s.face, 0.0)
        yield EmbeddingRecord(s.identity_id, s.clip_id, s.frame_index, "voice", s.voice, s.segment_length_sec)


__all__ = [
    "FACE_DIM",
    "VOICE_DIM",
    "CorruptionSpec",
    "Dataset",
    "EmbeddingRecord",
    "PairedSample",
    "SyntheticConfig",
    "average_voice_window",
    "corrupt",
    "corrupted_indices",
    "generate_synthetic",
    "l2_normalize",
    "l2_normalize_rows",
    "read_dataset",
    "records",
    "window_span_sec",
    "write_dataset",
]
