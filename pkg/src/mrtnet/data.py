"""Annotation and feature I/O, sample preparation, and the synthetic corpus."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import ContractError
from .mrt import groundtruth_map, pyramid
from .predictor import time_to_index

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MRTF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class AnnotationError(ValueError):
    """An annotation line failed to parse or validate."""


class FeatureFormatError(OSError):
    """A feature file is malformed or truncated."""


@dataclass
class Annotation:
    video_id: str
    duration_sec: float
    start_sec: float
    end_sec: float
    query: list[str]

    def validate(self) -> None:
        if not self.query:
            raise ValueError("query is empty")
        if not 0.0 <= self.start_sec <= self.end_sec <= self.duration_sec:
            raise ValueError(
                f"span ({self.start_sec}, {self.end_sec}) outside [0, {self.duration_sec}] or inverted")

    def to_json(self) -> str:
        return json.dumps({"video_id": self.video_id, "duration": self.duration_sec,
                           "start": self.start_sec, "end": self.end_sec, "query": self.query})


def load_annotations(path: str | Path) -> list[Annotation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            try:
                ann = Annotation(str(row["video_id"]), float(row["duration"]), float(row["start"]),
                                 float(row["end"]), [str(t) for t in row["query"]])
                ann.validate()
            except (KeyError, TypeError, ValueError) as exc:
                raise AnnotationError(f"{path}:{lineno}: invalid annotation: {exc}") from exc
            out.append(ann)
    return out


def write_annotations(path: str | Path, annotations: Sequence[Annotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(ann.to_json() + "\n")


def write_features(path: str | Path, features: np.ndarray) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {arr.shape}")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def load_features(path: str | Path) -> np.ndarray:
    """Read an MRTF file and widen its float32 payload to float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: file shorter than header")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    need = n * d * 4
    payload = raw[_HEADER.size:]
    if len(payload) < need:
        raise FeatureFormatError(f"{path}: truncated payload, {len(payload)} of {need} bytes")
    return np.frombuffer(payload, dtype="<f4", count=n * d).reshape(n, d).astype(np.float64)


# ----------------------------------------------------------------- embeddings

def hash_embedding(token: str, dim: int) -> np.ndarray:
    """Fixed pseudo-random unit vector keyed by a hash of the token."""
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    vec = np.random.default_rng(seed).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Whitespace-separated ``token v1 ... vd`` lines."""
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            vec = np.array([float(v) for v in parts[1:]])
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
            table[parts[0]] = vec
    return table


def embed_query(tokens: Sequence[str], dim: int,
                table: dict[str, np.ndarray] | None = None) -> tuple[np.ndarray, int]:
    """Stack word vectors; returns the matrix and how many tokens missed ``table``."""
    rows, missing = [], 0
    for tok in tokens:
        if table is not None and tok in table:
            rows.append(table[tok])
        else:
            missing += table is not None
            rows.append(hash_embedding(tok, dim))
    return np.stack(rows), missing


# ------------------------------------------------------------------- samples

@dataclass
class Sample:
    video_id: str
    video: np.ndarray          # [n_model, d_v]
    video_mask: np.ndarray     # [n_model]
    query: np.ndarray          # [m, d_q]
    tokens: list[str]
    start_idx: int
    end_idx: int
    maps: list[np.ndarray]     # n/4, n/2, n
    n_valid: int
    duration_sec: float
    gt_sec: tuple[float, float]


def resample(features: np.ndarray, n_model: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Stride-sample down to ``n_model`` rows or zero-pad up to it."""
    n_raw, d = features.shape
    if n_raw >= n_model:
        idx = np.minimum(np.floor(np.arange(n_model) * n_raw / n_model + 0.5).astype(int), n_raw - 1)
        return features[idx].copy(), np.ones(n_model, dtype=bool), n_model
    out = np.zeros((n_model, d))
    out[:n_raw] = features
    mask = np.zeros(n_model, dtype=bool)
    mask[:n_raw] = True
    return out, mask, n_raw


def prepare(ann: Annotation, features: np.ndarray, n_model: int, query: np.ndarray) -> Sample:
    if n_model % 4:
        raise ContractError(f"n_model {n_model} must be divisible by 4")
    video, mask, n_valid = resample(np.asarray(features, dtype=np.float64), n_model)
    start = time_to_index(ann.start_sec, ann.duration_sec, n_valid)
    end = time_to_index(ann.end_sec, ann.duration_sec, n_valid)
    if end <= start and ann.end_sec > ann.start_sec:
        log.warning("%s: span (%.3f, %.3f) collapses to clip %d", ann.video_id,
                    ann.start_sec, ann.end_sec, start)
    end = max(start, end)
    maps = [m.scores for m in pyramid(groundtruth_map(start, end, n_model))]
    return Sample(ann.video_id, video, mask, np.asarray(query, dtype=np.float64), list(ann.query),
                  start, end, maps, n_valid, ann.duration_sec, (ann.start_sec, ann.end_sec))


def load_samples(annotations_path: str | Path, features_dir: str | Path, n_model: int, d_q: int,
                 embeddings: dict[str, np.ndarray] | None = None,
                 max_query_len: int | None = None) -> list[Sample]:
    features_dir = Path(features_dir)
    cache: dict[str, np.ndarray] = {}
    samples = []
    for ann in load_annotations(annotations_path):
        if ann.video_id not in cache:
            cache[ann.video_id] = load_features(features_dir / f"{ann.video_id}.mrtf")
        tokens = ann.query if max_query_len is None else ann.query[:max_query_len]
        query, _ = embed_query(tokens, d_q, embeddings)
        samples.append(prepare(ann, cache[ann.video_id], n_model, query))
    return samples


@dataclass
class Batch:
    video: np.ndarray        # [B, n, d_v]
    video_mask: np.ndarray   # [B, n]
    query: np.ndarray        # [B, m, d_q]
    query_mask: np.ndarray   # [B, m]
    start: np.ndarray
    end: np.ndarray
    maps: list[np.ndarray]   # each [B, W]
    samples: list[Sample] = field(repr=False, default_factory=list)


def collate(samples: Sequence[Sample]) -> Batch:
    m = max(s.query.shape[0] for s in samples)
    d_q = samples[0].query.shape[1]
    query = np.zeros((len(samples), m, d_q))
    qmask = np.zeros((len(samples), m), dtype=bool)
    for i, s in enumerate(samples):
        query[i, :s.query.shape[0]] = s.query
        qmask[i, :s.query.shape[0]] = True
    return Batch(
        np.stack([s.video for s in samples]),
        np.stack([s.video_mask for s in samples]),
        query, qmask,
        np.array([s.start_idx for s in samples]),
        np.array([s.end_idx for s in samples]),
        [np.stack([s.maps[k] for s in samples]) for k in range(3)],
        list(samples),
    )


# ----------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthSpec:
    num_samples: int = 32
    n: int = 64
    d_v: int = 64
    d_q: int = 300
    vocab_size: int = 32
    min_span_frac: float = 0.1
    max_span_frac: float = 0.5
    noise_std: float = 0.05
    seed: int = 7
    signal: float = 1.0

    def __post_init__(self):
        if not 0 < self.min_span_frac <= self.max_span_frac <= 1:
            raise ValueError("need 0 < min_span_frac <= max_span_frac <= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")


@dataclass
class Vocabulary:
    tokens: list[str]
    concept_dims: dict[str, int]

    @property
    def distractors(self) -> list[str]:
        return [t for t in self.tokens if t not in self.concept_dims]


def make_vocabulary(spec: SynthSpec) -> Vocabulary:
    num_concepts = max(1, min(spec.d_v, spec.vocab_size // 2))
    concepts = [f"c{i:03d}" for i in range(num_concepts)]
    others = [f"w{i:03d}" for i in range(spec.vocab_size - num_concepts)]
    return Vocabulary(concepts + others, {tok: i for i, tok in enumerate(concepts)})


def synth_record(spec: SynthSpec, vocab: Vocabulary, index: int) -> tuple[Annotation, np.ndarray]:
    """One annotation plus its float32-representable feature matrix."""
    rng = np.random.default_rng([spec.seed, index])
    concepts = list(vocab.concept_dims)
    concept = concepts[int(rng.integers(len(concepts)))]
    lo = max(1, math.ceil(spec.min_span_frac * spec.n))
    hi = max(lo, min(spec.n - 1, math.floor(spec.max_span_frac * spec.n)))
    length = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, spec.n - length))
    end = start + length
    feats = rng.normal(0.0, spec.noise_std, size=(spec.n, spec.d_v)) if spec.noise_std > 0 \
        else np.zeros((spec.n, spec.d_v))
    feats[start:end + 1, vocab.concept_dims[concept]] += spec.signal
    feats = feats.astype(np.float32).astype(np.float64)

    pool = vocab.distractors
    n_distract = int(rng.integers(2, 6)) if pool else 0
    words = [pool[int(j)] for j in rng.integers(len(pool), size=n_distract)] if pool else []
    words.insert(int(rng.integers(len(words) + 1)), concept)

    duration = round(float(rng.uniform(20.0, 40.0)), 2)
    ann = Annotation(f"synth{spec.seed}_{index:05d}", duration,
                     start / spec.n * duration, end / spec.n * duration, words)
    return ann, feats


def synth_corpus(spec: SynthSpec) -> tuple[list[Annotation], dict[str, np.ndarray], Vocabulary]:
    vocab = make_vocabulary(spec)
    anns, feats = [], {}
    for i in range(spec.num_samples):
        ann, f = synth_record(spec, vocab, i)
        anns.append(ann)
        feats[ann.video_id] = f
    return anns, feats, vocab


def generate_synthetic(spec: SynthSpec, n_model: int | None = None) -> tuple[list[Sample], Vocabulary]:
    anns, feats, vocab = synth_corpus(spec)
    n_model = spec.n if n_model is None else n_model
    samples = [prepare(a, feats[a.video_id], n_model, embed_query(a.query, spec.d_q)[0])
               for a in anns]
    return samples, vocab


def write_corpus(out_dir: str | Path, spec: SynthSpec, split: int | None = None) -> dict[str, Path]:
    """Write features, annotation file(s) and vocabulary; returns the paths."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    anns, feats, vocab = synth_corpus(spec)
    for vid, f in feats.items():
        write_features(feat_dir / f"{vid}.mrtf", f)
    paths = {"features": feat_dir}
    if split is None:
        paths["annotations"] = out_dir / "annotations.jsonl"
        write_annotations(paths["annotations"], anns)
    else:
        paths["train"] = out_dir / "train.jsonl"
        paths["test"] = out_dir / "test.jsonl"
        write_annotations(paths["train"], anns[:split])
        write_annotations(paths["test"], anns[split:])
    paths["vocab"] = out_dir / "vocab.txt"
    paths["vocab"].write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")
    return paths
