"""Annotations, pose files, embedding binaries, windowing and synthetic data."""

from __future__ import annotations

import csv
import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .geometry import N_JOINTS, KeypointSet
from .metrics import EXPR_SENTINEL, N_EXPR_CLASSES, VA_SENTINEL

EMBD_MAGIC = b"EMBD"
EMBD_VERSION = 1
_EMBD_HEADER = struct.Struct("<4sIIIII")  # magic, version, frames, dim, first_frame, reserved


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    expr_label: int = EXPR_SENTINEL
    valence: float = VA_SENTINEL
    arousal: float = VA_SENTINEL

    @property
    def has_expr(self) -> bool:
        return self.expr_label != EXPR_SENTINEL

    @property
    def has_va(self) -> bool:
        return self.valence != VA_SENTINEL and self.arousal != VA_SENTINEL


# ---------------------------------------------------------------- pose JSON

_FRAME_NO = re.compile(r"(\d+)(?!.*\d)")


def _frame_from_name(path: Path, fallback: int) -> int:
    m = _FRAME_NO.search(path.stem)
    return int(m.group(1)) if m else fallback


def _keypoints_from_doc(doc, frame_index: int) -> Optional[KeypointSet]:
    if isinstance(doc, dict) and "people" in doc:
        people = doc["people"]
        if not people:
            return None
        flat = people[0].get("pose_keypoints_2d")
    elif isinstance(doc, dict) and "keypoints" in doc:
        flat = doc["keypoints"]
    else:
        flat = doc
    if flat is None or len(flat) == 0:
        return None
    if not isinstance(flat, list) or len(flat) != 3 * N_JOINTS:
        n = len(flat) if isinstance(flat, list) else type(flat).__name__
        raise DataError(f"expected {3 * N_JOINTS} keypoint values, got {n}", frame_index)
    try:
        return KeypointSet.from_flat(flat, frame_index)
    except (TypeError, ValueError) as exc:
        raise DataError(str(exc), frame_index) from exc


def parse_pose_json(path) -> list[Optional[KeypointSet]]:
    """Read per-frame BODY25 pose documents.

    ``path`` is either a directory of per-frame JSON files (frame number taken
    from the last digit group of each file name, as OpenPose writes them) or a
    single file holding one document, or a JSON list of documents indexed by
    frame. A document is an OpenPose ``{"people": [...]}`` object (first person
    is the primary agent), ``{"keypoints": [...]}``, or a bare 75-number list.

    Returns a list indexed by frame; frames without a detection are ``None``.
    """
    path = Path(path)
    docs: dict[int, object] = {}
    if path.is_dir():
        for k, f in enumerate(sorted(path.glob("*.json"))):
            idx = _frame_from_name(f, k)
            docs[idx] = _load_json(f, idx)
    elif path.is_file():
        doc = _load_json(path, None)
        if isinstance(doc, list) and doc and not isinstance(doc[0], (int, float)):
            docs = dict(enumerate(doc))
        else:
            docs[_frame_from_name(path, 0)] = doc
    else:
        raise DataError(f"{path}: no such file or directory")
    if not docs:
        return []
    out: list[Optional[KeypointSet]] = [None] * (max(docs) + 1)
    for idx, doc in docs.items():
        out[idx] = _keypoints_from_doc(doc, idx)
    return out


def _load_json(path: Path, frame_index):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})", frame_index) from exc


def pose_document(kps: Optional[KeypointSet]) -> dict:
    people = [] if kps is None else [{"pose_keypoints_2d": kps.to_flat()}]
    return {"version": 1.3, "people": people}


def write_pose_json(directory, frames: Sequence[Optional[KeypointSet]], prefix="frame") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for idx, kps in enumerate(frames):
        (directory / f"{prefix}_{idx:012d}_keypoints.json").write_text(json.dumps(pose_document(kps)))


# ---------------------------------------------------------------- annotation CSV


def read_label_csv(path, task: str) -> tuple[list[FrameRecord], Optional[np.ndarray]]:
    """Read an annotation/prediction CSV.

    Expression files have columns ``frame_index,expr`` optionally followed by
    probability columns ``p0..p6``; VA files have ``frame_index,valence,arousal``.
    Returns the records and, if present, the (N, C) probability matrix.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    want = ["frame_index", "expr"] if task == "expr" else ["frame_index", "valence", "arousal"]
    if header[: len(want)] != want:
        raise DataError(f"{path}: header must start with {','.join(want)}, got {','.join(header)}")
    prob_cols = [i for i, h in enumerate(header) if re.fullmatch(r"p\d+", h)]
    records, probs = [], []
    for lineno, row in enumerate(rows, 2):
        try:
            idx = int(row[0])
            if task == "expr":
                label = int(row[1])
                if label != EXPR_SENTINEL and not 0 <= label < N_EXPR_CLASSES:
                    raise ValueError(f"expression label {label} out of range")
                records.append(FrameRecord(idx, expr_label=label))
            else:
                v, a = float(row[1]), float(row[2])
                for val in (v, a):
                    if val != VA_SENTINEL and not -1.0 <= val <= 1.0:
                        raise ValueError(f"VA value {val} out of [-1, 1]")
                records.append(FrameRecord(idx, valence=v, arousal=a))
            if prob_cols:
                probs.append([float(row[i]) for i in prob_cols])
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records, (np.array(probs) if prob_cols else None)


def write_label_csv(path, records: Sequence[FrameRecord], task: str, probs=None) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        if task == "expr":
            extra = [] if probs is None else [f"p{k}" for k in range(np.shape(probs)[1])]
            writer.writerow(["frame_index", "expr"] + extra)
            for i, r in enumerate(records):
                row = [r.frame_index, r.expr_label]
                if probs is not None:
                    row += [repr(float(p)) for p in probs[i]]
                writer.writerow(row)
        else:
            writer.writerow(["frame_index", "valence", "arousal"])
            for r in records:
                writer.writerow([r.frame_index, repr(float(r.valence)), repr(float(r.arousal))])


def records_to_arrays(records: Sequence[FrameRecord]):
    """(frame_index, expr labels, (N, 2) valence/arousal) arrays."""
    idx = np.array([r.frame_index for r in records], dtype=np.int64)
    expr = np.array([r.expr_label for r in records], dtype=np.int64)
    va = np.array([[r.valence, r.arousal] for r in records], dtype=np.float64).reshape(-1, 2)
    return idx, expr, va


def arrays_to_records(frame_index, expr=None, va=None) -> list[FrameRecord]:
    out = []
    for k, idx in enumerate(frame_index):
        kw = {}
        if expr is not None:
            kw["expr_label"] = int(expr[k])
        if va is not None:
            kw["valence"], kw["arousal"] = float(va[k][0]), float(va[k][1])
        out.append(FrameRecord(int(idx), **kw))
    return out


# ---------------------------------------------------------------- EMBD binaries


def write_embd(path, features: np.ndarray, first_frame: int = 0) -> None:
    """Per-frame embeddings, row-major float32; absent frames are NaN rows."""
    features = np.asarray(features)
    frames, dim = features.shape
    with open(path, "wb") as f:
        f.write(_EMBD_HEADER.pack(EMBD_MAGIC, EMBD_VERSION, frames, dim, first_frame, 0))
        f.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_embd(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, "rb") as f:
        head = f.read(_EMBD_HEADER.size)
        if len(head) != _EMBD_HEADER.size:
            raise DataError(f"{path}: truncated header")
        magic, version, frames, dim, first, _ = _EMBD_HEADER.unpack(head)
        if magic != EMBD_MAGIC or version != EMBD_VERSION:
            raise DataError(f"{path}: not an EMBD v{EMBD_VERSION} file")
        body = np.frombuffer(f.read(), dtype="<f4")
    if body.size != frames * dim:
        raise DataError(f"{path}: expected {frames * dim} values, found {body.size}")
    return body.reshape(frames, dim).astype(np.float64), first


class EmbeddingProvider:
    """Per-frame feature vectors for one stream; ``None`` marks an absent frame."""

    dim: int

    def get(self, frame_index: int) -> Optional[np.ndarray]:
        raise NotImplementedError


class FileEmbeddingProvider(EmbeddingProvider):
    def __init__(self, path):
        self.features, self.first_frame = read_embd(path)
        self.dim = self.features.shape[1]

    def get(self, frame_index):
        k = frame_index - self.first_frame
        if not 0 <= k < self.features.shape[0]:
            return None
        row = self.features[k]
        return None if np.isnan(row).any() else row.copy()


class SyntheticEmbeddingProvider(EmbeddingProvider):
    """Seeded stand-in for a CNN backbone: a fixed vector per frame, optionally dropping frames."""

    def __init__(self, dim: int, seed: int = 0, missing_rate: float = 0.0):
        self.dim, self.seed, self.missing_rate = dim, seed, missing_rate

    def get(self, frame_index):
        rng = np.random.default_rng([self.seed, frame_index])
        if self.missing_rate and rng.random() < self.missing_rate:
            return None
        return rng.standard_normal(self.dim)


# ---------------------------------------------------------------- windows


@dataclass
class SequenceWindow:
    features: np.ndarray  # (T, d_in)
    expr: np.ndarray  # (T,) int, -1 = unannotated
    va: np.ndarray  # (T, 2), -5 = unannotated
    valid_mask: np.ndarray  # (T,) bool, False on padding
    frame_index: np.ndarray  # (T,)
    video_id: str = ""

    @property
    def labels(self) -> list[FrameRecord]:
        return arrays_to_records(self.frame_index, self.expr, self.va)


@dataclass
class Batch:
    features: np.ndarray  # (B, T, d_in)
    expr: np.ndarray  # (B, T)
    va: np.ndarray  # (B, T, 2)
    valid: np.ndarray  # (B, T)

    @property
    def expr_mask(self) -> np.ndarray:
        return self.valid & (self.expr != EXPR_SENTINEL)

    @property
    def va_mask(self) -> np.ndarray:
        return self.valid & np.all(self.va != VA_SENTINEL, axis=-1)


def stack_windows(windows: Sequence[SequenceWindow]) -> Batch:
    return Batch(
        features=np.stack([w.features for w in windows]),
        expr=np.stack([w.expr for w in windows]),
        va=np.stack([w.va for w in windows]),
        valid=np.stack([w.valid_mask for w in windows]),
    )


def make_windows(features, records: Sequence[FrameRecord], T: int = 64, stride: int = 64, video_id: str = "") -> list[SequenceWindow]:
    """Cut a video into length-``T`` windows, one starting at every multiple of ``stride`` below N.

    Windows running past the end are padded by repeating the last frame, with
    ``valid_mask`` False on the padding. When ``stride > T`` frames between
    windows are skipped.
    """
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if len(records) != n:
        raise ValueError(f"{n} feature rows but {len(records)} label records")
    idx, expr, va = records_to_arrays(records)
    windows = []
    for start in range(0, n, stride):
        span = np.arange(start, start + T)
        take = span.clip(max=n - 1)
        windows.append(SequenceWindow(features[take], expr[take], va[take], span < n, idx[take], video_id))
    return windows


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthDataset:
    task: str
    video_ids: list[str]
    features: list[np.ndarray]  # per video (N, d_in)
    records: list[list[FrameRecord]]
    class_means: Optional[np.ndarray] = None  # expr: (C, d_in)
    lift: Optional[np.ndarray] = None  # va: (2, d_in)
    lift_bias: Optional[np.ndarray] = None

    def windows(self, T: int = 64, stride: int = 64, videos=None) -> list[SequenceWindow]:
        out = []
        for k, vid in enumerate(self.video_ids):
            if videos is None or vid in videos:
                out += make_windows(self.features[k], self.records[k], T, stride, vid)
        return out


# Class means have this norm; random directions in d >= 16 are nearly orthogonal,
# so classes sit about 1.41 * EXPR_MEAN_NORM apart, well below the per-frame
# noise norm 0.5 * sqrt(d) but resolvable after averaging a few frames.
EXPR_MEAN_NORM = 0.9
EXPR_RUN_RANGE = (24, 80)
VA_STEP_SIGMA = 0.35
VA_SMOOTH = 8


def synth_dataset(
    seed: int,
    n_videos: int,
    frames_per_video: int,
    task: str,
    dim: int = 32,
    noise: Optional[float] = None,
    n_classes: int = N_EXPR_CLASSES,
) -> SynthDataset:
    """Deterministic desk-scale stand-in for annotated video features.

    Expression: each video is a sequence of class runs; a frame's feature is its
    class mean plus Gaussian noise (sigma 0.5 by default). Per-frame evidence is
    weak, a few-frame moving average is strong.

    VA: valence/arousal follow a smoothed random walk clipped to [-1, 1]; a
    frame's feature is a fixed random linear lift of (v, a) plus noise
    (sigma 0.1 by default).
    """
    if n_videos < 1 or frames_per_video < 1 or dim < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    ids = [f"video{k:03d}" for k in range(n_videos)]
    feats, recs = [], []
    if task == "expr":
        sigma = 0.5 if noise is None else noise
        means = rng.standard_normal((n_classes, dim))
        means *= EXPR_MEAN_NORM / np.linalg.norm(means, axis=1, keepdims=True)
        for _ in ids:
            labels = np.empty(frames_per_video, dtype=np.int64)
            pos, prev = 0, -1
            while pos < frames_per_video:
                run = int(rng.integers(EXPR_RUN_RANGE[0], EXPR_RUN_RANGE[1] + 1))
                if prev < 0:
                    c = int(rng.integers(n_classes))
                else:  # never repeat the previous class
                    c = int(rng.integers(n_classes - 1))
                    c += c >= prev
                labels[pos: pos + run] = c
                pos, prev = pos + run, c
            x = means[labels] + sigma * rng.standard_normal((frames_per_video, dim))
            feats.append(x)
            recs.append([FrameRecord(t, expr_label=int(c)) for t, c in enumerate(labels)])
        return SynthDataset(task, ids, feats, recs, class_means=means)
    if task == "va":
        sigma = 0.1 if noise is None else noise
        lift = rng.standard_normal((2, dim)) / np.sqrt(2)
        bias = 0.1 * rng.standard_normal(dim)
        kernel = np.ones(VA_SMOOTH) / VA_SMOOTH
        for _ in ids:
            steps = VA_STEP_SIGMA * rng.standard_normal((frames_per_video + VA_SMOOTH - 1, 2))
            walk = np.zeros_like(steps)
            walk[0] = rng.uniform(-0.5, 0.5, 2)
            for t in range(1, walk.shape[0]):  # reflect-free clipped walk
                walk[t] = np.clip(walk[t - 1] + 0.25 * steps[t], -1.0, 1.0)
            va = np.stack([np.convolve(walk[:, k], kernel, mode="valid") for k in range(2)], axis=1)
            va = np.clip(va, -1.0, 1.0)
            x = va @ lift + bias + sigma * rng.standard_normal((frames_per_video, dim))
            feats.append(x)
            recs.append([FrameRecord(t, valence=float(v), arousal=float(a)) for t, (v, a) in enumerate(va)])
        return SynthDataset(task, ids, feats, recs, lift=lift, lift_bias=bias)
    raise ValueError(f"unknown task {task!r}")


def synth_embedding_table(seed: int, n_classes: int = N_EXPR_CLASSES, dim: int = 300):
    """Seeded unit-norm label vectors standing in for GloVe."""
    from .losses import EXPR_CLASS_NAMES, EmbeddingTable

    rng = np.random.default_rng([seed, 7919])
    vecs = rng.standard_normal((n_classes, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    names = EXPR_CLASS_NAMES[:n_classes] if n_classes <= len(EXPR_CLASS_NAMES) else [f"class{k}" for k in range(n_classes)]
    return EmbeddingTable(list(names), vecs)


def shuffle_frames(ds: SynthDataset, seed: int) -> SynthDataset:
    """Control dataset: frames permuted within each video, labels travelling with them."""
    rng = np.random.default_rng([seed, 104729])
    feats, recs = [], []
    for x, r in zip(ds.features, ds.records):
        perm = rng.permutation(x.shape[0])
        feats.append(x[perm])
        recs.append([FrameRecord(t, r[p].expr_label, r[p].valence, r[p].arousal) for t, p in enumerate(perm)])
    return SynthDataset(ds.task, list(ds.video_ids), feats, recs, ds.class_means, ds.lift, ds.lift_bias)


def save_dataset(directory, ds: SynthDataset, videos=None) -> None:
    """Write ``<video>.embd`` + ``<video>.csv`` pairs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for vid, x, r in zip(ds.video_ids, ds.features, ds.records):
        if videos is not None and vid not in videos:
            continue
        write_embd(directory / f"{vid}.embd", x)
        write_label_csv(directory / f"{vid}.csv", r, ds.task)


def load_dataset(directory, task: str) -> SynthDataset:
    """Read a directory of ``<video>.embd`` / ``<video>.csv`` pairs.

    EMBD features are float32 on disk, so a round trip through files is not
    bit-exact with an in-memory synthetic dataset.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: no such directory")
    ids, feats, recs = [], [], []
    for embd in sorted(directory.glob("*.embd")):
        x, first = read_embd(embd)
        records, _ = read_label_csv(embd.with_suffix(".csv"), task)
        if len(records) != x.shape[0]:
            raise DataError(f"{embd.stem}: {x.shape[0]} feature rows but {len(records)} label rows")
        if np.isnan(x).any():
            raise DataError(f"{embd}: absent frames must be filled before training")
        ids.append(embd.stem)
        feats.append(x)
        recs.append(records)
    if not ids:
        raise DataError(f"{directory}: no .embd files")
    return SynthDataset(task, ids, feats, recs)
