"""Early fusion of the visual streams and weighted-average ensembling of models."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .metrics import accuracy, ccc, expr_mask, macro_f1, total_expr, total_va, va_mask

STREAMS = ("face", "context", "body")
RESNET50_DIM = 2048


@dataclass(frozen=True)
class FusionDims:
    face: int = RESNET50_DIM
    context: int = RESNET50_DIM
    body: int = RESNET50_DIM

    @property
    def total(self) -> int:
        return self.face + self.context + self.body

    def spans(self) -> dict[str, slice]:
        """Where each stream lives in the fused vector; independent of which streams are present."""
        out, pos = {}, 0
        for name in STREAMS:
            d = getattr(self, name)
            out[name] = slice(pos, pos + d)
            pos += d
        return out


@dataclass
class StreamFeatures:
    face: Optional[np.ndarray] = None
    context: Optional[np.ndarray] = None
    body: Optional[np.ndarray] = None
    frame_index: int = 0


@dataclass
class FusedVector:
    values: np.ndarray
    presence: tuple[bool, bool, bool]


def fuse_streams(s: StreamFeatures, dims: FusionDims = FusionDims()) -> FusedVector:
    """Concatenate face, context and body features; a missing stream becomes zeros."""
    spans = dims.spans()
    values = np.zeros(dims.total)
    presence = []
    for name in STREAMS:
        vec = getattr(s, name)
        presence.append(vec is not None)
        if vec is None:
            continue
        vec = np.asarray(vec, dtype=np.float64)
        want = getattr(dims, name)
        if vec.shape != (want,):
            raise ValueError(f"{name} features have shape {vec.shape}, expected ({want},)")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"{name} features are not finite")
        values[spans[name]] = vec
    if not any(presence):
        raise DataError("no stream present", s.frame_index)
    return FusedVector(values, tuple(presence))


def fuse_providers(providers: dict, frame_indices: Sequence[int], dims: FusionDims) -> tuple[np.ndarray, np.ndarray]:
    """Fused (N, d) features and (N, 3) presence flags from per-stream embedding providers.

    Frames where every stream is absent are returned as all-zero rows with no
    presence; callers decide whether to drop them.
    """
    rows, present = [], []
    for idx in frame_indices:
        s = StreamFeatures(frame_index=idx, **{k: p.get(idx) for k, p in providers.items()})
        if s.face is None and s.context is None and s.body is None:
            rows.append(np.zeros(dims.total))
            present.append((False, False, False))
            continue
        fv = fuse_streams(s, dims)
        rows.append(fv.values)
        present.append(fv.presence)
    return np.array(rows).reshape(-1, dims.total), np.array(present, dtype=bool).reshape(-1, 3)


@dataclass
class EnsembleSpec:
    members: list[str]
    weights: list[float]
    task: str
    validation_total: Optional[float] = None

    def __post_init__(self):
        if self.task not in ("expr", "va"):
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.weights) != len(self.members) or not self.members:
            raise ConfigError("need one weight per member and at least one member")
        if any(w < 0 for w in self.weights):
            raise ConfigError("ensemble weights must be non-negative")
        if abs(math.fsum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"ensemble weights sum to {math.fsum(self.weights)}, not 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EnsembleSpec":
        d = json.loads(text)
        unknown = set(d) - {"members", "weights", "task", "validation_total"}
        if unknown:
            raise ConfigError(f"unknown EnsembleSpec keys {sorted(unknown)}")
        return cls(**d)


def ensemble_predict(outputs: Sequence[np.ndarray], spec: EnsembleSpec) -> np.ndarray:
    """Weighted average of member outputs.

    Expression members must be probability rows (post-softmax); VA members
    are tanh outputs. A weight of exactly 1 returns that member unchanged.
    """
    if len(outputs) != len(spec.weights):
        raise ValueError(f"{len(outputs)} member outputs for {len(spec.weights)} weights")
    arrays = [np.asarray(o, dtype=np.float64) for o in outputs]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("member outputs differ in shape")
    for w, a in zip(spec.weights, arrays):
        if w == 1.0:
            return a.copy()
    out = np.zeros(shape)
    for w, a in zip(spec.weights, arrays):
        if w:
            out += w * a
    return out


def simplex_grid(n_members: int, step: float) -> list[tuple[float, ...]]:
    """All weight vectors with entries in multiples of ``step`` summing to 1, lexicographically sorted."""
    if not 0 < step <= 1:
        raise ValueError("step must lie in (0, 1]")
    n = round(1.0 / step)
    if abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"step {step} does not divide 1")
    points = []
    for head in itertools.product(range(n + 1), repeat=n_members - 1):
        rest = n - sum(head)
        if rest >= 0:
            points.append(tuple(k / n for k in head + (rest,)))
    return sorted(points)


def _score(task: str, pred, gold) -> float:
    if task == "expr":
        labels = np.asarray(pred).argmax(-1)
        return total_expr(macro_f1(labels, gold), accuracy(labels, gold))
    return total_va(ccc(pred[:, 0], gold[:, 0]), ccc(pred[:, 1], gold[:, 1]))


def grid_search_weights(
    member_val_outputs: Sequence[np.ndarray],
    gold,
    task: str,
    step: float = 0.1,
    member_ids: Optional[Sequence[str]] = None,
) -> EnsembleSpec:
    """Exhaustive search over the weight simplex for the best validation total.

    ``gold`` holds expression labels (N,) or VA values (N, 2); sentinel frames
    are dropped. Ties (within 1e-12) go to the vector with the fewest nonzero
    weights, then to the lexicographically smallest.
    """
    gold = np.asarray(gold)
    keep = expr_mask(gold) if task == "expr" else va_mask(gold)
    if not keep.any():
        raise DataError("validation set has no annotated frames")
    members = [np.asarray(o, dtype=np.float64)[keep] for o in member_val_outputs]
    g = gold[keep]
    ids = list(member_ids) if member_ids is not None else [f"m{k}" for k in range(len(members))]
    best_w, best, best_nnz = None, -math.inf, 0
    for w in simplex_grid(len(members), step):
        spec = EnsembleSpec(ids, list(w), task)
        score = _score(task, ensemble_predict(members, spec), g)
        nnz = sum(x > 0 for x in w)
        if score > best + 1e-12 or (score >= best - 1e-12 and nnz < best_nnz):
            best_w, best, best_nnz = w, score, nnz
    return EnsembleSpec(ids, list(best_w), task, validation_total=best)
