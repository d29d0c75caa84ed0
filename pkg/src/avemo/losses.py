"""Training objectives with closed-form gradients.

Every loss returns a :class:`LossValue` whose ``grads`` map an argument name
to the gradient of the scalar value with respect to that argument. Masked
entries are dropped by indexing, never by multiplication, so NaNs sitting in
excluded frames cannot leak into the value or the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .metrics import CCC_EPS

LAMBDA_EMB = 1.0


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def grad(self) -> np.ndarray:
        """Gradient w.r.t. the loss's primary (first) argument."""
        return next(iter(self.grads.values()))


def _mask(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != {shape}")
    return mask


def mse_loss(pred, target, mask=None) -> LossValue:
    """Mean squared error over the entries selected by ``mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    keep = _mask(pred.shape, mask)
    n = int(keep.sum())
    if n == 0:
        raise DataError("mse_loss: no entries to average")
    diff = pred[keep] - target[keep]
    grad = np.zeros_like(pred)
    grad[keep] = 2.0 * diff / n
    return LossValue(float(np.mean(diff * diff)), {"pred": grad})


def ccc_and_grad(x, y) -> tuple[float, np.ndarray]:
    """CCC of ``x`` against ``y`` and its derivative with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 2 or y.size != n:
        raise ValueError("need two equal-length series of length >= 2")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    var_x, var_y, cov = np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy)
    denom = var_x + var_y + (mx - my) ** 2
    if denom < CCC_EPS:
        return 0.0, np.zeros(n)
    rho = 2.0 * cov / denom
    # d cov/dx_i = dy_i/N ; d denom/dx_i = 2 dx_i/N + 2 (mx - my)/N
    d_denom = 2.0 * (dx + (mx - my)) / n
    grad = (2.0 * dy / n - rho * d_denom) / denom
    return float(rho), grad


def ccc_loss(pred_v, gold_v, pred_a, gold_a) -> LossValue:
    """``1 - (ccc_v + ccc_a) / 2`` with gradients for both prediction series."""
    rho_v, g_v = ccc_and_grad(pred_v, gold_v)
    rho_a, g_a = ccc_and_grad(pred_a, gold_a)
    return LossValue(
        1.0 - (rho_v + rho_a) / 2.0,
        {"valence": -0.5 * g_v.reshape(np.shape(pred_v)), "arousal": -0.5 * g_a.reshape(np.shape(pred_a))},
    )


def window_ccc_loss(pred, gold, mask=None) -> LossValue:
    """CCC loss per window averaged over windows.

    ``pred`` and ``gold`` are (B, T, 2) valence/arousal arrays. Windows with
    fewer than two selected frames are skipped.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    keep = _mask(pred.shape[:2], mask)
    grad = np.zeros_like(pred)
    values = []
    used = [b for b in range(pred.shape[0]) if keep[b].sum() >= 2]
    if not used:
        raise DataError("window_ccc_loss: no window has two annotated frames")
    for b in used:
        k = keep[b]
        lv = ccc_loss(pred[b, k, 0], gold[b, k, 0], pred[b, k, 1], gold[b, k, 1])
        values.append(lv.value)
        grad[b, k, 0] = lv.grads["valence"] / len(used)
        grad[b, k, 1] = lv.grads["arousal"] / len(used)
    return LossValue(float(np.mean(values)), {"pred": grad})


def softmax(logits, axis=-1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy_loss(logits, gold, mask=None) -> LossValue:
    """Mean negative log-likelihood of ``gold`` under ``softmax(logits)``.

    ``logits`` is (..., C) and ``gold`` the matching integer labels; frames with
    a negative label (the -1 sentinel) or a false ``mask`` entry are excluded.
    """
    logits = np.asarray(logits, dtype=np.float64)
    gold = np.asarray(gold)
    if logits.shape[:-1] != gold.shape:
        raise ValueError(f"logits {logits.shape} do not match labels {gold.shape}")
    n_classes = logits.shape[-1]
    keep = _mask(gold.shape, mask) & (gold >= 0)
    if np.any(gold[keep] >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    n = int(keep.sum())
    if n == 0:
        raise DataError("cross_entropy_loss: every frame is unannotated")
    z = logits[keep]
    y = gold[keep].astype(np.int64)
    logp = log_softmax(z)
    value = -np.mean(logp[np.arange(n), y])
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    grad = np.zeros_like(logits)
    grad[keep] = g / n
    return LossValue(float(value), {"logits": grad})


@dataclass
class EmbeddingTable:
    """Label word vectors, one per class, in class-index order."""

    names: list[str]
    vectors: np.ndarray  # (n_classes, d_t)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.names):
            raise ConfigError("embedding table needs one vector per class name")
        if not np.all(np.isfinite(self.vectors)):
            raise ConfigError("embedding vectors must be finite")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.names)

    def vector(self, label: int) -> np.ndarray:
        if not 0 <= label < len(self.names):
            raise ConfigError(f"class {label} has no embedding")
        return self.vectors[label]


# Neutral followed by the six basic expressions, in label order.
EXPR_CLASS_NAMES = ["neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise"]


def load_embedding_table(path, class_names=None) -> EmbeddingTable:
    """Read a GloVe-style text file (``word v1 v2 ...`` per line).

    With ``class_names`` the rows are picked and ordered by those names; every
    name must be present.
    """
    rows = {}
    order = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                rows[parts[0]] = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            order.append(parts[0])
    names = list(class_names) if class_names is not None else order
    missing = [c for c in names if c not in rows]
    if missing:
        raise ConfigError(f"embedding table lacks classes {missing}")
    dims = {rows[c].size for c in names}
    if len(dims) != 1:
        raise DataError(f"{path}: inconsistent vector dimensions {sorted(dims)}")
    return EmbeddingTable(names, np.stack([rows[c] for c in names]))


def save_embedding_table(path, table: EmbeddingTable) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for name, vec in zip(table.names, table.vectors):
            f.write(name + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def embedding_loss(fused, proj, table: EmbeddingTable, gold, mask=None, normalize=False) -> LossValue:
    """Squared distance between projected features and the gold label's word vector.

    ``fused`` is (..., d_v), ``proj`` is (d_t, d_v), ``gold`` integer labels of
    shape ``fused.shape[:-1]``. The per-frame squared L2 norm is averaged over
    annotated frames; ``normalize=True`` also divides by ``d_t`` (a true MSE).
    """
    fused = np.asarray(fused, dtype=np.float64)
    proj = np.asarray(proj, dtype=np.float64)
    gold = np.asarray(gold)
    if proj.shape != (table.dim, fused.shape[-1]):
        raise ValueError(f"projection {proj.shape} != ({table.dim}, {fused.shape[-1]})")
    single = fused.ndim == 1
    if single:
        fused, gold = fused[None], np.asarray(gold).reshape(1)
    keep = _mask(gold.shape, mask) & (gold >= 0)
    n = int(keep.sum())
    if n == 0:
        raise DataError("embedding_loss: every frame is unannotated")
    labels = gold[keep].astype(np.int64)
    for c in np.unique(labels):
        table.vector(int(c))
    f = fused[keep]
    u = f @ proj.T
    resid = u - table.vectors[labels]
    scale = 1.0 / (n * table.dim) if normalize else 1.0 / n
    value = scale * float(np.sum(resid * resid))
    d_u = 2.0 * scale * resid
    grad_fused = np.zeros_like(fused)
    grad_fused[keep] = d_u @ proj
    grad_proj = d_u.T @ f
    if single:
        grad_fused = grad_fused[0]
    return LossValue(value, {"fused": grad_fused, "proj": grad_proj})


def iverson_target(table: EmbeddingTable, gold: int) -> np.ndarray:
    """The gold word vector written as a bracket-weighted sum over all classes."""
    target = np.zeros(table.dim)
    for c in range(len(table)):
        target = target + float(gold == c) * table.vectors[c]
    return target


def combined_expr_loss(ce: LossValue, emb: LossValue, lambda_emb: float = LAMBDA_EMB) -> LossValue:
    """``ce + lambda_emb * emb``; gradients for shared arguments add up."""
    if lambda_emb < 0:
        raise ValueError("lambda_emb must be non-negative")
    grads = {k: v.copy() for k, v in ce.grads.items()}
    if lambda_emb:
        for k, v in emb.grads.items():
            grads[k] = grads[k] + lambda_emb * v if k in grads else lambda_emb * v
    return LossValue(ce.value + lambda_emb * emb.value, grads)
