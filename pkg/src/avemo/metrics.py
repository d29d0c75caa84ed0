"""Challenge metrics: CCC, macro-F1, accuracy and the two aggregate scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

EXPR_SENTINEL = -1
VA_SENTINEL = -5.0
N_EXPR_CLASSES = 7

# Weights of the expression aggregate, e.g. 0.67 * 0.30 + 0.33 * 0.50 = 0.366.
EXPR_F1_WEIGHT = 0.67
EXPR_ACC_WEIGHT = 0.33

CCC_EPS = 1e-12


@dataclass(frozen=True)
class CCCStats:
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float

    @property
    def denominator(self) -> float:
        return self.var_x + self.var_y + (self.mean_x - self.mean_y) ** 2

    @property
    def ccc(self) -> float:
        d = self.denominator
        return 0.0 if d < CCC_EPS else 2.0 * self.cov_xy / d


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("CCC needs at least 2 samples")
    return x, y


def ccc_stats(x, y) -> CCCStats:
    """Population (divide-by-N) moments used by the concordance correlation."""
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    return CCCStats(
        mean_x=float(mx),
        mean_y=float(my),
        var_x=float(np.mean(dx * dx)),
        var_y=float(np.mean(dy * dy)),
        cov_xy=float(np.mean(dx * dy)),
    )


def ccc(x, y) -> float:
    """Concordance correlation coefficient of two equal-length series.

    Returns 0 when the denominator vanishes (both series constant and equal).
    """
    return ccc_stats(x, y).ccc


def _labels(pred, gold):
    pred = np.asarray(pred).ravel()
    gold = np.asarray(gold).ravel()
    if pred.shape != gold.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {gold.size}")
    if pred.size == 0:
        raise ValueError("no frames to evaluate")
    return pred.astype(np.int64), gold.astype(np.int64)


def confusion_matrix(pred, gold, n_classes: int) -> np.ndarray:
    """Counts indexed ``[gold, pred]``."""
    pred, gold = _labels(pred, gold)
    if pred.min() < 0 or gold.min() < 0 or pred.max() >= n_classes or gold.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


def per_class_f1(pred, gold, n_classes: int) -> np.ndarray:
    cm = confusion_matrix(pred, gold, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # (tp + fp) + (tp + fn)
    return np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)


def macro_f1(pred, gold, n_classes: int = N_EXPR_CLASSES, average: str = "macro") -> float:
    """Unweighted mean of per-class F1 over all ``n_classes`` classes.

    Classes absent from both ``pred`` and ``gold`` count with F1 = 0.
    ``average="weighted"`` weights by gold support instead.
    """
    f1 = per_class_f1(pred, gold, n_classes)
    if average == "macro":
        return float(f1.mean())
    if average == "weighted":
        support = np.bincount(_labels(pred, gold)[1], minlength=n_classes)
        return float((f1 * support).sum() / support.sum())
    raise ValueError(f"unknown averaging {average!r}")


def accuracy(pred, gold) -> float:
    pred, gold = _labels(pred, gold)
    return float(np.mean(pred == gold))


def total_expr(f1: float, acc: float) -> float:
    return EXPR_F1_WEIGHT * f1 + EXPR_ACC_WEIGHT * acc


def total_va(ccc_v: float, ccc_a: float) -> float:
    return (ccc_v + ccc_a) / 2.0


@dataclass
class EvalReport:
    task: str
    n_frames: int
    macro_f1: float | None = None
    accuracy: float | None = None
    ccc_v: float | None = None
    ccc_a: float | None = None
    total_expr: float | None = None
    total_va: float | None = None
    degenerate: list[str] = field(default_factory=list)
    per_video: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def is_consistent(self) -> bool:
        if self.task == "expr":
            return self.total_expr == total_expr(self.macro_f1, self.accuracy)
        return self.total_va == total_va(self.ccc_v, self.ccc_a)


def expr_mask(gold) -> np.ndarray:
    return np.asarray(gold) != EXPR_SENTINEL


def va_mask(gold) -> np.ndarray:
    """Frames whose valence and arousal are both annotated; ``gold`` is (N, 2)."""
    gold = np.asarray(gold, dtype=np.float64)
    return np.all(gold != VA_SENTINEL, axis=-1)


def evaluate_expr(pred, gold, n_classes: int = N_EXPR_CLASSES) -> EvalReport:
    """Expression report over annotated frames (gold sentinel -1 dropped)."""
    pred, gold = np.asarray(pred).ravel(), np.asarray(gold).ravel()
    keep = expr_mask(gold)
    p, g = pred[keep], gold[keep]
    f1, acc = macro_f1(p, g, n_classes), accuracy(p, g)
    return EvalReport("expr", int(keep.sum()), macro_f1=f1, accuracy=acc, total_expr=total_expr(f1, acc))


def evaluate_va(pred, gold) -> EvalReport:
    """Valence/arousal report over annotated frames; inputs are (N, 2)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gold = np.asarray(gold, dtype=np.float64).reshape(-1, 2)
    keep = va_mask(gold)
    p, g = pred[keep], gold[keep]
    report = EvalReport("va", int(keep.sum()))
    stats = [ccc_stats(p[:, k], g[:, k]) for k in range(2)]
    for name, s in zip(("valence", "arousal"), stats):
        if s.denominator < CCC_EPS:
            report.degenerate.append(name)
    report.ccc_v, report.ccc_a = stats[0].ccc, stats[1].ccc
    report.total_va = total_va(report.ccc_v, report.ccc_a)
    return report


def evaluate(task: str, pred, gold, videos: dict | None = None) -> EvalReport:
    """Evaluate the concatenation of all frames, plus a per-video breakdown.

    ``videos`` maps video id to ``(pred, gold)`` for that video; the headline
    numbers use the concatenation of every video in sorted id order.
    """
    fn = evaluate_expr if task == "expr" else evaluate_va if task == "va" else None
    if fn is None:
        raise ValueError(f"unknown task {task!r}")
    report = fn(pred, gold)
    for vid, (p, g) in sorted((videos or {}).items()):
        try:
            sub = fn(p, g).to_dict()
        except ValueError as exc:  # too few annotated frames in this video
            sub = {"error": str(exc)}
        sub.pop("per_video", None)
        report.per_video[vid] = sub
    return report
