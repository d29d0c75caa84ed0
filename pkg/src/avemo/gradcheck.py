"""Central finite-difference verification of every analytic gradient.

The error reported for one argument is ``||a - n|| / max(||a||, ||n||)`` over
the whole array (analytic ``a``, numeric ``n``); a check's score is the
maximum over its arguments and instances.
"""

from __future__ import annotations

import numpy as np

from .data import Batch
from .losses import (
    EmbeddingTable,
    ccc_loss,
    combined_expr_loss,
    cross_entropy_loss,
    embedding_loss,
    mse_loss,
)
from .net import TrainConfig, init_model, loss_and_grads

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic, numeric) -> float:
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - n) / scale)


def numeric_gradient(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = f()
        flat[k] = orig - step
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * step)
    return grad


def _check(f, args: dict, analytic: dict, step: float) -> float:
    return max(relative_error(analytic[name], numeric_gradient(f, x, step)) for name, x in args.items())


def _random_mask(rng, shape, p_drop=0.2):
    mask = rng.random(shape) >= p_drop
    mask.reshape(-1)[0] = True
    return mask


def check_mse(rng, step=STEP) -> float:
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 8)), 2)
    pred, target = rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape)
    mask = _random_mask(rng, shape)
    lv = mse_loss(pred, target, mask)
    return _check(lambda: mse_loss(pred, target, mask).value, {"pred": pred}, lv.grads, step)


def check_ccc(rng, step=STEP) -> float:
    n = int(rng.integers(3, 30))
    pv, gv, pa, ga = (rng.uniform(-1, 1, n) for _ in range(4))
    lv = ccc_loss(pv, gv, pa, ga)
    return _check(lambda: ccc_loss(pv, gv, pa, ga).value, {"valence": pv, "arousal": pa}, lv.grads, step)


def check_cross_entropy(rng, step=STEP) -> float:
    B, T, C = int(rng.integers(1, 4)), int(rng.integers(1, 6)), 7
    logits = rng.normal(0, 2, (B, T, C))
    gold = rng.integers(-1, C, (B, T))
    gold.reshape(-1)[0] = int(rng.integers(C))
    mask = _random_mask(rng, (B, T))
    lv = cross_entropy_loss(logits, gold, mask)
    return _check(lambda: cross_entropy_loss(logits, gold, mask).value, {"logits": logits}, lv.grads, step)


def _random_table(rng, n_classes=7, dim=5) -> EmbeddingTable:
    return EmbeddingTable([f"c{k}" for k in range(n_classes)], rng.normal(size=(n_classes, dim)))


def check_embedding(rng, step=STEP) -> float:
    table = _random_table(rng)
    d_v, n = int(rng.integers(2, 9)), int(rng.integers(1, 6))
    fused = rng.normal(size=(n, d_v))
    proj = rng.normal(size=(table.dim, d_v)) / np.sqrt(d_v)
    gold = rng.integers(0, len(table), n)
    lv = embedding_loss(fused, proj, table, gold)
    return _check(
        lambda: embedding_loss(fused, proj, table, gold).value,
        {"fused": fused, "proj": proj},
        lv.grads,
        step,
    )


def check_combined(rng, step=STEP) -> float:
    table = _random_table(rng)
    n, d_v = int(rng.integers(1, 6)), 4
    logits = rng.normal(size=(n, 7))
    fused = rng.normal(size=(n, d_v))
    proj = rng.normal(size=(table.dim, d_v)) / 2
    gold = rng.integers(0, 7, n)
    lam = float(rng.uniform(0, 2))

    def value():
        return combined_expr_loss(cross_entropy_loss(logits, gold), embedding_loss(fused, proj, table, gold), lam).value

    lv = combined_expr_loss(cross_entropy_loss(logits, gold), embedding_loss(fused, proj, table, gold), lam)
    return _check(value, {"logits": logits, "fused": fused, "proj": proj}, lv.grads, step)


def _random_batch(rng, B, T, d_in) -> Batch:
    features = rng.normal(size=(B, T, d_in))
    valid = np.ones((B, T), dtype=bool)
    if T > 2:
        valid[-1, -1] = False  # one padded frame
    expr = rng.integers(0, 7, (B, T))
    va = rng.uniform(-1, 1, (B, T, 2))
    return Batch(features, expr, va, valid)


# ------------------------------------------------------------------ oracle
# A second, plain transcription of forward pass + loss that evaluates S
# perturbed copies of the parameters at once (leading axis S). It shares no
# code with the production path; check_bptt first confirms both agree at the
# unperturbed point, so the finite differences are taken of the same function.


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def _oracle_direction(W, U, b, xs):
    S, B, T, _ = xs.shape
    h = U.shape[-1]
    hp = np.zeros((S, B, h))
    cp = np.zeros((S, B, h))
    Wt, Ut = W.transpose(0, 2, 1), U.transpose(0, 2, 1)
    hs = []
    for t in range(T):
        z = xs[:, :, t] @ Wt + hp @ Ut + b[:, None, :]
        i, f = _logistic(z[..., :h]), _logistic(z[..., h: 2 * h])
        g, o = np.tanh(z[..., 2 * h: 3 * h]), _logistic(z[..., 3 * h:])
        cp = f * cp + i * g
        hp = o * np.tanh(cp)
        hs.append(hp)
    return np.stack(hs, axis=2)


def _oracle_ccc(x, y, w):
    """Population CCC along the last axis with 0/1 frame weights ``w``."""
    n = w.sum(-1)
    mx, my = (w * x).sum(-1) / n, (w * y).sum(-1) / n
    dx, dy = x - mx[..., None], y - my[..., None]
    vx, vy = (w * dx * dx).sum(-1) / n, (w * dy * dy).sum(-1) / n
    cov = (w * dx * dy).sum(-1) / n
    return 2 * cov / (vx + vy + (mx - my) ** 2)


def oracle_loss(theta: dict, xs, batch: Batch, task, cfg: TrainConfig, table, bidirectional=True) -> np.ndarray:
    """Training loss for each of the S stacked parameter sets; returns shape (S,)."""
    hcat = _oracle_direction(theta["fwd.W"], theta["fwd.U"], theta["fwd.b"], xs)
    if bidirectional:
        hb = _oracle_direction(theta["bwd.W"], theta["bwd.U"], theta["bwd.b"], xs[:, :, ::-1])
        hcat = np.concatenate([hcat, hb[:, :, ::-1]], axis=-1)
    S, B, T, _ = hcat.shape
    y = (hcat.reshape(S, B * T, -1) @ theta["head.W"].transpose(0, 2, 1)).reshape(S, B, T, -1)
    y = y + theta["head.b"][:, None, None, :]
    if task == "expr":
        m = batch.expr_mask
        n = m.sum()
        zmax = y.max(-1, keepdims=True)
        lse = zmax[..., 0] + np.log(np.exp(y - zmax).sum(-1))
        gold = np.where(m, batch.expr, 0)
        picked = np.take_along_axis(y, np.broadcast_to(gold[None, ..., None], (S, B, T, 1)), -1)[..., 0]
        loss = np.where(m, lse - picked, 0.0).sum((1, 2)) / n
        if "emb.W" in theta and cfg.lambda_emb > 0:
            proj = theta["emb.W"]
            u = (xs.reshape(S, B * T, -1) @ proj.transpose(0, 2, 1)).reshape(S, B, T, -1)
            target = table.vectors[gold]
            sq = ((u - target) ** 2).sum(-1)
            if cfg.emb_normalize:
                sq = sq / table.dim
            loss = loss + cfg.lambda_emb * np.where(m, sq, 0.0).sum((1, 2)) / n
        return loss
    y = np.tanh(y)
    m = batch.va_mask
    loss = np.zeros(S)
    if "ccc" in cfg.va_loss:
        w = m.astype(np.float64)
        used = w.sum(-1) >= 2
        rho = [_oracle_ccc(y[..., k], batch.va[None, ..., k], w) for k in range(2)]
        per_window = 1.0 - (rho[0] + rho[1]) / 2.0
        loss = loss + per_window[:, used].mean(-1)
    if "mse" in cfg.va_loss:
        sq = ((y - batch.va[None]) ** 2).sum(-1)
        loss = loss + np.where(m, sq, 0.0).sum((1, 2)) / (2 * m.sum())
    return loss


def stacked_numeric_gradient(args: dict, evaluate, step: float = STEP) -> dict:
    """Central differences for every entry of every array in ``args`` in one batched call.

    ``evaluate(stacked)`` receives a dict with the same keys whose arrays gain a
    leading axis of size ``2 * total_size`` (all +step copies, then all -step
    copies) and must return that many loss values.
    """
    names = list(args)
    sizes = [args[k].size for k in names]
    base = np.concatenate([args[k].ravel() for k in names])
    P = base.size
    delta = step * np.eye(P)
    thetas = np.concatenate([base + delta, base - delta])
    stacked, pos = {}, 0
    for k, size in zip(names, sizes):
        stacked[k] = thetas[:, pos: pos + size].reshape((2 * P,) + args[k].shape)
        pos += size
    values = evaluate(stacked)
    flat = (values[:P] - values[P:]) / (2.0 * step)
    out, pos = {}, 0
    for k, size in zip(names, sizes):
        out[k] = flat[pos: pos + size].reshape(args[k].shape)
        pos += size
    return out


def check_bptt(rng, task: str, va_loss: str = "ccc", d_in=8, hidden=4, T=3, B=2, bidirectional=True, step=STEP) -> float:
    """Gradient of the full training loss through the head and both LSTM directions.

    Covers every parameter (including the embedding projection for the
    expression task) and the input features.
    """
    emb_dim = 5 if task == "expr" else 0
    model = init_model(task, d_in, hidden, bidirectional, emb_dim, seed=int(rng.integers(2**31)))
    for p in model.params.values():  # move biases off their init so every path is exercised
        p += rng.normal(0, 0.3, p.shape)
    batch = _random_batch(rng, B, T, d_in)
    table = _random_table(rng, dim=emb_dim) if emb_dim else None
    cfg = TrainConfig(va_loss=va_loss)
    value, grads, _ = loss_and_grads(model, batch, cfg, table)

    args = dict(model.params)
    args["input"] = batch.features

    def evaluate(stacked):
        xs = stacked.pop("input")
        return oracle_loss(stacked, xs, batch, task, cfg, table, bidirectional)

    base = evaluate({k: v[None] for k, v in args.items()})[0]
    if abs(base - value) > 1e-10 * max(1.0, abs(value)):
        raise AssertionError(f"oracle loss {base!r} disagrees with model loss {value!r}")
    numeric = stacked_numeric_gradient(args, evaluate, step)
    return max(relative_error(grads[k], numeric[k]) for k in args)


def check_bptt_loop(rng, task: str, va_loss: str = "ccc", d_in=8, hidden=4, T=3, B=2, step=STEP) -> float:
    """Same check, differencing the production forward pass one coordinate at a time (slow)."""
    emb_dim = 5 if task == "expr" else 0
    model = init_model(task, d_in, hidden, True, emb_dim, seed=int(rng.integers(2**31)))
    for p in model.params.values():
        p += rng.normal(0, 0.3, p.shape)
    batch = _random_batch(rng, B, T, d_in)
    table = _random_table(rng, dim=emb_dim) if emb_dim else None
    cfg = TrainConfig(va_loss=va_loss)
    _, grads, _ = loss_and_grads(model, batch, cfg, table)
    args = dict(model.params)
    args["input"] = batch.features
    return _check(lambda: loss_and_grads(model, batch, cfg, table)[0], args, grads, step)


CHECKS = {
    "mse": check_mse,
    "ccc": check_ccc,
    "cross_entropy": check_cross_entropy,
    "embedding": check_embedding,
    "combined": check_combined,
    "bptt_expr_ce_emb": lambda rng, step=STEP: check_bptt(rng, "expr", step=step),
    "bptt_va_ccc": lambda rng, step=STEP: check_bptt(rng, "va", "ccc", step=step),
    "bptt_va_mse": lambda rng, step=STEP: check_bptt(rng, "va", "mse", step=step),
    "bptt_va_unidirectional": lambda rng, step=STEP: check_bptt(rng, "va", "ccc+mse", bidirectional=False, step=step),
}


def run_gradcheck(n_instances: int = 100, seed: int = 0, step: float = STEP, tolerance: float = TOLERANCE) -> dict:
    """Run every check on ``n_instances`` seeded random instances.

    Returns ``{"max_relative_error": {check: err}, "tolerance": ..., "passed": bool}``.
    """
    worst = {}
    for j, (name, check) in enumerate(CHECKS.items()):
        errs = [check(np.random.default_rng([seed, j, k]), step=step) for k in range(n_instances)]
        worst[name] = max(errs)
    return {
        "n_instances": n_instances,
        "seed": seed,
        "step": step,
        "tolerance": tolerance,
        "max_relative_error": worst,
        "passed": all(e < tolerance for e in worst.values()),
    }
