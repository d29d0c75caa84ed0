"""Batch command line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 verification
failure. Errors are also reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import audio, data, fusion, geometry, gradcheck, metrics, net
from .config import load_config, train_config
from .errors import ConfigError, DataError, TrainingDiverged, VerificationError
from .losses import EXPR_CLASS_NAMES, load_embedding_table, save_embedding_table

log = logging.getLogger("avemo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands


def cmd_config(args):
    _dump(load_config(args.config, args.set))


def cmd_bbox(args):
    cfg = geometry.ExpansionConfig(args.lambda_x, args.lambda_y, args.conf_threshold)
    if args.image:
        H, W = geometry.read_png(args.image).shape[:2]
    elif args.height and args.width:
        H, W = args.height, args.width
    else:
        raise ConfigError("give --image or both --height and --width")
    frames = data.parse_pose_json(args.pose)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["frame_index", "present", "top", "bottom", "left", "right"])
        for idx, kps in enumerate(frames):
            box = None if kps is None else geometry.compute_agent_bbox(kps, H, W, cfg)
            if box is None:
                writer.writerow([idx, 0, 0, H, 0, W])
            else:
                writer.writerow([idx, 1, box.top, box.bottom, box.left, box.right])
    finally:
        if args.out:
            out.close()


def cmd_mask(args):
    cfg = geometry.ExpansionConfig(args.lambda_x, args.lambda_y, args.conf_threshold)
    img = geometry.read_png(args.image)
    frames = data.parse_pose_json(args.pose)
    kps = frames[args.frame] if args.frame < len(frames) else None
    box = None if kps is None else geometry.compute_agent_bbox(kps, img.shape[0], img.shape[1], cfg)
    geometry.write_png(args.out, geometry.mask_agent(img, box))
    if args.body_out:
        geometry.write_png(args.body_out, geometry.crop_body(img, box))
    _dump({"frame": args.frame, "bbox": None if box is None else asdict(box)})


def cmd_melspec(args):
    cfg = audio.MelConfig(**load_config(args.config, args.set)["mel"])
    w = audio.read_wav(args.wav, target_rate=cfg.sample_rate)
    mel = audio.melspectrogram(w, cfg)
    audio.write_mels(args.out, mel)
    if args.png:
        audio.render_mels_png(args.png, mel)
    if args.csv:
        audio.write_mels_csv(args.csv, mel)
    _dump({"frames": mel.n_frames, "n_mels": mel.values.shape[1], "config": asdict(cfg)})


def cmd_synth(args):
    out = Path(args.out)
    ds = data.synth_dataset(args.seed, args.videos, args.frames, args.task, args.dim)
    n_val = args.val_videos
    if not 0 <= n_val < args.videos:
        raise ConfigError("--val-videos must be smaller than --videos")
    train_ids, val_ids = ds.video_ids[: args.videos - n_val], ds.video_ids[args.videos - n_val:]
    data.save_dataset(out / "train", ds, train_ids)
    if val_ids:
        data.save_dataset(out / "val", ds, val_ids)
    run = {
        "task": args.task,
        "seed": args.seed,
        "paths": {"train_dir": "train", "val_dir": "val" if val_ids else None},
        "model": {"input_dim": args.dim},
    }
    if args.task == "expr":
        save_embedding_table(out / "embeddings.txt", data.synth_embedding_table(args.seed))
        run["paths"]["embedding_table"] = "embeddings.txt"
    _dump(run, out / "config.json")
    _dump({"train_videos": train_ids, "val_videos": val_ids, "config": str(out / "config.json")})


def _windows(ds, cfg):
    w = cfg["window"]
    return ds.windows(w["length"], w["stride"])


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    paths, mcfg, task = cfg["paths"], cfg["model"], cfg["task"]
    if not paths["train_dir"]:
        raise ConfigError("paths.train_dir is required")
    tcfg = train_config(cfg)
    table = None
    if task == "expr" and mcfg["embedding_loss"]:
        if not paths["embedding_table"]:
            raise ConfigError("expression training with the embedding loss needs paths.embedding_table")
        table = load_embedding_table(paths["embedding_table"], EXPR_CLASS_NAMES)
    train_ds = data.load_dataset(paths["train_dir"], task)
    val = _windows(data.load_dataset(paths["val_dir"], task), cfg) if paths["val_dir"] else None
    if train_ds.features[0].shape[1] != mcfg["input_dim"]:
        raise ConfigError(f"model.input_dim={mcfg['input_dim']} but features have dim {train_ds.features[0].shape[1]}")
    model = net.init_model(
        task, mcfg["input_dim"], mcfg["hidden"], mcfg["bidirectional"], table.dim if table else 0, seed=cfg["seed"]
    )
    try:
        history = net.fit(model, _windows(train_ds, cfg), tcfg, val, table,
                          callback=lambda e: log.info("epoch %d loss %.6f %s", e.epoch, e.train_loss, e.val))
    except TrainingDiverged as exc:
        raise VerificationError(f"training diverged: {exc}") from exc
    net.save_checkpoint(paths["checkpoint"], model, tcfg, {"run_config": cfg})
    _dump([asdict(e) for e in history], paths["log"])
    _dump({"checkpoint": paths["checkpoint"], "log": paths["log"], "final": asdict(history[-1]) if history else None})


def cmd_predict(args):
    model = net.load_checkpoint(args.checkpoint)
    ds = data.load_dataset(args.data, model.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for vid, x, recs in zip(ds.video_ids, ds.features, ds.records):
        windows = data.make_windows(x, recs, args.window, args.window, vid)
        y = net.predict_windows(model, windows)
        valid = np.stack([w.valid_mask for w in windows])
        frames = np.concatenate([w.frame_index for w in windows])[valid.ravel()]
        y = net.output_probabilities(model, y)[valid]
        if model.task == "expr":
            records = data.arrays_to_records(frames, expr=y.argmax(-1))
            data.write_label_csv(out / f"{vid}.csv", records, "expr", probs=y)
        else:
            data.write_label_csv(out / f"{vid}.csv", data.arrays_to_records(frames, va=y), "va")
    _dump({"videos": ds.video_ids, "out": str(out)})


def _label_files(path) -> dict[str, Path]:
    path = Path(path)
    if path.is_dir():
        files = {p.stem: p for p in sorted(path.glob("*.csv"))}
        if not files:
            raise DataError(f"{path}: no CSV files")
        return files
    if path.is_file():
        return {path.stem: path}
    raise DataError(f"{path}: no such file or directory")


def _aligned(pred_path, gold_path, task):
    """Per-video ``(pred, gold, probs, frame_index)`` arrays joined on the gold frames."""
    preds, golds = _label_files(pred_path), _label_files(gold_path)
    if Path(gold_path).is_file() and Path(pred_path).is_file():
        pairs = {next(iter(golds)): (next(iter(preds.values())), next(iter(golds.values())))}
    else:
        missing = sorted(set(golds) - set(preds))
        if missing:
            raise DataError(f"no predictions for videos {missing}")
        pairs = {v: (preds[v], golds[v]) for v in golds}
    out = {}
    for vid, (pp, gp) in pairs.items():
        p_recs, probs = data.read_label_csv(pp, task)
        g_recs, _ = data.read_label_csv(gp, task)
        p_idx, p_expr, p_va = data.records_to_arrays(p_recs)
        g_idx, g_expr, g_va = data.records_to_arrays(g_recs)
        pos = {int(i): k for k, i in enumerate(p_idx)}
        lacking = [int(i) for i in g_idx if int(i) not in pos]
        if lacking:
            raise DataError(f"{vid}: no prediction for frames {lacking[:5]}{'...' if len(lacking) > 5 else ''}")
        take = np.array([pos[int(i)] for i in g_idx], dtype=np.int64)
        if task == "expr":
            out[vid] = (p_expr[take], g_expr, None if probs is None else probs[take], g_idx)
        else:
            out[vid] = (p_va[take], g_va, None, g_idx)
    return out


def cmd_eval(args):
    per_video = _aligned(args.pred, args.gold, args.task)
    pred = np.concatenate([v[0] for v in per_video.values()])
    gold = np.concatenate([v[1] for v in per_video.values()])
    report = metrics.evaluate(args.task, pred, gold, {k: (v[0], v[1]) for k, v in per_video.items()})
    if not report.is_consistent():
        raise VerificationError("report totals are inconsistent with their components")
    _dump(report.to_dict(), args.out)
    if args.table:
        rows = [("F1", report.macro_f1), ("Accuracy", report.accuracy), ("Total", report.total_expr)] if args.task == "expr" \
            else [("CCC-V", report.ccc_v), ("CCC-A", report.ccc_a), ("Total", report.total_va)]
        sys.stderr.write("\n".join(f"{name:<10}{value:.4f}" for name, value in rows) + "\n")


def cmd_ensemble(args):
    members = {}
    for spec in args.member:
        name, _, path = spec.partition("=")
        if not path:
            raise ConfigError(f"--member expects NAME=PATH, got {spec!r}")
        members[name] = path
    ids = list(members)
    aligned = {m: _aligned(p, args.gold, args.task) for m, p in members.items()}
    videos = list(aligned[ids[0]])

    def outputs(m):
        per = aligned[m]
        if args.task == "expr":
            if any(per[v][2] is None for v in videos):
                raise DataError(f"member {m!r} lacks probability columns")
            return np.concatenate([per[v][2] for v in videos])
        return np.concatenate([per[v][0] for v in videos])

    stacked = [outputs(m) for m in ids]
    gold = np.concatenate([aligned[ids[0]][v][1] for v in videos])
    if args.weights:
        weights = [float(w) for w in args.weights.split(",")]
        spec = fusion.EnsembleSpec(ids, weights, args.task)
    else:
        spec = fusion.grid_search_weights(stacked, gold, args.task, args.step, ids)
    fused = fusion.ensemble_predict(stacked, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pos = 0
    for v in videos:
        frames = aligned[ids[0]][v][3]
        n = frames.shape[0]
        chunk = fused[pos: pos + n]
        if args.task == "expr":
            data.write_label_csv(out / f"{v}.csv", data.arrays_to_records(frames, expr=chunk.argmax(-1)), "expr", chunk)
        else:
            data.write_label_csv(out / f"{v}.csv", data.arrays_to_records(frames, va=chunk), "va")
        pos += n
    (out / "ensemble.json").write_text(spec.to_json())
    _dump(asdict(spec))


def cmd_gradcheck(args):
    result = gradcheck.run_gradcheck(args.instances, args.seed)
    _dump(result, args.out)
    if not result["passed"]:
        raise VerificationError("gradient check failed: " + json.dumps(result["max_relative_error"]))


# ---------------------------------------------------------------- parser


def _add_expansion(p):
    d = geometry.ExpansionConfig()
    p.add_argument("--lambda-x", type=float, default=d.lambda_x)
    p.add_argument("--lambda-y", type=float, default=d.lambda_y)
    p.add_argument("--conf-threshold", type=float, default=d.conf_threshold)


def _add_config(p):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avemo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the effective configuration")
    p.add_argument("action", choices=["show"])
    _add_config(p)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("bbox", help="pose JSON -> agent bounding boxes (CSV)")
    p.add_argument("pose", help="pose JSON file or directory of per-frame files")
    p.add_argument("--image", help="PNG whose size bounds the boxes")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--out")
    _add_expansion(p)
    p.set_defaults(func=cmd_bbox)

    p = sub.add_parser("mask", help="image + pose -> context image with the agent masked out")
    p.add_argument("--image", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--body-out", help="also write the body crop here")
    _add_expansion(p)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("melspec", help="WAV -> MELS binary")
    p.add_argument("wav")
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    p.add_argument("--csv")
    _add_config(p)
    p.set_defaults(func=cmd_melspec)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset and a matching config")
    p.add_argument("--task", choices=["expr", "va"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=20)
    p.add_argument("--val-videos", type=int, default=4)
    p.add_argument("--frames", type=int, default=256)
    p.add_argument("--dim", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="config -> checkpoint + training log")
    _add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="checkpoint + feature directory -> per-video prediction CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=64)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="predictions + gold -> EvalReport JSON")
    p.add_argument("--task", choices=["expr", "va"], required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out")
    p.add_argument("--table", action="store_true", help="also print a human-readable table on stderr")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="member predictions -> weighted-average predictions")
    p.add_argument("--task", choices=["expr", "va"], required=True)
    p.add_argument("--member", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--gold", required=True, help="validation labels (weight search and frame alignment)")
    p.add_argument("--weights", help="comma-separated fixed weights instead of a grid search")
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (DataError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except VerificationError as exc:
        return _fail(EXIT_VERIFY, "verification", exc)
    return EXIT_OK


def _fail(code, kind, exc) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
