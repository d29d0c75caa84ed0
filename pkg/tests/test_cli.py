import json
import wave

import numpy as np
import pytest

from avemo.audio import read_mels
from avemo.cli import main
from avemo.data import FrameRecord, write_label_csv, write_pose_json
from avemo.geometry import KeypointSet, read_png, write_png

# Macro-F1 over 7 classes is exactly 3/10 and accuracy 5/10 for this pair.
CRAFTED_GOLD = [4, 4, 0, 0, 3, 4, 1, 5, 0, 3]
CRAFTED_PRED = [3, 4, 5, 0, 3, 1, 5, 1, 0, 3]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_expr(path, labels):
    write_label_csv(path, [FrameRecord(t, expr_label=c) for t, c in enumerate(labels)], "expr")


def test_eval_perfect(tmp_path, capsys):
    write_expr(tmp_path / "g.csv", [0, 1, 2, 3, 4, 5, 6, -1])
    write_expr(tmp_path / "p.csv", [0, 1, 2, 3, 4, 5, 6, 2])
    code, out, _ = run(capsys, "eval", "--task", "expr", "--pred", tmp_path / "p.csv", "--gold", tmp_path / "g.csv")
    report = json.loads(out)
    assert code == 0
    assert report["macro_f1"] == 1.0 and report["accuracy"] == 1.0 and report["total_expr"] == 1.0
    assert report["n_frames"] == 7


def test_eval_crafted_pair(tmp_path, capsys):
    write_expr(tmp_path / "g.csv", CRAFTED_GOLD)
    write_expr(tmp_path / "p.csv", CRAFTED_PRED)
    code, out, err = run(capsys, "eval", "--task", "expr", "--pred", tmp_path / "p.csv", "--gold", tmp_path / "g.csv", "--table")
    report = json.loads(out)
    assert code == 0
    assert report["macro_f1"] == pytest.approx(0.30, abs=1e-12)
    assert report["accuracy"] == 0.5
    assert report["total_expr"] == pytest.approx(0.366, abs=1e-12)
    assert "Total" in err


def test_eval_va_directories(tmp_path, capsys):
    for d in ("pred", "gold"):
        (tmp_path / d).mkdir()
    rng = np.random.default_rng(0)
    for vid in ("a", "b"):
        va = rng.uniform(-1, 1, (20, 2))
        recs = [FrameRecord(t, valence=v, arousal=a) for t, (v, a) in enumerate(va)]
        write_label_csv(tmp_path / "gold" / f"{vid}.csv", recs, "va")
        write_label_csv(tmp_path / "pred" / f"{vid}.csv", recs, "va")
    code, out, _ = run(capsys, "eval", "--task", "va", "--pred", tmp_path / "pred", "--gold", tmp_path / "gold")
    report = json.loads(out)
    assert code == 0 and report["total_va"] == pytest.approx(1.0)
    assert set(report["per_video"]) == {"a", "b"}


def test_eval_missing_prediction_is_data_error(tmp_path, capsys):
    write_expr(tmp_path / "g.csv", [0, 1, 2])
    write_expr(tmp_path / "p.csv", [0, 1])
    code, _, err = run(capsys, "eval", "--task", "expr", "--pred", tmp_path / "p.csv", "--gold", tmp_path / "g.csv")
    assert code == 3 and json.loads(err)["error"] == "data"


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--instances", "3", "--seed", "5")
    result = json.loads(out)
    assert code == 0 and result["passed"]
    assert all(v < 1e-4 for v in result["max_relative_error"].values())


def test_config_errors(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"seed": 3}}))
    code, _, err = run(capsys, "config", "show", "--config", tmp_path / "c.json")
    assert code == 2 and "top level" in json.loads(err)["message"]
    code, _, _ = run(capsys, "config", "show", "--set", "train.optimizer=lbfgs")
    assert code == 2
    code, out, _ = run(capsys, "config", "show", "--set", "train.epochs=7")
    assert code == 0 and json.loads(out)["train"]["epochs"] == 7


def test_bbox_and_mask(tmp_path, capsys):
    arr = np.zeros((25, 3))
    arr[:2] = [(10, 20, 0.9), (30, 60, 0.8)]
    write_pose_json(tmp_path / "pose", [KeypointSet(arr), None])
    write_png(tmp_path / "img.png", np.full((100, 100, 3), 255, np.uint8))
    code, out, _ = run(capsys, "bbox", tmp_path / "pose", "--image", tmp_path / "img.png")
    assert code == 0
    assert out.splitlines() == [
        "frame_index,present,top,bottom,left,right",
        "0,1,10,70,8,32",
        "1,0,0,100,0,100",
    ]
    code, out, _ = run(capsys, "mask", "--image", tmp_path / "img.png", "--pose", tmp_path / "pose",
                       "--out", tmp_path / "ctx.png", "--body-out", tmp_path / "body.png")
    assert code == 0
    ctx = read_png(tmp_path / "ctx.png")
    assert (ctx == 0).all(axis=2).sum() == 60 * 24
    assert read_png(tmp_path / "body.png").shape == (60, 24, 3)


def test_melspec(tmp_path, capsys):
    with wave.open(str(tmp_path / "s.wav"), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(np.zeros(16384, dtype="<i2").tobytes())
    code, out, _ = run(capsys, "melspec", tmp_path / "s.wav", "--out", tmp_path / "s.mels", "--png", tmp_path / "s.png")
    assert code == 0 and json.loads(out)["frames"] == 61
    assert (read_mels(tmp_path / "s.mels").values == -10).all()
    assert (tmp_path / "s.png").exists()


def test_melspec_short_file_is_data_error(tmp_path, capsys):
    with wave.open(str(tmp_path / "s.wav"), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(np.zeros(100, dtype="<i2").tobytes())
    code, _, err = run(capsys, "melspec", tmp_path / "s.wav", "--out", tmp_path / "s.mels")
    assert code == 3 and "too short" in err


def synth(tmp_path, capsys, task):
    code, _, _ = run(capsys, "synth", "--task", task, "--out", tmp_path / "d", "--videos", 4, "--val-videos", 1,
                     "--frames", 48, "--dim", 6)
    assert code == 0
    return tmp_path / "d" / "config.json"


def train(capsys, cfg, ckpt, *extra):
    return run(capsys, "train", "--config", cfg, "--set", "train.epochs=2", "--set", "model.hidden=4",
               "--set", "window.length=16", "--set", "window.stride=16",
               "--set", f'paths.checkpoint="{ckpt}"', "--set", f'paths.log="{ckpt}.log.json"', *extra)


def test_train_is_bit_reproducible(tmp_path, capsys):
    cfg = synth(tmp_path, capsys, "expr")
    for name in ("a", "b"):
        code, _, err = train(capsys, cfg, tmp_path / f"{name}.seqm")
        assert code == 0, err
    assert (tmp_path / "a.seqm").read_bytes() == (tmp_path / "b.seqm").read_bytes()
    assert (tmp_path / "a.seqm.log.json").read_text() == (tmp_path / "b.seqm.log.json").read_text()


def test_train_predict_eval_ensemble(tmp_path, capsys):
    cfg = synth(tmp_path, capsys, "va")
    code, _, err = train(capsys, cfg, tmp_path / "m.seqm")
    assert code == 0, err
    val = tmp_path / "d" / "val"
    code, _, _ = run(capsys, "predict", "--checkpoint", tmp_path / "m.seqm", "--data", val, "--out", tmp_path / "pred")
    assert code == 0
    code, out, _ = run(capsys, "eval", "--task", "va", "--pred", tmp_path / "pred", "--gold", val)
    assert code == 0 and json.loads(out)["n_frames"] == 48
    code, out, _ = run(capsys, "ensemble", "--task", "va", "--member", f"x={tmp_path / 'pred'}",
                       "--member", f"y={tmp_path / 'pred'}", "--gold", val, "--out", tmp_path / "ens")
    assert code == 0 and json.loads(out)["weights"] == [0.0, 1.0]
    assert (tmp_path / "ens" / "ensemble.json").exists()


def test_train_dimension_mismatch_is_config_error(tmp_path, capsys):
    cfg = synth(tmp_path, capsys, "va")
    code, _, err = train(capsys, cfg, tmp_path / "m.seqm", "--set", "model.input_dim=5")
    assert code == 2 and "input_dim" in err


def test_ensemble_bad_member_spec(tmp_path, capsys):
    write_expr(tmp_path / "g.csv", [0])
    code, _, _ = run(capsys, "ensemble", "--task", "expr", "--member", "nopath", "--gold", tmp_path / "g.csv", "--out", tmp_path / "e")
    assert code == 2
