"""End-to-end command-line behavior: artifacts, exit codes, determinism."""

import csv
import json

import numpy as np

from iscfnet import cli
from iscfnet.autodiff import ops as ops_module
from iscfnet.data_io import read_pnm

FAST = [
    "--hw", "32",
    "--base-width", "8",
    "--epochs", "1",
    "--synth-count", "4",
    "--batch-size", "2",
    "--val-fraction", "0.25",
]


def run(argv):
    return cli.main(argv)


def train_fast(tmp_path, name="run", seed="0", extra=()):
    out = tmp_path / name
    code = run(["train", "--synth", "--seed", seed, *FAST, *extra, "--out", str(out)])
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# train


def test_train_smoke_creates_artifacts(tmp_path, capsys):
    out = train_fast(tmp_path)
    for artifact in ("history.csv", "best.ckpt", "effective-config.json", "history.png"):
        assert (out / artifact).exists(), artifact
    stdout = capsys.readouterr().out
    assert "effective config:" in stdout
    saved = json.loads((out / "effective-config.json").read_text())
    assert saved["input_hw"] == [32, 32]
    assert saved["epochs"] == 1


def test_train_missing_data_dir_exits_2(tmp_path, capsys):
    code = run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "nope" in capsys.readouterr().err


def test_train_same_seed_reproduces_history_bytes(tmp_path):
    a = train_fast(tmp_path, "a", seed="3")
    b = train_fast(tmp_path, "b", seed="3")
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()


def test_nonfinite_loss_exits_3(tmp_path, monkeypatch, capsys):
    from iscfnet import pipeline as pipeline_module
    from iscfnet.pipeline import NonFiniteLoss

    def explode(*args, **kwargs):
        raise NonFiniteLoss("loss nan at epoch 1, step 0")

    monkeypatch.setattr(pipeline_module, "train", explode)
    code = run(["train", "--synth", *FAST, "--out", str(tmp_path / "o")])
    assert code == 3
    assert "aborted" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 1e-4}))
    code = run(["train", "--synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "learning_rate" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 7, "base_width": 8, "input_hw": 32,
                               "synth_count": 4, "batch_size": 2, "val_fraction": 0.25}))
    out = tmp_path / "o"
    code = run(["train", "--synth", "--config", str(cfg), "--epochs", "1", "--out", str(out)])
    assert code == 0
    saved = json.loads((out / "effective-config.json").read_text())
    assert saved["epochs"] == 1 and saved["base_width"] == 8


def test_train_scales_flag(tmp_path):
    out = train_fast(tmp_path, extra=("--scales", "1,2"))
    saved = json.loads((out / "effective-config.json").read_text())
    assert saved["iscf_stages"] == [1, 2]


# ---------------------------------------------------------------------------
# eval


def test_eval_writes_metrics_and_overlays(tmp_path):
    out = train_fast(tmp_path)
    eval_out = tmp_path / "eval"
    code = run(
        ["eval", "--ckpt", str(out / "best.ckpt"), "--synth", *FAST,
         "--split", "val", "--overlays", "--out", str(eval_out)]
    )
    assert code == 0
    report = json.loads((eval_out / "metrics.json").read_text())
    for key in ("micro", "per_sample_mean", "per_sample", "counts", "threshold"):
        assert key in report
    overlays = sorted((eval_out / "overlays").glob("*.ppm"))
    assert len(overlays) == len(report["per_sample"]) == 1  # 4 samples, 25% val
    assert (eval_out / "per_sample_dsc.png").exists()


def test_eval_corrupt_checkpoint_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"ISCF" + b"\x01\x00\x00\x00" + (999).to_bytes(8, "little") + b"x")
    code = run(["eval", "--ckpt", str(bad), "--synth", *FAST, "--out", str(tmp_path / "e")])
    assert code == 2
    assert "data error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# infer


def test_infer_round_trip_binary_mask(tmp_path):
    out = train_fast(tmp_path)
    data_dir = tmp_path / "data"
    code = run(["synth-data", "--count", "1", "--hw", "32", "--seed", "0", "--out", str(data_dir)])
    assert code == 0
    image = sorted(data_dir.glob("*.ppm"))[0]
    infer_out = tmp_path / "infer"
    code = run(
        ["infer", "--ckpt", str(out / "best.ckpt"), "--image", str(image),
         "--overlay", "--out", str(infer_out)]
    )
    assert code == 0
    mask = read_pnm(infer_out / f"{image.stem}_pred.pgm")
    assert set(np.unique(mask)) <= {0, 255}
    assert (infer_out / f"{image.stem}_overlay.ppm").exists()


def test_infer_missing_image_exits_2(tmp_path):
    out = train_fast(tmp_path)
    code = run(["infer", "--ckpt", str(out / "best.ckpt"),
                "--image", str(tmp_path / "ghost.ppm"), "--out", str(tmp_path / "i")])
    assert code == 2


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_primitives_passes(capsys):
    assert run(["gradcheck", "--scope", "primitives"]) == 0
    stdout = capsys.readouterr().out
    assert "PASS" in stdout and "FAIL" not in stdout


def test_gradcheck_detects_corrupted_backward(monkeypatch, capsys):
    original = ops_module.sigmoid

    def corrupted(x):
        out = ops_module._sigmoid_stable(x.data)

        def bwd(g):
            return (g * out * (1.0 - out) * 1.05,)  # 5% wrong on purpose

        return ops_module._finish("sigmoid", out, (x,), bwd)

    monkeypatch.setattr(ops_module, "sigmoid", corrupted)
    try:
        code = run(["gradcheck", "--scope", "primitives"])
    finally:
        monkeypatch.setattr(ops_module, "sigmoid", original)
    assert code == 4
    stdout = capsys.readouterr().out
    assert "sigmoid" in stdout and "FAIL" in stdout


# ---------------------------------------------------------------------------
# bench


def test_bench_attn_writes_csv_and_verifies(tmp_path, capsys):
    out = tmp_path / "bench"
    code = run(["bench-attn", "--n-list", "64,128,256", "--d", "16",
                "--repeats", "2", "--out", str(out)])
    assert code == 0
    with open(out / "bench_attention.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["variant"] for r in rows} == {"standard", "efficient"}
    assert len(rows) == 6
    assert all(int(r["wall_ns"]) > 0 and int(r["bytes_allocated"]) > 0 for r in rows)
    stdout = capsys.readouterr().out
    assert "multiplication-order oracle" in stdout
    assert "slope" in stdout
    assert (out / "bench_attention.png").exists()


# ---------------------------------------------------------------------------
# ablate


def test_ablate_emits_three_row_csv(tmp_path, capsys):
    out = tmp_path / "ablation"
    code = run(["ablate", "--synth", *FAST, "--scales", "1,12,123", "--out", str(out)])
    assert code == 0
    with open(out / "ablation.csv") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    assert header == ["setting", "dsc", "se", "sp", "acc"]
    assert [r[0] for r in rows] == ["1", "12", "123"]
    for row in rows:
        for value in row[1:]:
            assert 0.0 <= float(value) <= 1.0
    stdout = capsys.readouterr().out
    assert "0.9025" in stdout and "0.9136" in stdout  # reference trend, context only
    assert (out / "ablation.png").exists()


def test_ablate_custom_hw_row_runs(tmp_path):
    out = tmp_path / "ablation96"
    code = run(["ablate", "--synth", "--hw", "96", "--base-width", "8", "--epochs", "1",
                "--synth-count", "2", "--batch-size", "2", "--val-fraction", "0.5",
                "--scales", "123", "--out", str(out)])
    assert code == 0
    assert (out / "ablation.csv").exists()


# ---------------------------------------------------------------------------
# synth-data


def test_synth_data_writes_pairs(tmp_path):
    out = tmp_path / "synth"
    code = run(["synth-data", "--count", "3", "--hw", "32", "--seed", "1", "--out", str(out)])
    assert code == 0
    images = sorted(out.glob("*.ppm"))
    masks = sorted(out.glob("*_mask.pgm"))
    assert len(images) == 3 and len(masks) == 3
    for img in images:
        assert (out / f"{img.stem}_mask.pgm").exists()
    assert (out / "effective-config.json").exists()


# ---------------------------------------------------------------------------
# describe


def test_describe_reports_param_accounting(capsys):
    code = run(["describe", "--hw", "32", "--base-width", "8"])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "closed form" in stdout
    lines = {k.strip(): v.strip() for k, v in
             (line.rsplit(":", 1) for line in stdout.splitlines() if ":" in line)}
    delta = int(lines["fusion overhead (store delta)"])
    closed = int(lines["fusion overhead (closed form)"])
    assert delta == closed
