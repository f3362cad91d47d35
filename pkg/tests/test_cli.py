import json
from pathlib import Path

import numpy as np
import pytest

from hfprune.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from hfprune.cli import main
from hfprune.graph import tinyresnet
from hfprune.network import Model
from hfprune.reports import EPOCH_HEADER, LAYER_HEADER, PROPORTIONAL_HEADER, dump_logs, load_logs, read_csv

SMALL = ["--data", "synth", "--synth-train", "200", "--synth-test", "60"]


def run(capsys, *args):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def one_json_line(text):
    lines = [l for l in text.splitlines() if l.strip()]
    assert len(lines) == 1, text
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def pruned_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["prune", *SMALL, "--epochs", "2", "--batch-size", "32", "--lambda-target", "30",
                 "--fine-tune-epochs", "1", "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


def test_prune_writes_manifest_and_artifacts(pruned_run):
    manifest = json.loads((pruned_run / "run.json").read_text())
    assert manifest["status"] == "ok"
    for rel in manifest["artifacts"].values():
        assert (pruned_run / rel).exists()
    for name in ("started", "finished"):
        assert manifest[name]
    assert set(manifest["achieved_rates"]) == {"params", "mults"}
    assert manifest["config"]["seed"] == 3
    assert manifest["lambda"]["target"] == 30.0


def test_csvs_follow_headers(pruned_run):
    epochs = read_csv(pruned_run / "epochs.csv")
    assert [r["stage"] for r in epochs] == ["baseline"] * 2 + ["sparsity"] * 2 + ["finetune"]
    layers = read_csv(pruned_run / "layers.csv")
    assert [int(r["layer_id"]) for r in layers] == [0, 3, 7, 10, 14, 18, 21]
    assert (pruned_run / "epochs.csv").read_text().splitlines()[0] == ",".join(EPOCH_HEADER)
    assert (pruned_run / "layers.csv").read_text().splitlines()[0] == ",".join(LAYER_HEADER)
    assert (pruned_run / "proportional.csv").read_text().splitlines()[0] == ",".join(PROPORTIONAL_HEADER)
    shares = [float(r["params_share"]) for r in layers]
    assert sum(shares) == pytest.approx(1.0, abs=1e-6) or sum(shares) == 0.0


def test_csv_round_trip(pruned_run):
    logs = load_logs(pruned_run / "logs.json")
    for row, e in zip(read_csv(pruned_run / "epochs.csv"), logs.epochs):
        assert float(row["lr"]) == e.lr and float(row["total_loss"]) == e.total_loss
        assert int(row["effective_params"]) == e.effective_params


def test_report_regenerates_identical_csvs(pruned_run, tmp_path, capsys):
    code, out, _ = run(capsys, "report", "--run", pruned_run, "--out", tmp_path)
    assert code == 0 and one_json_line(out)["status"] == "ok"
    for name in ("epochs.csv", "layers.csv", "proportional.csv"):
        assert (tmp_path / name).read_bytes() == (pruned_run / name).read_bytes()


def test_logs_json_round_trip(pruned_run, tmp_path):
    logs = load_logs(pruned_run / "logs.json")
    dump_logs(tmp_path / "logs.json", logs.epochs, logs.layers)
    assert (tmp_path / "logs.json").read_bytes() == (pruned_run / "logs.json").read_bytes()


def test_eval_and_export(pruned_run, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", pruned_run / "pruned", *SMALL)
    unfolded = one_json_line(out)
    assert code == 0 and unfolded["batchnorm_layers"] > 0
    code, out, _ = run(capsys, "export", "--checkpoint", pruned_run / "pruned", "--out", tmp_path / "folded")
    assert code == 0
    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "folded", *SMALL)
    folded = one_json_line(out)
    assert folded["batchnorm_layers"] == 0
    assert folded["accuracy"] == unfolded["accuracy"]
    assert (folded["params"], folded["mults"]) == (unfolded["params"], unfolded["mults"])


def test_train_baseline_then_prune_from_checkpoint(tmp_path, capsys):
    base_dir = tmp_path / "base"
    code, out, _ = run(capsys, "train-baseline", *SMALL, "--epochs", "1", "--batch-size", "50", "--out", base_dir)
    assert code == 0
    assert json.loads((base_dir / "run.json").read_text())["status"] == "ok"
    code, out, _ = run(capsys, "prune", *SMALL, "--baseline", base_dir / "checkpoint", "--epochs", "1",
                       "--batch-size", "50", "--fine-tune-epochs", "0", "--out", tmp_path / "p")
    assert code == 0
    manifest = json.loads((tmp_path / "p" / "run.json").read_text())
    assert "baseline_checkpoint" not in manifest["artifacts"]
    assert [r["stage"] for r in read_csv(tmp_path / "p" / "epochs.csv")] == ["sparsity"]


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch-size": 50, "seed": 11, "synth_train": 100, "synth_test": 20}))
    code, _, _ = run(capsys, "train-baseline", "--config", cfg, "--seed", "12", "--out", tmp_path / "o")
    assert code == 0
    conf = json.loads((tmp_path / "o" / "run.json").read_text())["config"]
    assert (conf["epochs"], conf["batch_size"], conf["seed"], conf["synth_train"]) == (1, 50, 12, 100)
    assert conf["lr_start"] == 0.02  # untouched default


# ---------------------------------------------------------------------------
# failures


def test_rate_out_of_range(tmp_path, capsys):
    code, out, err = run(capsys, "prune", *SMALL, "--target-params-rate", "1.5", "--out", tmp_path)
    assert code == 1 and out == ""
    diag = one_json_line(err)
    assert diag["status"] == "error" and "[0, 1]" in diag["message"]
    assert json.loads((tmp_path / "run.json").read_text())["status"] == "error"


@pytest.mark.parametrize("args,needle", [
    (["eval", "--checkpoint", "/nonexistent/ckpt"], "manifest"),
    (["prune", "--lambda-target", "lots", "--out", "x"], "lambda-target"),
    (["frobnicate"], "invalid choice"),
    (["prune"], "--out"),
    (["eval", "--checkpoint", "c", "--data", "imagenet"], "synth"),
])
def test_failures_are_single_json_lines(capsys, args, needle):
    code, out, err = run(capsys, *args)
    assert code != 0 and out == ""
    diag = one_json_line(err)
    assert diag["status"] == "error" and needle in diag["message"]


def test_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    code, _, err = run(capsys, "train-baseline", "--config", cfg, "--out", tmp_path / "o")
    assert code == 2 and "not valid JSON" in one_json_line(err)["message"]
    cfg.write_text(json.dumps({"epohcs": 3}))
    code, _, err = run(capsys, "train-baseline", "--config", cfg, "--out", tmp_path / "o")
    assert code == 2 and "epohcs" in one_json_line(err)["message"]


def test_corrupt_checkpoint(tmp_path, capsys):
    model = Model.init(tinyresnet(), seed=0)
    ckpt = save_checkpoint(model, tmp_path / "c")
    back = load_checkpoint(ckpt)
    for (na, a), (nb, b) in zip(model.state_arrays(), back.state_arrays()):
        assert na == nb and np.array_equal(a, b)
    blob = (ckpt / "weights.bin").read_bytes()
    (ckpt / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="past the end"):
        load_checkpoint(ckpt)
    code, _, err = run(capsys, "eval", "--checkpoint", ckpt, *SMALL)
    assert code == 1 and one_json_line(err)["error"] == "CheckpointError"


def test_prune_is_byte_deterministic(pruned_run, tmp_path):
    again = tmp_path / "again"
    assert main(["prune", *SMALL, "--epochs", "2", "--batch-size", "32", "--lambda-target", "30",
                 "--fine-tune-epochs", "1", "--seed", "3", "--out", str(again)]) == 0
    files = sorted(p.relative_to(pruned_run) for p in pruned_run.rglob("*") if p.is_file() and p.name != "run.json")
    assert files == sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file() and p.name != "run.json")
    for rel in files:
        assert (pruned_run / rel).read_bytes() == (again / rel).read_bytes(), rel
