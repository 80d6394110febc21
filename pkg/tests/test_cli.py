import csv
import json
import subprocess
import sys

import pytest

from twoview.cli import run_cli


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> patchify -> train-sv -> train-mv on a tiny joint-code set."""
    d = tmp_path_factory.mktemp("cli")
    assert run_cli(["synth", "--classes", "4", "--specimens", "3", "--image-size", "48", "--mode", "joint-code",
                    "--out", str(d / "data")]) == 0  # fmt: skip
    assert run_cli(["patchify", "--manifest", str(d / "data/manifest.jsonl"), "--patch-size", "32",
                    "--patches-per-image", "3", "--target", "8", "--val-fraction", "0", "--variants", "1",
                    "--out", str(d / "patches")]) == 0  # fmt: skip
    assert run_cli(["train-sv", "--patches", str(d / "patches"), "--epochs", "1", "--feature-dim", "32",
                    "--out", str(d / "sv")]) == 0  # fmt: skip
    assert run_cli(["train-mv", "--sv-checkpoint", str(d / "sv/sv.ckpt"), "--patches", str(d / "patches"),
                    "--epochs", "2", "--out", str(d / "mv")]) == 0  # fmt: skip
    return d


def test_validate_clean(pipeline, capsys):
    assert run_cli(["validate", "--manifest", str(pipeline / "data/manifest.jsonl"), "--check-files"]) == 0
    assert "0 violations" in capsys.readouterr().out


def test_validate_reports_violations(tmp_path, capsys):
    p = tmp_path / "m.jsonl"
    p.write_text('{"version":1,"classes":["WW"]}\n{"image_id":"a","path":"x.png","class":"ZZ","view":"surface","specimen_id":"s"}\n')
    assert run_cli(["validate", "--manifest", str(p)]) == 2
    assert _err(capsys)["command"] == "validate"


def test_train_mv_needs_checkpoint(pipeline, tmp_path, capsys):
    assert run_cli(["train-mv", "--patches", str(pipeline / "patches"), "--epochs", "1", "--out", str(tmp_path)]) == 2
    err = _err(capsys)
    assert err["command"] == "train-mv" and "missing prerequisite" in err["message"]


def test_usage_errors_exit_one(pipeline, capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["no-such-command"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run_cli(["train-mv", "--fusion", "sum"])
    assert exc.value.code == 1
    assert run_cli(["train-sv", "--patches", str(pipeline / "patches")]) == 1  # no --epochs
    assert "--epochs is required" in capsys.readouterr().err
    assert run_cli([]) == 1


def test_stage_outputs(pipeline):
    assert {p.name for p in (pipeline / "sv").iterdir()} >= {"sv.ckpt", "extractor.ckpt", "history.csv", "config.json"}
    cfg = json.loads((pipeline / "mv/config.json").read_text())
    assert cfg["fusion"] == "maxpool" and cfg["pairing"] == "specimen_first" and "resolved_seeds" in cfg
    rows = list(csv.DictReader((pipeline / "mv/history.csv").open()))
    assert [r["epoch"] for r in rows] == ["1", "2"]


def test_config_file_and_flag_precedence(pipeline, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"epochs": 1, "fusion": "concat", "lr": 1e-3}))
    out = tmp_path / "run"
    assert run_cli(["train-mv", "--config", str(conf), "--sv-checkpoint", str(pipeline / "sv/sv.ckpt"),
                    "--patches", str(pipeline / "patches"), "--lr", "5e-4", "--out", str(out)]) == 0  # fmt: skip
    cfg = json.loads((out / "config.json").read_text())
    assert (cfg["epochs"], cfg["fusion"], cfg["lr"]) == (1, "concat", 5e-4)


def test_eval_report_and_export(pipeline, tmp_path, capsys):
    rep = tmp_path / "report.json"
    argv = ["eval", "--checkpoint", str(pipeline / "sv/sv.ckpt"), "--checkpoint", str(pipeline / "mv/mv.ckpt"),
            "--patches", str(pipeline / "patches"), "--report-out", str(rep)]  # fmt: skip
    assert run_cli(argv) == 0
    text = capsys.readouterr().out
    assert "Surf P" in text and "Mix R" in text
    data = json.loads(rep.read_text())
    assert [(r["model_id"], r["context"]) for r in data["rows"]] == [
        ("SV-mini", "surface"), ("SV-mini", "section"), ("SV-mini", "mixed"), ("MV-mini-maxpool", "paired"),
    ]  # fmt: skip
    assert set(data["seeds"]["checkpoints"]) == {"sv.ckpt", "mv.ckpt"}
    first = rep.read_bytes()
    assert run_cli(argv) == 0
    assert rep.read_bytes() == first

    out = tmp_path / "f.csv"
    assert run_cli(["export-features", "--checkpoint", str(pipeline / "mv/mv.ckpt"), "--patches", str(pipeline / "patches"),
                    "--out", str(out)]) == 0  # fmt: skip
    header = next(csv.reader(out.open()))
    assert header[:3] == ["item_id", "true_class", "context"] and len(header) == 3 + 32
    assert json.loads((tmp_path / "f.csv.meta.json").read_text())["rows"] > 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "twoview", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "0.1.0"
