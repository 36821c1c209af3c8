import json
from dataclasses import asdict

import pytest

from vicprompt.backbone import load_backbone, reconstruction_error
from vicprompt.cli import main
from vicprompt.data import load_dataset
from vicprompt.prompt import load_prompt

from conftest import TINY


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {"seed": 4, "data": {"classes": ["circle", "square", "star", "ring"], "per_class_count": 6},
           "backbone": {k: v for k, v in asdict(TINY).items()},
           "train": {"epochs": 2, "batch_size": 8, "learning_rate": 0.05}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["gen-data", "--config", str(root / "cfg.json"), "--out", str(root / "data")]) == 0
    assert main(["pretrain", "--config", str(root / "cfg.json"), "--data", str(root / "data" / "all"),
                 "--out", str(root / "bb"), "--workers", "1"]) == 0
    return root


def test_gen_data_layout_and_rerun(workspace, tmp_path):
    data = workspace / "data"
    manifest = json.loads((data / "all" / "manifest.json").read_text())
    assert len(manifest["pairs"]) == 24
    assert len(list((data / "all").glob("*_input.png"))) == len(list((data / "all").glob("*_label.png"))) == 24
    assert sorted(p.name for p in data.glob("fold*")) == ["fold0", "fold1"]
    echo = json.loads((data / "config.json").read_text())
    assert echo["data"]["seed"] == 4 and echo["data"]["per_class_count"] == 6
    assert main(["gen-data", "--config", str(workspace / "cfg.json"), "--out", str(tmp_path)]) == 0
    for f in (data / "all").iterdir():
        assert (tmp_path / "all" / f.name).read_bytes() == f.read_bytes()


def test_flags_override_config(workspace, tmp_path):
    assert main(["gen-data", "--config", str(workspace / "cfg.json"), "--per-class", "2", "--seed", "9",
                 "--folds", "1", "--out", str(tmp_path)]) == 0
    echo = json.loads((tmp_path / "config.json").read_text())
    assert echo["data"]["per_class_count"] == 2 and echo["seed"] == 9
    assert len(load_dataset(tmp_path / "all")) == 8


def test_pretrain_outputs(workspace, capsys):
    bb = workspace / "bb"
    b = load_backbone(bb / "backbone.ckpt")
    assert (bb / "fingerprint.txt").read_text().strip() == b.fingerprint
    echo = json.loads((bb / "config.json").read_text())
    data = load_dataset(workspace / "data" / "all")
    assert echo["reconstruction_mae"] == reconstruction_error(b, [data], seed=4)


def test_corrupt_backbone_rejected(workspace, tmp_path):
    raw = bytearray((workspace / "bb" / "backbone.ckpt").read_bytes())
    raw[-5] ^= 0x40
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(Exception):
        load_backbone(tmp_path / "bad.ckpt")


def _train(workspace, out, *extra):
    return main(["train-prompt", "--config", str(workspace / "cfg.json"), "--backbone",
                 str(workspace / "bb" / "backbone.ckpt"), "--train", str(workspace / "data" / "fold0" / "train"),
                 "--out", str(out), *extra])


def test_train_prompt_history_and_reproducibility(workspace, tmp_path):
    assert _train(workspace, tmp_path / "a") == 0
    assert _train(workspace, tmp_path / "b") == 0
    lines = (tmp_path / "a" / "history.csv").read_text().splitlines()
    assert len(lines) == 1 + 2
    assert (tmp_path / "a" / "prompt.ckpt").read_bytes() == (tmp_path / "b" / "prompt.ckpt").read_bytes()


def test_zero_epochs_gives_zero_prompt(workspace, tmp_path):
    assert _train(workspace, tmp_path, "--epochs", "0") == 0
    assert not load_prompt(tmp_path / "prompt.ckpt").theta.any()


def test_eval_baseline_only_and_records(workspace, tmp_path):
    args = ["eval", "--config", str(workspace / "cfg.json"), "--backbone", str(workspace / "bb" / "backbone.ckpt"),
            "--data", str(workspace / "data"), "--baseline-only", "--save-records", "--out", str(tmp_path)]
    assert main(args) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["kind"] == "fold" and len(rep["rows"]) == 2
    assert set(rep["rows"][0]) == {"fold", "baseline_mIoU"}
    assert (tmp_path / "records" / "baseline" / "fold0" / "records.json").exists()
    assert rep["config"]["baseline_only"] is True


def test_eval_train_report_and_render(workspace, tmp_path):
    args = ["eval", "--config", str(workspace / "cfg.json"), "--backbone", str(workspace / "bb" / "backbone.ckpt"),
            "--data", str(workspace / "data"), "--fold", "0", "--grid", "3", "--out", str(tmp_path / "ev")]
    assert main(args) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert set(rep["summary"]) >= {"baseline_mIoU", "prompt_mIoU", "gain"}
    assert (tmp_path / "ev" / "grid.png").exists()
    rec = tmp_path / "ev" / "records"
    data = workspace / "data" / "fold0"
    render = ["render", "--baseline", str(rec / "baseline" / "fold0"), "--prompted", str(rec / "prompt" / "fold0"),
              "--queries", str(data / "test"), "--pool", str(data / "train"), "--columns", "3",
              "--out", str(tmp_path / "r")]
    assert main(render) == 0
    assert (tmp_path / "r" / "grid.png").read_bytes() == (tmp_path / "ev" / "grid.png").read_bytes()
    render[render.index("--baseline") + 1] = str(tmp_path / "nowhere")
    assert main(render) != 0


def test_unknown_ablation_is_usage_error(workspace, capsys):
    with pytest.raises(SystemExit) as e:
        main(["ablate", "bogus", "--backbone", "x", "--data", "y"])
    assert e.value.code == 2
    assert "unknown ablation" in capsys.readouterr().err


def test_ablate_placement_rows(workspace, tmp_path):
    args = ["ablate", "placement", "--config", str(workspace / "cfg.json"), "--epochs", "1",
            "--backbone", str(workspace / "bb" / "backbone.ckpt"), "--data", str(workspace / "data"),
            "--out", str(tmp_path)]
    assert main(args) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert [r["placement"] for r in rep["rows"]] == ["baseline", "I", "Q", "I&Q", "I&L", "I,L&Q"]
    assert rep["config"]["train"]["epochs"] == 1


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert main(["train-prompt", "--backbone", str(tmp_path / "none.ckpt"), "--train", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 2
    assert "does not exist" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
