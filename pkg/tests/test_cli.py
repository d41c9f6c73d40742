import json

import pytest
import yaml

from metaseg import cli
from metaseg.train import Checkpoint

SMALL = ["--scene_size", "32", "--patch", "32"]
TINY_ENC = {"image_size": 32, "C": 16, "heads": 4, "vocab_size": 256}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "d"), "--splits", '{"train": 2, "val": 1, "test": 1}',
                     "--K", "3", *SMALL]) == 0
    assert cli.main(["gen-data", "--out", str(root / "f"), "--splits", '{"test": 1}', "--climates", "Cwa",
                     "--class_names", "building", "tree", "water", *SMALL]) == 0
    cfg = root / "train.yaml"
    cfg.write_text(yaml.safe_dump({"max_epochs": 1, "encoder": TINY_ENC, "precision": "float64"}))
    assert cli.main(["train", "--data", str(root / "d"), "--out", str(root / "run"), "--config", str(cfg),
                     "--learning_rate", "1e-3"]) == 0
    return root


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("best.npz", "final.npz", "history.json", "loss_trace.txt", "config.yaml"):
        assert (run / name).exists()
    ck = Checkpoint.load(run / "final.npz")
    # file value and flag override both land in the snapshot
    assert ck.config["max_epochs"] == 1 and ck.config["learning_rate"] == 1e-3
    assert len(json.loads((run / "history.json").read_text())) == 1


def test_eval_writes_report(workspace, capsys):
    out = workspace / "rep" / "m.txt"
    assert cli.main(["eval", "--checkpoint", str(workspace / "run" / "best.npz"), "--data",
                     str(workspace / "d"), "--out", str(out)]) == 0
    assert "miou=" in capsys.readouterr().out
    assert out.exists() and out.with_name("m_classes.csv").exists()


def test_eval_class_mismatch_is_validation_error(workspace):
    four = workspace / "k4"
    assert cli.main(["gen-data", "--out", str(four), "--splits", '{"test": 1}', "--K", "4", *SMALL]) == 0
    assert cli.main(["eval", "--checkpoint", str(workspace / "run" / "best.npz"), "--data",
                     str(four)]) == 1


def test_zero_shot(workspace, capsys):
    code = cli.main(["zero-shot", "--checkpoint", str(workspace / "run" / "final.npz"), "--data",
                     str(workspace / "f"), "--map", "building=building,tree=tree"])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert [l.split("=")[0] for l in out] == ["iou.building", "iou.tree", "mean_iou"]


@pytest.mark.parametrize("mapping", ["", "building", "roof=building"])
def test_zero_shot_bad_mapping(workspace, mapping):
    assert cli.main(["zero-shot", "--checkpoint", str(workspace / "run" / "final.npz"), "--data",
                     str(workspace / "f"), "--map", mapping]) == 1


def test_prompt_command(tmp_path, capsys):
    out = tmp_path / "b.json"
    assert cli.main(["prompt", "--lat", "52.39", "--lon", "13.06", "--out", str(out)]) == 0
    assert "temperate continental" in capsys.readouterr().out
    assert len(json.loads(out.read_text())["token_ids"]) == 250


def test_ablate_command(workspace):
    out = workspace / "abl"
    code = cli.main(["ablate", "--data", str(workspace / "d"), "--out", str(out), "--cells",
                     "baseline:none", "--seeds", "0", "--max_epochs", "1", "--config",
                     str(workspace / "train.yaml")])
    assert code == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,prompt_mode,seed,miou,status" and len(lines) == 3


def test_check_metrics(capsys):
    assert cli.main(["check", "--suite", "metrics"]) == 0
    assert capsys.readouterr().out.startswith("PASS")


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train", "--data", "x"],
    ["prompt", "--lat", "95", "--lon", "0"],
    ["train", "--data", "/nonexistent", "--out", "/tmp/x"],
])
def test_validation_errors_exit_1(argv):
    assert cli.main(argv) == 1


def test_bad_hyperparameter_exit_1(workspace, tmp_path):
    assert cli.main(["train", "--data", str(workspace / "d"), "--out", str(tmp_path), "--batch_size",
                     "0"]) == 1
    bad = tmp_path / "c.yaml"
    bad.write_text("unknown_field: 3\n")
    assert cli.main(["train", "--data", str(workspace / "d"), "--out", str(tmp_path), "--config",
                     str(bad)]) == 1


def test_numeric_failure_exit_2(workspace, tmp_path, monkeypatch):
    from metaseg.tensor import NumericError

    def boom(*a, **k):
        raise NumericError("non-finite loss at batch e0b0")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--data", str(workspace / "d"), "--out", str(tmp_path)]) == 2


def test_every_train_field_has_a_flag():
    import dataclasses

    from metaseg.train import TrainConfig

    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices["train"]
    flags = {s for a in sub._actions for s in a.option_strings}
    for f in dataclasses.fields(TrainConfig):
        if f.name != "encoder":  # nested; set through the config file
            assert f"--{f.name}" in flags
