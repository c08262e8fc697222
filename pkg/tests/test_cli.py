"""Command line tests, driven through main() with temp directories."""

import pytest

from nve.cli import main
from nve.data import load_dataset
from nve.ensemble import build_preset, load_core
from nve.experiment import records_from_csv

TINY_CFG = """\
# small, fast settings
dims = 10,12,10
slice_k = 4
width_scale = 0.12
feature_dim = 8
n_per_class = 6
epochs = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    return root, cfg


def test_gen_data_writes_a_loadable_dataset(workspace, capsys):
    root, cfg = workspace
    out = root / "ds"
    assert main(["gen-data", "--spec", str(cfg), "--seed", "5",
                 "--out", str(out)]) == 0
    assert "wrote 12 samples" in capsys.readouterr().out
    dataset = load_dataset(out)
    assert len(dataset) == 12
    assert (out / "manifest.txt").exists()


def test_pretrain_writes_named_snapshots(workspace, capsys):
    root, cfg = workspace
    out = root / "snaps"
    assert main(["pretrain", "--kinds", "densenet,squeezenet", "--epochs",
                 "1", "--seed", "0", "--out", str(out),
                 "--config", str(cfg)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert (out / "proxy_densenet.nvw").exists()
    assert (out / "proxy_squeezenet.nvw").exists()
    assert any("proxy_densenet.nvw" in line for line in lines)


def test_pretrain_rejects_unknown_kind(workspace, capsys):
    root, cfg = workspace
    code = main(["pretrain", "--kinds", "resnext", "--out",
                 str(root / "x"), "--config", str(cfg)])
    assert code == 2
    assert "unknown kind 'resnext'" in capsys.readouterr().err


def test_train_prints_history_and_saves_weights(workspace, capsys):
    root, cfg = workspace
    run_cfg = root / "train.cfg"
    run_cfg.write_text(TINY_CFG.replace("epochs = 1", "epochs = 2")
                       + f"dataset_dir = {root / 'ds'}\n")
    model_path = root / "core.nvw"
    assert main(["train", "--config", str(run_cfg),
                 "--save-model", str(model_path)]) == 0
    out = capsys.readouterr().out
    assert "epoch 0:" in out and "epoch 1:" in out
    assert "test accuracy:" in out
    core = build_preset(1, False, 0, in_channels=4, feature_dim=8,
                        width_scale=0.12)
    load_core(model_path, core)  # shapes and names must line up


def test_train_reports_config_errors(workspace, capsys):
    root, _ = workspace
    bad = root / "bad.cfg"
    bad.write_text("architecture_id = 9\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "architecture_id" in capsys.readouterr().err


def test_grid_runs_are_byte_identical(workspace, capsys):
    root, cfg = workspace
    snaps = root / "grid-snaps"
    first = root / "r1.csv"
    second = root / "r2.csv"
    for out in (first, second):
        assert main(["grid", "--archs", "1", "--master-seed", "7",
                     "--out", str(out), "--config", str(cfg),
                     "--snapshot-dir", str(snaps)]) == 0
    capsys.readouterr()
    assert first.read_bytes() == second.read_bytes()
    records = records_from_csv(first.read_text())
    assert len(records) == 8
    assert {r.model for r in records} == {"Architecture 1"}
    # both pretrained and fresh cells are present
    assert {r.pre_trained for r in records} == {True, False}


def test_grid_rejects_bad_architecture(workspace, capsys):
    root, cfg = workspace
    code = main(["grid", "--archs", "5", "--out", str(root / "r.csv"),
                 "--config", str(cfg)])
    assert code == 2
    assert "architecture id" in capsys.readouterr().err


def test_report_formats_round_trip(workspace, capsys):
    root, _ = workspace
    csv_path = root / "r1.csv"
    assert main(["report", "--in", str(csv_path), "--format", "md"]) == 0
    md = capsys.readouterr().out
    assert md.startswith("| model |")
    assert main(["report", "--in", str(csv_path), "--format", "csv"]) == 0
    assert capsys.readouterr().out == csv_path.read_text()


def test_report_missing_file_fails_cleanly(workspace, capsys):
    root, _ = workspace
    assert main(["report", "--in", str(root / "absent.csv")]) == 2
    assert "error:" in capsys.readouterr().err
