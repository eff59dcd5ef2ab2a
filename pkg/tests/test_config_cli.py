import json

import pytest
from click.testing import CliRunner

from sift.cli import main
from sift.config import ConfigError, RunConfig, parse_override, preset_path

TINY_TREE = {
    "seed": 5,
    "synth": {"n_patients": 10, "abnormal_fraction": 0.3, "slices_per_volume": 8, "slice_shape": [48, 48],
              "lesion_radius_range": [3, 5], "lesion_z_extent": 3},
    "augment": {"output_size": 32},
    "encoder": {"kind": "small_cnn", "input_size": [32, 32], "embedding_dim": 16, "width": 4},
    "pretrain": {"epochs": 1, "batch_size": 8, "queue_size": 16, "anchors_per_epoch": 16},
    "finetune": {"patch_size": 32, "epochs": 1, "batch_size": 4, "label_window": 1,
                 "max_batches_per_epoch": 2},
    "preprocess": {"short_side": 40, "pad": 4},
    "evaluate": {"n_patches": 2, "sweep": [1, 2]},
}


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="pretrain.epochz"):
        RunConfig.load(None, ["pretrain.epochz=3"])
    with pytest.raises(ConfigError, match="nosuch"):
        RunConfig({"nosuch": 1})


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["finetune.mode=adapter"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["split.ratios=[0.5,0.5]"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["finetune.init=imagenet"])


def test_override_parsing():
    assert parse_override("pretrain.epochs=2") == {"pretrain": {"epochs": 2}}
    assert parse_override("policy.kind=sift") == {"policy": {"kind": "sift"}}
    cfg = RunConfig.load(None, ["pretrain.epochs=2", "encoder.input_size=[64,64]"])
    assert cfg.pretrain().epochs == 2 and cfg.encoder().input_size == (64, 64)


def test_hash_stable_under_key_order(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps({"seed": 1, "pretrain": {"epochs": 3, "batch_size": 8}}))
    b.write_text(json.dumps({"pretrain": {"batch_size": 8, "epochs": 3}, "seed": 1}))
    assert RunConfig.load(a).hash == RunConfig.load(b).hash
    assert RunConfig.load(a).hash != RunConfig.load(a, ["seed=2"]).hash


@pytest.mark.parametrize("name", ["desk", "full"])
def test_presets_load(name):
    assert preset_path(name).is_file()
    cfg = RunConfig.load(name)
    assert cfg.finetune().mode == "discriminative" and cfg.policy().kind == "sift"


def test_full_preset_values():
    cfg = RunConfig.load("full")
    pt, ft = cfg.pretrain(), cfg.finetune()
    assert (pt.temperature, pt.momentum, pt.queue_size) == (0.2, 0.99, 4096)
    assert (ft.patch_size, ft.eta, ft.epochs, ft.batch_size) == (448, 2.8, 50, 32)
    assert cfg.section("evaluate")["n_patches"] == 20


def invoke(runner, args):
    res = runner.invoke(main, args, catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return res


def test_cli_unknown_key_exits_nonzero(tmp_path):
    res = CliRunner().invoke(main, ["generate", "--out", str(tmp_path / "g"), "--set", "synth.bogus=1"])
    assert res.exit_code != 0
    assert "synth.bogus" in res.output


def test_cli_tiny_pipeline(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY_TREE))
    c = ["--config", str(cfg)]
    r = CliRunner()
    d = tmp_path
    invoke(r, ["generate", "--out", str(d / "data"), *c])
    invoke(r, ["preprocess", "--manifest", str(d / "data" / "manifest.csv"), "--out", str(d / "pre"), *c])
    invoke(r, ["split", "--manifest", str(d / "pre" / "manifest.csv"), "--out", str(d / "split"), *c])
    for part in ("train", "val", "test"):
        assert (d / "split" / f"{part}.csv").is_file()
    manifest = str(d / "pre" / "manifest.csv")
    invoke(r, ["pretrain", "--manifest", manifest, "--out", str(d / "pt"), *c])
    invoke(r, ["finetune", "--ckpt", str(d / "pt"), "--manifest", manifest, "--val", manifest,
               "--out", str(d / "ft"), *c])
    invoke(r, ["finetune", "--init", "random", "--manifest", manifest, "--out", str(d / "ft_rand"), *c])
    invoke(r, ["evaluate", "--ckpt", str(d / "ft"), "--manifest", manifest, "--out", str(d / "ev"), *c])
    invoke(r, ["report", "--scores", str(d / "ev"), "--val-scores", str(d / "ev"), "--out", str(d / "rep"), *c])
    invoke(r, ["sweep-patches", "--ckpt", str(d / "ft"), "--manifest", manifest, "--out", str(d / "sw"), *c])
    invoke(r, ["plot-roc", "--in", str(d / "rep" / "roc_volume.csv"), "--out", str(d / "roc.svg")])

    for sub in ("data", "pre", "split", "pt", "ft", "ft_rand", "ev", "rep", "sw"):
        prov = json.loads((d / sub / "provenance.json").read_text())
        assert prov["seed"] == 5 and prov["config"]["seed"] == 5
    rep = json.loads((d / "rep" / "report.json").read_text())
    assert set(rep) == {"slice", "volume", "threshold_source"} and rep["threshold_source"] == "val"
    assert "accuracy" not in rep["volume"] and 0.0 <= rep["volume"]["auc"] <= 1.0
    assert (d / "sw" / "sweep.csv").read_text().splitlines()[0].startswith("n_patches,slice_auc")
    assert (d / "roc.svg").read_text().lstrip().startswith("<?xml")

    missing = CliRunner().invoke(main, ["finetune", "--manifest", manifest, "--out", str(d / "x"), *c])
    assert missing.exit_code != 0 and "--ckpt" in missing.output
