"""Config parsing, exit codes, and command round trips on small fixtures."""

import json

import numpy as np
import pytest

import binadapt as ba
from binadapt.cli import ConfigError, ExperimentConfig, main, parse_config
from binadapt.data import write_synthetic_dirs


# ---------------------------------------------------------------------------
# config parsing

def test_defaults_applied():
    cfg = parse_config("")
    assert cfg.h_prec == 0.1
    assert cfg.rho_th == 0.25
    assert cfg.dropout == 0.2
    assert cfg.lambda0 == 0.1
    assert cfg.lambda_inc == 0.01
    assert cfg.patch_h == cfg.patch_w == 32
    assert cfg.depth == 3 and cfg.filters == 8


def test_values_comments_and_whitespace():
    cfg = parse_config(
        """
        # an experiment
        epochs = 7   # inline comment
        seed=3
        source_dir = /data/src
        rho_th = 0.3
        """
    )
    assert cfg.epochs == 7 and cfg.seed == 3
    assert cfg.source_dir == "/data/src"
    assert cfg.rho_th == 0.3


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("learning_rate = 0.1")


def test_bad_value_rejected():
    with pytest.raises(ConfigError, match="bad int"):
        parse_config("epochs = soon")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("epochs = 1\nepochs = 2")


def test_missing_equals_rejected():
    with pytest.raises(ConfigError, match="key=value"):
        parse_config("epochs")


def test_invalid_value_combination_rejected():
    with pytest.raises(ConfigError):
        parse_config("patch_h = 20").train_config()  # not divisible by 2^depth


def test_manifest_config_excludes_out_dir():
    cfg = ExperimentConfig(out_dir="/somewhere")
    assert "out_dir" not in cfg.as_dict()
    assert "out_dir" not in cfg.canonical_text()


# ---------------------------------------------------------------------------
# exit codes

def test_exit_2_on_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("mystery = 4\n")
    code = main(["train-sae", "--config", str(bad), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "error: config:" in capsys.readouterr().err


def test_exit_3_on_missing_data(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(f"source_dir = {tmp_path / 'nowhere'}\n")
    code = main(["train-sae", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == 3
    assert "error: io:" in capsys.readouterr().err


def test_exit_2_on_bad_thread_cap(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("BINADAPT_THREADS", "many")
    code = main(["synth", "--seed", "0", "--out", str(tmp_path / "out")])
    assert code == 2
    assert "BINADAPT_THREADS" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# command round trips

@pytest.fixture(scope="module")
def tiny_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_synthetic_dirs(0, root, n_pages=3, page_size=(64, 64))
    return root


def _cfg_file(tmp_path, data_root, **kw):
    values = {
        "source_dir": data_root / "source",
        "target_dir": data_root / "target_far",
        "epochs": 2,
        "batch": 16,
        "seed": 0,
        "validation_fraction": 0.34,
    }
    values.update(kw)
    path = tmp_path / "exp.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


def test_synth_writes_three_loadable_datasets(tmp_path):
    assert main(["synth", "--seed", "1", "--out", str(tmp_path)]) == 0
    for name in ("source", "target_near", "target_far"):
        assert (tmp_path / name / "images").is_dir()
        assert (tmp_path / name / "gt").is_dir()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 1
    ds = ba.load_dataset(tmp_path / "source", "source", 0.25, 1)
    assert len(ds.records) == 8


def test_train_predict_similarity_flow(tiny_dirs, tmp_path):
    cfg = _cfg_file(tmp_path, tiny_dirs)
    out = tmp_path / "train"
    assert main(["train-sae", "--config", str(cfg), "--out", str(out)]) == 0
    ckpt = out / "sae.ckpt"
    assert ckpt.exists()
    history = (out / "history_sae.csv").read_text().strip().split("\n")
    assert history[0].startswith("epoch,") and len(history) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train-sae"
    assert "config_hash" in manifest and manifest["versions"]["binadapt"]

    page = next((tiny_dirs / "source" / "images").glob("*.pgm"))
    pred_out = tmp_path / "pred"
    assert main(["predict", "--config", str(cfg), "--checkpoint", str(ckpt),
                 "--input", str(page), "--out", str(pred_out)]) == 0
    prob = ba.read_pgm((pred_out / f"{page.stem}.prob.pgm").read_bytes())
    mask = ba.read_pgm((pred_out / f"{page.stem}.mask.pgm").read_bytes())
    assert prob.pixels.shape == (64, 64)
    assert set(np.unique(mask.pixels)) <= {0.0, 1.0}

    # same directory as source and target: correlation must be high
    sim_out = tmp_path / "sim"
    assert main(["similarity", "--config", str(cfg), "--checkpoint", str(ckpt),
                 "--target-dir", str(tiny_dirs / "source"), "--out", str(sim_out)]) == 0
    report = json.loads((sim_out / "report.json").read_text())
    assert report["rho"] >= 0.9
    assert report["decision"] == "UseSAE"
    assert (sim_out / "hist_source.csv").read_text().startswith("bin_low,bin_high,mass")


def test_run_command_emits_all_artifacts(tiny_dirs, tmp_path):
    cfg = _cfg_file(tmp_path, tiny_dirs, epochs=1)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["decision"] in ("UseSAE", "UseDA")
    masks = sorted((out / "binarized").glob("*.pgm"))
    assert len(masks) == 3
    assert (out / "sae.ckpt").exists()
    assert (out / "history_sae.csv").exists()
    # target gt exists on disk, so the post-hoc evaluation table is emitted
    summary = (out / "summary.csv").read_text().strip().split("\n")
    assert summary[0] == "page,f1,precision,recall"
    assert summary[-1].startswith("overall,")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["decision"] == report["decision"]
    if report["decision"] == "UseDA":
        assert (out / "bindann.ckpt").exists()
        assert (out / "history_bindann.csv").exists()


def test_run_without_target_gt_skips_evaluation(tiny_dirs, tmp_path):
    import shutil

    bare = tmp_path / "bare_target"
    shutil.copytree(tiny_dirs / "target_far", bare)
    shutil.rmtree(bare / "gt")
    cfg = _cfg_file(tmp_path, tiny_dirs, epochs=1, target_dir=bare)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "report.json").exists()
    assert len(list((out / "binarized").glob("*.pgm"))) == 3
    assert not (out / "summary.csv").exists()
