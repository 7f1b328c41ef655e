import json
import shutil

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from advforge.cli import main
from advforge.config import ConfigError, RunConfig
from advforge.data import write_idx

TINY = {
    "seed": 3,
    "out_dir": "out",
    "per_class": 2,
    "attacks": ["FGS", "FGV", "HC1"],
    "dataset": {"kind": "synthetic", "num_classes": 10,
                "synthetic": {"n_train": 500, "n_test": 200, "size": 16, "background": 32.0}},
    "zoo": [
        {"name": "mlp", "family": "mlp", "seeds": [1, 2],
         "layers": [{"kind": "flatten"}, {"kind": "dense", "units": 10}],
         "train": {"lr": 0.01, "epochs": 2}},
        {"name": "cnn", "family": "cnn", "seeds": [1],
         "layers": [{"kind": "conv2d", "channels": 3, "kernel": 3, "stride": 2}, {"kind": "relu"},
                    {"kind": "flatten"}, {"kind": "dense", "units": 10}],
         "train": {"lr": 0.01, "epochs": 2}},
    ],
}


def write_config(directory, **changes):
    cfg = {**TINY, **changes}
    path = directory / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(config, out, *args):
    return main([args[0], "--config", str(config), "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    cfg = write_config(d)
    out = d / "out"
    for cmd in ("train", "attack", "report"):
        assert run(cfg, out, cmd) == 0
    return cfg, out


# -- config ------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = RunConfig.load(write_config(tmp_path))
    again = RunConfig.loads(cfg.dumps())
    assert again.to_dict() == cfg.to_dict()
    assert RunConfig.loads(again.dumps()).dumps() == cfg.dumps()


def test_shipped_example_validates():
    cfg = RunConfig.load("experiment.example").validate()
    assert sum(len(a.seeds) for a in cfg.zoo) == 8
    assert len({a.family for a in cfg.zoo}) == 2
    assert RunConfig.loads(cfg.dumps()).to_dict() == cfg.to_dict()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), per_class=st.integers(1, 50),
       attacks=st.lists(st.sampled_from(["FGS", "FGV", "HC1"]), min_size=1, unique=True),
       warp=st.sampled_from(["identity", "translation", "affine"]),
       thresholds=st.lists(st.floats(0, 1), max_size=3))
def test_config_round_trip_property(seed, per_class, attacks, warp, thresholds):
    d = {**TINY, "seed": seed, "per_class": per_class, "attacks": attacks, "warp": warp,
         "pass_thresholds": thresholds}
    cfg = RunConfig.from_dict(d)
    assert RunConfig.loads(cfg.dumps()).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("change, match", [
    ({"attacks": ["FGS", "PGD"]}, "unknown attack"),
    ({"warp": "homography"}, "warp"),
    ({"per_class": 0}, "positive"),
    ({"top_k": 11}, "top_k"),
    ({"colour": "red"}, "unknown config keys"),
])
def test_invalid_configs(tmp_path, change, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.load(write_config(tmp_path, **change)).validate()


def test_shape_mismatch_in_zoo(tmp_path):
    zoo = [dict(TINY["zoo"][0], layers=[{"kind": "flatten"}, {"kind": "dense", "units": 7}])]
    with pytest.raises(ConfigError, match="outputs"):
        RunConfig.load(write_config(tmp_path, zoo=zoo)).validate()


def test_missing_dataset_path_fails_before_training(tmp_path, capsys):
    write_idx(tmp_path / "train-images", np.zeros((2, 16, 16)))
    ds = {"kind": "idx", "train_images": "train-images", "train_labels": "missing-labels",
          "test_images": "train-images", "test_labels": "missing-labels"}
    cfg = write_config(tmp_path, dataset=ds)
    out = tmp_path / "never"
    assert run(cfg, out, "train") == 2
    assert "missing-labels" in capsys.readouterr().err
    assert not out.exists()


def test_idx_dataset_config(tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("train", 30), ("test", 10)):
        write_idx(tmp_path / f"{split}-images", rng.integers(0, 256, (n, 16, 16)))
        write_idx(tmp_path / f"{split}-labels", np.arange(n) % 10)
    ds = {"kind": "idx", "train_images": "train-images", "train_labels": "train-labels",
          "test_images": "test-images", "test_labels": "test-labels"}
    cfg = RunConfig.load(write_config(tmp_path, dataset=ds)).validate()
    train, test = cfg.datasets()
    assert train.images.shape == (30, 1, 16, 16) and len(test) == 10


# -- commands ----------------------------------------------------------------

def test_train_outputs(tiny_run):
    _, out = tiny_run
    manifest = json.loads((out / "zoo.json").read_text())
    assert [m["id"] for m in manifest["models"]] == ["mlp-s1", "mlp-s2", "cnn-s1"]
    assert all("top1_error" in m and "top5_error" in m for m in manifest["models"])
    assert len(list((out / "models").glob("*.advzoo"))) == 3


def test_train_rerun_same_manifest(tiny_run, tmp_path):
    cfg, out = tiny_run
    assert run(cfg, tmp_path / "again", "train") == 0
    assert (tmp_path / "again" / "zoo.json").read_bytes() == (out / "zoo.json").read_bytes()


def test_attack_cardinality(tiny_run):
    _, out = tiny_run
    n_images = len(json.loads((out / "evalset" / "meta.json").read_text())["ids"])
    rows = (out / "records.csv").read_text().splitlines()
    assert rows[0] == "image_id,source_model,attack,true_label,adv_label,alpha,l2,linf,pass,success,failure_reason"
    assert len(rows) - 1 == 3 * 3 * n_images


def test_attack_subset(tiny_run, tmp_path):
    cfg, out = tiny_run
    copy = tmp_path / "sub"
    shutil.copytree(out, copy)
    assert run(cfg, copy, "attack", "--attacks", "FGS") == 0
    rows = (copy / "records.csv").read_text().splitlines()[1:]
    assert rows and all(r.split(",")[2] == "FGS" for r in rows)


def test_resume_matches_clean_run(tiny_run, tmp_path):
    cfg, out = tiny_run
    clean = (out / "records.csv").read_text()
    lines = clean.split("\n")
    n_images = len(json.loads((out / "evalset" / "meta.json").read_text())["ids"])
    copy = tmp_path / "resume"
    shutil.copytree(out, copy)
    # interrupted after four chunks, mid-way through writing a fifth row
    torn = "\n".join(lines[:1 + 4 * n_images]) + "\n" + lines[1 + 4 * n_images][:7]
    (copy / "records.csv").write_text(torn)
    (copy / "adv" / "cnn-s1__HC1.idx").unlink()
    assert run(cfg, copy, "attack", "--resume") == 0
    assert (copy / "records.csv").read_text() == clean
    for f in (out / "adv").glob("*.idx"):
        assert (copy / "adv" / f.name).read_bytes() == f.read_bytes()


def test_report_files(tiny_run):
    _, out = tiny_run
    names = {p.name for p in (out / "report").iterdir()}
    for a in ("FGS", "FGV", "HC1"):
        assert {f"portability_{a}.csv", f"portability_{a}_pass0.99.csv"} <= names
    # three models are too few for a rank correlation
    assert not any(n.startswith("correlation_") for n in names)
    assert {"summary.csv", "portability.json", "trends.json", "fig2a-pass-success.dat",
            "fig2b-norms.dat", "fig3-matrix.dat", "correlation-scatter.dat"} <= names
    text = (out / "report" / "portability_FGS.csv").read_text().splitlines()
    assert text[0] == "attack,source\\target,mlp-s1,mlp-s2,cnn-s1"
    for i, row in enumerate(text[1:]):
        assert row.split(",")[2 + i] == "100.00"
    summary = (out / "report" / "summary.csv").read_text().splitlines()
    assert summary[0] == "model,attack,success_rate,n_success,mean_l2,std_l2,mean_linf,std_linf,mean_pass,std_pass"


def test_report_is_reproducible(tiny_run, tmp_path):
    cfg, out = tiny_run
    copy = tmp_path / "rep"
    shutil.copytree(out, copy)
    shutil.rmtree(copy / "report")
    assert run(cfg, copy, "report") == 0
    for f in (out / "report").iterdir():
        assert (copy / "report" / f.name).read_bytes() == f.read_bytes()


def test_verify_ok_and_detects_tampering(tiny_run, tmp_path, capsys):
    cfg, out = tiny_run
    assert run(cfg, out, "verify") == 0
    assert "verify: ok" in capsys.readouterr().out
    copy = tmp_path / "tamper"
    shutil.copytree(out, copy)
    counts = json.loads((copy / "report" / "portability.json").read_text())
    counts[0]["counts"][0][1] += 1
    (copy / "report" / "portability.json").write_text(json.dumps(counts))
    assert run(cfg, copy, "verify") == 1


def test_report_empty_records(tiny_run, tmp_path, capsys):
    cfg, out = tiny_run
    copy = tmp_path / "empty"
    shutil.copytree(out, copy)
    shutil.rmtree(copy / "report")
    header = (out / "records.csv").read_text().splitlines()[0]
    (copy / "records.csv").write_text(header + "\n")
    assert run(cfg, copy, "report") == 2
    assert "no records" in capsys.readouterr().err
    assert not (copy / "report").exists() or not any((copy / "report").iterdir())


def test_report_malformed_row_names_line(tiny_run, tmp_path, capsys):
    cfg, out = tiny_run
    copy = tmp_path / "bad"
    shutil.copytree(out, copy)
    shutil.rmtree(copy / "report")
    lines = (out / "records.csv").read_text().splitlines()
    lines[3] = lines[3].replace("true", "maybe").replace("false", "maybe")
    (copy / "records.csv").write_text("\n".join(lines) + "\n")
    assert run(cfg, copy, "report") == 2
    assert "line 4" in capsys.readouterr().err
    assert not (copy / "report").exists() or not any((copy / "report").iterdir())


def test_missing_zoo_is_an_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run(cfg, tmp_path / "fresh", "attack") == 2
    assert "advforge train" in capsys.readouterr().err
