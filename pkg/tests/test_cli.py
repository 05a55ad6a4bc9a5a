import json

import pytest

from abdtrauma.cli import PipelineConfig, main
from abdtrauma.errors import ConfigurationError

TINY = {
    "phantom": {"volume_depth": 24, "volume_height": 24, "volume_width": 24},
    "prep": {"seq_len": 4, "height": 16, "width": 16},
    "segmenter": {"size": 16, "steps": 3, "widths": [4, 8, 8]},
    "traumanet": {"epochs": 2, "widths": [4, 4, 8, 8], "hidden": 4},
}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def dataset(tmp_path, cfg):
    out = tmp_path / "data"
    assert main(["gen", "--config", cfg, "--seed", "7", "--count", "4", "--out", str(out)]) == 0
    return out


def test_gen_layout_and_determinism(tmp_path, cfg, dataset):
    ids = json.loads((dataset / "manifest.json").read_text())["study_ids"]
    assert len(ids) == 4
    for sid in ids:
        assert {p.name for p in (dataset / sid).iterdir()} >= {"volume.raw", "labels.json", "mask_liver.raw"}
    again = tmp_path / "again"
    assert main(["gen", "--config", cfg, "--seed", "7", "--count", "4", "--out", str(again)]) == 0
    for p in dataset.rglob("*"):
        if p.is_file() and p.name != "run_manifest.json":
            assert p.read_bytes() == (again / p.relative_to(dataset)).read_bytes()


def test_usage_errors(capsys):
    assert main(["gen", "--count", "3"]) == 2
    assert main(["nonsense"]) == 2
    assert main([]) == 2


def test_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"phantom": {"volume_depth": 24}, "extra": 1}))
    assert main(["gen", "--config", str(bad), "--count", "1", "--out", str(tmp_path / "x")]) == 2
    bad.write_text(json.dumps({"traumanet": {"n_classes": 3}}))
    assert main(["gen", "--config", str(bad), "--count", "1", "--out", str(tmp_path / "x")]) == 2


def test_config_rejects_unknown_nested():
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict({"prep": {"window": 3}})
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict({"traumanet": {"learning_rate": 3}})
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict({"folds": {"k": 1}})


def test_missing_dataset(tmp_path, cfg, capsys):
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m")]) == 1
    assert "error" in capsys.readouterr().err


def test_train_folds_and_full(tmp_path, cfg, dataset):
    out = tmp_path / "m"
    assert main(["train", "--config", cfg, "--data", str(dataset), "--folds", "2", "--seed", "1", "--out", str(out)]) == 0
    assert sorted(p.parent.name for p in out.glob("*/params.bin")) == ["fold0", "fold1"]
    man = json.loads((out / "fold0" / "manifest.json").read_text())
    assert man["seed"] == 1 and len(man["loss_history"]["train"]) == 3
    full = tmp_path / "full"
    assert main(["train", "--config", cfg, "--data", str(dataset), "--folds", "full", "--out", str(full)]) == 0
    assert [p.parent.name for p in full.glob("*/params.bin")] == ["full"]


def test_predict_ensemble_eval(tmp_path, cfg, dataset):
    models, preds, rep = tmp_path / "m", tmp_path / "p", tmp_path / "r"
    assert main(["train", "--config", cfg, "--data", str(dataset), "--folds", "2", "--out", str(models)]) == 0
    assert main(["predict", "--config", cfg, "--data", str(dataset), "--models", str(models), "--out", str(preds)]) == 0
    files = sorted(str(p) for p in preds.glob("preds_fold*.json"))
    assert len(files) == 2
    assert main(["ensemble", "--preds", *files, "--out", str(preds)]) == 0
    assert main(["eval", "--data", str(dataset), "--preds", str(preds / "preds_ensemble.json"), "--out", str(rep)]) == 0
    report = json.loads((rep / "report.json").read_text())
    assert {"final_score", "group_losses", "any_injury_loss", "settings"} <= set(report)
    assert report["settings"]["clip"] == 1e-15


def test_single_file_ensemble_identity(tmp_path, cfg, dataset):
    models, preds = tmp_path / "m", tmp_path / "p"
    main(["train", "--config", cfg, "--data", str(dataset), "--folds", "full", "--out", str(models)])
    main(["predict", "--config", cfg, "--data", str(dataset), "--models", str(models), "--out", str(preds)])
    assert main(["ensemble", "--preds", str(preds / "preds_full.json"), "--out", str(tmp_path / "e.json")]) == 0
    a = json.loads((preds / "preds_full.json").read_text())["studies"]
    b = json.loads((tmp_path / "e.json").read_text())["studies"]
    assert a == b


def test_eval_perfect_predictions(tmp_path, dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    studies = {}
    for sid in manifest["study_ids"]:
        labels = json.loads((dataset / sid / "labels.json").read_text())
        studies[sid] = {}
        for g in manifest["schema"]["groups"]:
            probs = [0.0] * len(g["states"])
            probs[labels[g["name"]]] = 1.0
            studies[sid][g["name"]] = probs
    path = tmp_path / "preds_perfect.json"
    path.write_text(json.dumps({"model": "perfect", "schema": manifest["schema"], "studies": studies}))
    assert main(["eval", "--data", str(dataset), "--preds", str(path), "--out", str(tmp_path / "r")]) == 0
    assert json.loads((tmp_path / "r" / "report.json").read_text())["final_score"] < 1e-6


def test_schema_mismatch_names_field(tmp_path, dataset, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    schema = manifest["schema"]
    schema["groups"][0]["healthy"] = 1
    path = tmp_path / "preds_x.json"
    studies = {sid: {g["name"]: [1.0] * len(g["states"]) for g in schema["groups"]} for sid in manifest["study_ids"]}
    path.write_text(json.dumps({"model": "x", "schema": schema, "studies": studies}))
    assert main(["eval", "--data", str(dataset), "--preds", str(path), "--out", str(tmp_path / "r")]) == 1
    assert "healthy" in capsys.readouterr().err


def test_segment_prep_folds(tmp_path, cfg, dataset):
    seg, prep, folds = tmp_path / "s", tmp_path / "pp", tmp_path / "f"
    assert main(["segment", "--config", cfg, "--data", str(dataset), "--out", str(seg)]) == 0
    assert len(list(seg.glob("seg_*.json"))) == 4
    assert (seg / "model" / "params.bin").exists()
    assert main(["prep", "--config", cfg, "--data", str(dataset), "--masks", str(seg), "--out", str(prep)]) == 0
    meta = json.loads((prep / "prep_study_0000.json").read_text())
    assert meta["shape"] == [4, 3, 16, 16]
    assert (prep / "prep_study_0000.raw").stat().st_size == 4 * 3 * 16 * 16 * 4
    assert main(["folds", "--config", cfg, "--data", str(dataset), "--k", "2", "--out", str(folds)]) == 0
    spec = json.loads((folds / "folds.json").read_text())
    assert spec["k"] == 2 and sum(len(f) for f in spec["folds"]) == 4
    models = tmp_path / "m"
    assert main(["train", "--config", cfg, "--data", str(dataset), "--fold-file", str(folds / "folds.json"),
                 "--masks", str(seg), "--out", str(models)]) == 0
    assert json.loads((models / "fold1" / "manifest.json").read_text())["mask_source"] == "segmenter"
