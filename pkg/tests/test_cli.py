import csv
import json
import shutil

import numpy as np
import pytest

from subtypeseg.cli import assign_folds, main
from subtypeseg.config import load_config
from subtypeseg.fusion import argmax_labels, fuse
from subtypeseg.manifest import load_manifest, load_stack
from subtypeseg.postproc import ThresholdPolicy, save_policy
from subtypeseg.radiomics import FeatureVector, feature_names, write_feature_table
from subtypeseg.subtype import load_model
from subtypeseg.volume import Volume, read_volume, write_volume

from synth import blobs, make_dataset

PED = load_config("ped")


def run(*argv):
    return main([str(a) for a in argv] + ["--jobs", "1"])


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    """Dataset with predictions plus a fitted model and policy."""
    root = tmp_path_factory.mktemp("data")
    manifest = make_dataset(root, 5, with_prediction=True)
    art = root / "artifacts"
    assert run("features", "--manifest", manifest, "--config", "ped", "--out", art / "features.csv") == 0
    assert run("cluster-fit", "--features", art / "features.csv", "--config", "ped", "--out", art / "model.json") == 0
    assert run("postproc-fit", "--manifest", manifest, "--config", "ped", "--model", art / "model.json",
               "--out", art / "policy.json") == 0
    return root, manifest, art


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_features_table_and_rerun(fitted, tmp_path):
    root, manifest, art = fitted
    rows = read_rows(art / "features.csv")
    assert rows[0] == ["case_id"] + list(feature_names(PED.sequences))
    assert [r[0] for r in rows[1:]] == [f"case-{i:03d}" for i in range(5)]
    assert run("features", "--manifest", manifest, "--config", "ped", "--out", tmp_path / "f.csv") == 0
    assert (tmp_path / "f.csv").read_bytes() == (art / "features.csv").read_bytes()
    assert read_rows(tmp_path / "f.skipped.csv") == [["case_id", "status", "reason"]]


def test_features_empty_wt_goes_to_sidecar(tmp_path):
    manifest = make_dataset(tmp_path, 2)
    doc = json.loads(manifest.read_text())
    gt = tmp_path / doc["cases"][1]["ground_truth"]
    write_volume(Volume(np.zeros((20, 20, 20), np.uint8)), gt)
    assert run("features", "--manifest", manifest, "--config", "ped", "--out", tmp_path / "f.csv") == 0
    assert len(read_rows(tmp_path / "f.csv")) == 2
    side = read_rows(tmp_path / "f.skipped.csv")
    assert side[1][:2] == ["case-001", "skipped"]


def test_cluster_fit(tmp_path):
    names = feature_names(PED.sequences)
    Z, _ = blobs(np.random.default_rng(0), 3, 10, len(names))
    rows = [(f"c{i}", FeatureVector(names, z * 50 + 100)) for i, z in enumerate(Z)]
    write_feature_table(tmp_path / "f.csv", rows)
    assert run("cluster-fit", "--features", tmp_path / "f.csv", "--config", "ped", "--out", tmp_path / "m1.json") == 0
    assert run("cluster-fit", "--features", tmp_path / "f.csv", "--config", "ped", "--out", tmp_path / "m2.json") == 0
    assert load_model(tmp_path / "m1.json").k == 3
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    write_feature_table(tmp_path / "small.csv", rows[:2])
    assert run("cluster-fit", "--features", tmp_path / "small.csv", "--config", "ped", "--out", tmp_path / "x.json") == 1


def test_ensemble_matches_fusion(fitted, tmp_path):
    root, manifest, _ = fitted
    assert run("ensemble", "--manifest", manifest, "--config", "ped", "--out", tmp_path / "ens") == 0
    case = load_manifest(manifest, PED.channel_names).cases[0]
    stacks = [load_stack(case, m, PED.channel_names) for m in PED.models]
    expect = argmax_labels(fuse(stacks, PED.weights), PED.alphabet)
    got = read_volume(tmp_path / "ens" / f"{case.case_id}.nii.gz")
    assert np.array_equal(got.data, expect.data)
    (tmp_path / "single.json").write_text(json.dumps(
        {"task": "ped", "ensemble": {"nnunet": 0, "mednext": 1, "swinunetr": 0}}))
    assert run("ensemble", "--manifest", manifest, "--config", tmp_path / "single.json", "--out", tmp_path / "one") == 0
    got = read_volume(tmp_path / "one" / f"{case.case_id}.nii.gz")
    assert np.array_equal(got.data, argmax_labels(stacks[1], PED.alphabet).data)


def test_ensemble_per_case_errors(tmp_path):
    manifest = make_dataset(tmp_path, 2)
    bad = tmp_path / "probs" / "mednext" / "case-001_ET.nii.gz"
    write_volume(Volume(np.zeros((20, 20, 20), np.float32), spacing=(2, 1, 1)), bad)
    assert run("ensemble", "--manifest", manifest, "--config", "ped", "--out", tmp_path / "e", "--strict") == 2
    assert (tmp_path / "e" / "case-000.nii.gz").is_file()
    assert not (tmp_path / "e" / "case-001.nii.gz").exists()
    assert run("ensemble", "--manifest", manifest, "--config", "ped", "--out", tmp_path / "e2") == 0
    bad.unlink()
    assert run("ensemble", "--manifest", manifest, "--config", "ped", "--out", tmp_path / "e3", "--strict") == 1
    assert not (tmp_path / "e3").exists()
    assert run("ensemble", "--manifest", manifest, "--config", "ped", "--out", tmp_path / "e4") == 0
    assert sorted(p.name for p in (tmp_path / "e4").iterdir()) == ["case-000.nii.gz"]


def test_postproc_fit_grid_zero_and_missing_gt(fitted, tmp_path, caplog):
    root, manifest, art = fitted
    doc = json.loads(manifest.read_text())
    del doc["cases"][0]["ground_truth"]
    m2 = root / "no_gt.json"
    m2.write_text(json.dumps(doc))
    (tmp_path / "c.json").write_text(json.dumps({"task": "ped", "postproc": {"stage1_grid": [0], "ratio_grid": [0]}}))
    assert run("postproc-fit", "--manifest", m2, "--config", tmp_path / "c.json", "--model", art / "model.json",
               "--out", tmp_path / "p.json") == 0
    assert "case-000 excluded" in caplog.text
    policy = json.loads((tmp_path / "p.json").read_text())
    assert {e["min_volume"] for e in policy["stage1"]} == {0.0} and policy["stage2"] == []
    assert policy["provenance"]["n_cases"] == 4
    assert (tmp_path / "p_fit_report.csv").is_file()


def test_postproc_apply(fitted, tmp_path):
    root, manifest, art = fitted
    identity = ThresholdPolicy.empty("ped", PED.alphabet, clusters=range(load_model(art / "model.json").k))
    save_policy(identity, tmp_path / "id.json")
    assert run("postproc-apply", "--manifest", manifest, "--config", "ped", "--model", art / "model.json",
               "--policy", tmp_path / "id.json", "--out", tmp_path / "out") == 0
    for case in load_manifest(manifest).cases:
        assert np.array_equal(read_volume(tmp_path / "out" / f"{case.case_id}.nii.gz").data,
                              read_volume(case.prediction).data)
    assert run("postproc-apply", "--manifest", manifest, "--config", "ped", "--model", art / "model.json",
               "--policy", art / "policy.json", "--out", tmp_path / "fit") == 0
    case = load_manifest(manifest).cases[0]
    before = read_volume(case.prediction).data
    after = read_volume(tmp_path / "fit" / f"{case.case_id}.nii.gz").data
    # the planted two-voxel ET island is gone, the rest is untouched
    assert (before == 1).sum() - (after == 1).sum() == 2
    assert np.array_equal(before[before != 1], after[before != 1])
    (tmp_path / "bad.json").write_text("{}")
    assert run("postproc-apply", "--manifest", manifest, "--config", "ped", "--model", art / "model.json",
               "--policy", tmp_path / "bad.json", "--out", tmp_path / "x") == 1


def test_evaluate(fitted, tmp_path):
    root, manifest, _ = fitted
    doc = json.loads(manifest.read_text())
    for c in doc["cases"]:
        c["prediction"] = c["ground_truth"]
    (root / "self.json").write_text(json.dumps(doc))
    assert run("evaluate", "--manifest", root / "self.json", "--config", "ped", "--out", tmp_path / "r") == 0
    rows = read_rows(tmp_path / "r" / "report_cases.csv")
    assert rows[0] == ["case_id", "region", "lw_dice", "lw_hd95", "dice", "hd95"]
    assert len(rows) == 1 + 5 * 6 and all(r[2] == "1.0" for r in rows[1:])
    (root / "empty.json").write_text(json.dumps({"task": "ped", "cases": []}))
    assert run("evaluate", "--manifest", root / "empty.json", "--config", "ped", "--out", tmp_path / "e") == 1


def test_validation_exit_codes(fitted, tmp_path):
    root, manifest, art = fitted
    assert run("evaluate", "--manifest", tmp_path / "none.json", "--config", "ped", "--out", tmp_path / "o") == 1
    assert run("evaluate", "--manifest", manifest, "--config", "nope", "--out", tmp_path / "o") == 1
    assert run("evaluate", "--manifest", manifest, "--config", "met", "--out", tmp_path / "o") == 1
    (tmp_path / "m.json").write_text("[1, 2]")
    assert run("pipeline", "--manifest", manifest, "--config", "ped", "--model", tmp_path / "m.json",
               "--policy", art / "policy.json", "--out", tmp_path / "o") == 1


def test_folds(fitted, tmp_path):
    root, manifest, art = fitted
    assert run("folds", "--manifest", manifest, "--config", "ped", "--model", art / "model.json",
               "--n-folds", "2", "--out", root / "folds.json") == 0
    doc = json.loads((root / "folds.json").read_text())
    assert all(c["fold"] in (0, 1) for c in doc["cases"])
    assert len(load_manifest(root / "folds.json").cases) == 5
    assert assign_folds({"a": 0, "b": 0, "c": 1, "d": 1, "e": 1}, 2) == {"a": 0, "b": 1, "c": 0, "d": 1, "e": 0}


def _pipeline(manifest, art, out, *extra):
    return run("pipeline", "--manifest", manifest, "--config", "ped", "--model", art / "model.json",
               "--policy", art / "policy.json", "--out", out, *extra)


def test_pipeline_outputs(fitted, tmp_path):
    root, manifest, art = fitted
    assert _pipeline(manifest, art, tmp_path / "run") == 0
    summary = json.loads((tmp_path / "run" / "run_summary.json").read_text())
    assert summary["config_sha256"] == PED.digest() and summary["seed"] == 20240
    assert summary["stages"][-1] == "evaluate" and summary["n_evaluated"] == 5
    assert str(tmp_path) not in (tmp_path / "run" / "run_summary.json").read_text()
    for name in ("features.csv", "clusters.csv", "report_cases.csv", "report_summary.csv"):
        assert (tmp_path / "run" / name).is_file()
    assert len(list((tmp_path / "run" / "final").glob("*.nii.gz"))) == 5


def test_pipeline_resume(fitted, tmp_path):
    root, manifest, art = fitted
    assert _pipeline(manifest, art, tmp_path / "full") == 0
    partial = tmp_path / "partial"
    shutil.copytree(tmp_path / "full" / "ensemble", partial / "ensemble")
    (partial / "ensemble" / "case-002.nii.gz").unlink()
    assert _pipeline(manifest, art, partial, "--resume") == 0
    for name in ("features.csv", "clusters.csv", "report_cases.csv", "run_summary.json"):
        assert (partial / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_pipeline_parallel_matches_serial(fitted, tmp_path):
    root, manifest, art = fitted
    assert _pipeline(manifest, art, tmp_path / "serial") == 0
    assert main(["pipeline", "--manifest", str(manifest), "--config", "ped", "--model", str(art / "model.json"),
                 "--policy", str(art / "policy.json"), "--out", str(tmp_path / "par"), "--jobs", "3"]) == 0
    for name in ("features.csv", "clusters.csv", "report_cases.csv", "report_summary.csv", "run_summary.json"):
        assert (tmp_path / "par" / name).read_bytes() == (tmp_path / "serial" / name).read_bytes()
