import json

import pytest

from subtypeseg.config import PRESET_NAMES, ConfigError, build_config, load_config
from subtypeseg.manifest import ManifestError, load_manifest, manifest_to_doc, parse_manifest


def test_presets():
    assert set(PRESET_NAMES) == {"ped", "men-rt", "met"}
    ped = load_config("ped")
    assert ped.alphabet == ((1, "ET"), (2, "NET"), (3, "CC"), (4, "ED"))
    assert ped.region_spec.labels_of("TC") == (1, 2, 3)
    assert ped.channel_names == ("background", "ET", "NET", "CC", "ED")
    assert ped.postproc.relabel_menu == ((3, 2), (4, 0))
    men = load_config("men-rt")
    assert men.sequences == ("t1ce",) and men.spacing_mm == 0.9375
    met = load_config("met")
    assert met.spacing_mm == 1.0
    assert met.weights.as_dict() == pytest.approx({"nnunet": 0.487, "mednext": 0.513, "swinunetr": 0.0})
    assert met.subtype.k_range == range(2, 9) and met.subtype.seed == 20240
    assert met.postproc.stage1_grid == (0, 10, 20, 50, 100, 200, 500, 1000)
    assert (met.metrics.dilation_radius, met.metrics.connectivity, met.metrics.penalty) == (1, 26, 374.0)


def test_overrides_from_files(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"task": "met", "postproc": {"stage1_grid": [0, 5]}}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.postproc.stage1_grid == (0.0, 5.0)
    assert cfg.postproc.ratio_grid == (0, 0.01, 0.02, 0.05, 0.1)
    (tmp_path / "c.toml").write_text('task = "ped"\nspacing_mm = 0.5\n[subtype]\nseed = 7\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.spacing_mm == 0.5 and cfg.subtype.seed == 7 and cfg.subtype.k_max == 8
    assert cfg.digest() != load_config("ped").digest()
    assert load_config("ped").digest() == load_config("ped").digest()


def test_custom_and_errors(tmp_path):
    doc = {"task": "custom", "labels": [[1, "A"]], "regions": {"A": ["A"]}, "sequences": ["t1"],
           "spacing_mm": 1.0, "ensemble": {"m": 1.0}, "postproc": {"relabel_menu": []}}
    assert build_config(doc).models == ("m",)
    for bad in (
        {"task": "nope"},
        {"task": "custom"},
        {"task": "ped", "regions": {"X": ["Y"]}},
        {"task": "ped", "postproc": {"relabel_menu": [["CC", "CC"]]}},
        {"task": "ped", "postproc": {"ratio_grid": [2.0]}},
        {"task": "ped", "subtype": {"k_min": 1}},
        {"task": "ped", "ensemble": {"nnunet": 0, "mednext": 0, "swinunetr": 0}},
        {"task": "ped", "spacing_mm": -1},
    ):
        with pytest.raises(ConfigError):
            build_config(bad)
    (tmp_path / "x.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "x.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def _files(tmp_path, *names):
    for n in names:
        p = tmp_path / n
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(b"")


def test_manifest_loading(tmp_path):
    _files(tmp_path, "a_t1.nii.gz", "gt/a.nii.gz", "m1/a_background.nii.gz", "m1/a_A.nii.gz")
    doc = {"task": "MET", "cases": [
        {"id": "b", "sequences": {"t1": "missing.nii.gz"}},
        {"id": "a", "fold": 2, "sequences": {"t1": "a_t1.nii.gz"}, "models": {"m1": "m1"},
         "ground_truth": "gt/a.nii.gz"},
    ]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="missing"):
        load_manifest(tmp_path / "m.json", ("background", "A"))
    m = load_manifest(tmp_path / "m.json", ("background", "A"), strict=False)
    assert m.task == "met" and [c.case_id for c in m.cases] == ["a"]
    case = m.cases[0]
    assert case.fold == 2 and case.ground_truth == tmp_path / "gt/a.nii.gz"
    assert case.channel_path("m1", "A") == tmp_path / "m1" / "a_A.nii.gz"
    out = manifest_to_doc(m, tmp_path)
    assert out["cases"][0]["sequences"] == {"t1": "a_t1.nii.gz"}


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        parse_manifest({"cases": [{"id": "a"}, {"id": "a"}]}, tmp_path)
    with pytest.raises(ManifestError):
        parse_manifest({"cases": [{"sequences": {}}]}, tmp_path)
    with pytest.raises(ManifestError):
        parse_manifest({"nope": []}, tmp_path)
    with pytest.raises(ManifestError):
        parse_manifest({"cases": [{"id": "a", "fold": "x"}]}, tmp_path)
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "none.json")
    parsed = parse_manifest({"cases": [{"id": "b"}, {"id": "a"}]}, tmp_path)
    assert [c.case_id for c in parsed.cases] == ["a", "b"]
