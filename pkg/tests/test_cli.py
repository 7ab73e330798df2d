import json
import os

import numpy as np
import pytest

from stereo_unsup.cli import RUN_MANIFEST, main
from stereo_unsup.imaging import read_pfm, save_png, write_pfm
from stereo_unsup.metrics import MetricReport


def _manifest(out):
    with open(os.path.join(out, RUN_MANIFEST)) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("synth"))
    assert main(["synth", "--seed", "7", "--count", "3", "--size", "64", "--max-disp", "6", "--out", out]) == 0
    return out


def test_synth_writes_scenes(synth_dir):
    with open(os.path.join(synth_dir, "manifest.json")) as fh:
        scenes = json.load(fh)["scenes"]
    assert len(scenes) == 3
    for entry in scenes:
        assert os.path.isfile(os.path.join(synth_dir, entry["left"]))
    man = _manifest(synth_dir)
    assert man["command"] == "synth" and man["seed"] == 7 and not man["seed_defaulted"]
    assert len(set(man["config"]["scene_seeds"])) == 3
    assert "manifest.json" in man["outputs"]


def test_synth_default_seed_noted(tmp_path):
    out = str(tmp_path / "s")
    assert main(["synth", "--size", "32", "--max-disp", "4", "--out", out]) == 0
    man = _manifest(out)
    assert man["seed"] == 0 and man["seed_defaulted"]


def test_synth_rejects_bad_max_disp(tmp_path, capsys):
    assert main(["synth", "--max-disp", "64", "--size", "128", "--out", str(tmp_path / "s")]) == 2
    assert "max_disp" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["check-grad", "tv", "--out", str(tmp_path)])
    assert info.value.code == 1
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["synth", "--count", "many"])
    assert info.value.code == 1


def test_refine_identical_pair(tmp_path, rng):
    img = rng.random((64, 64, 1))
    path = str(tmp_path / "img.png")
    save_png(img, path)
    out = str(tmp_path / "r")
    assert main(["refine", "--left", path, "--right", path, "--steps-per-level", "3", "--out", out]) == 0
    d = read_pfm(os.path.join(out, "disparity.pfm"))
    assert d.shape == (64, 64)
    for name in ("disparity_back.pfm", "sigma_l0.pfm", "sigma_l2.png", "history.jsonl"):
        assert os.path.isfile(os.path.join(out, name))
    with open(os.path.join(out, "history.jsonl")) as fh:
        first = json.loads(fh.readline())
    assert first["level"] == 2 and {"ap", "census", "sm", "total"} <= set(first)
    assert _manifest(out)["config"]["refine"]["steps_per_level"] == 3


def test_refine_mismatched_sizes(tmp_path, rng):
    a, b = str(tmp_path / "a.png"), str(tmp_path / "b.png")
    save_png(rng.random((64, 64, 1)), a)
    save_png(rng.random((64, 72, 1)), b)
    assert main(["refine", "--left", a, "--right", b, "--out", str(tmp_path / "r")]) == 2


def test_refine_missing_file(tmp_path):
    assert main(["refine", "--left", str(tmp_path / "nope.png"), "--right", str(tmp_path / "nope.png"),
                 "--out", str(tmp_path / "r")]) == 2


def test_refine_config_file_and_override(tmp_path, synth_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps_per_level": 9, "lambda_sm": 0.3}))
    left = os.path.join(synth_dir, "scene_000_left.png")
    right = os.path.join(synth_dir, "scene_000_right.png")
    out = str(tmp_path / "r")
    assert main(["refine", "--left", left, "--right", right, "--config", str(cfg), "--steps-per-level", "2",
                 "--out", out]) == 0
    snap = _manifest(out)["config"]["refine"]
    assert snap["steps_per_level"] == 2 and snap["weights"]["lambda_sm"] == 0.3


def test_refine_rejects_unknown_config_key(tmp_path, synth_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"stepz": 9}))
    left = os.path.join(synth_dir, "scene_000_left.png")
    assert main(["refine", "--left", left, "--right", left, "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_train_cbem_and_finetune(tmp_path, synth_dir):
    out = str(tmp_path / "cbem")
    manifest = os.path.join(synth_dir, "manifest.json")
    assert main(["train-cbem", "--manifest", manifest, "--eval-manifest", manifest, "--steps-per-level", "3",
                 "--out", out]) == 0
    with open(os.path.join(out, "calibration.json")) as fh:
        report = json.load(fh)
    assert "auroc" in report["train"] and "auroc" in report["eval"]
    man = _manifest(out)
    assert man["config"]["epochs"] == 1 and man["config"]["cbem"]["epochs"] == 1

    params = os.path.join(out, "cbem_params.json")
    left = os.path.join(synth_dir, "scene_001_left.png")
    right = os.path.join(synth_dir, "scene_001_right.png")
    rout = str(tmp_path / "r")
    assert main(["refine", "--left", left, "--right", right, "--cbem-params", params, "--steps-per-level", "3",
                 "--out", rout]) == 0
    u = read_pfm(os.path.join(rout, "uscore.pfm"))
    assert np.all((u > 0) & (u < 1))


def test_train_cbem_empty_manifest(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"scenes": []}))
    assert main(["train-cbem", "--manifest", str(path), "--out", str(tmp_path / "c")]) == 2


def test_eval_against_itself_and_offset(tmp_path, synth_dir):
    gt = os.path.join(synth_dir, "scene_000_gt.pfm")
    out = str(tmp_path / "e")
    assert main(["eval", "--disp", gt, "--gt", gt, "--out", out]) == 0
    rep = MetricReport.load(os.path.join(out, "metrics.json"))
    assert rep.epe == 0.0 and rep.d1 == 0.0

    shifted = str(tmp_path / "shift.pfm")
    write_pfm(read_pfm(gt) + 1.5, shifted)
    occ = os.path.join(synth_dir, "scene_000_occ.png")
    assert main(["eval", "--disp", shifted, "--gt", gt, "--occlusion", occ, "--out", out]) == 0
    rep = MetricReport.load(os.path.join(out, "metrics.json"))
    assert rep.epe == pytest.approx(1.5, abs=1e-5)
    assert set(rep.regions) == {"non_occluded", "occluded"}
    assert os.path.isfile(os.path.join(out, "error_map.png"))


def test_eval_dimension_mismatch(tmp_path):
    a, b = str(tmp_path / "a.pfm"), str(tmp_path / "b.pfm")
    write_pfm(np.zeros((8, 8)), a)
    write_pfm(np.zeros((8, 9)), b)
    assert main(["eval", "--disp", a, "--gt", b, "--out", str(tmp_path / "e")]) == 2


def test_check_grad_sm_and_repeatable(tmp_path):
    reports = []
    for k in range(2):
        out = str(tmp_path / f"g{k}")
        assert main(["check-grad", "sm", "--seed", "3", "--out", out]) == 0
        with open(os.path.join(out, "gradcheck.json")) as fh:
            reports.append(json.load(fh))
    assert reports[0] == reports[1]
    assert reports[0]["max_rel_error"] < 1e-4 and reports[0]["passed"]
