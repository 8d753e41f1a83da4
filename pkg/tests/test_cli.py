import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from vipflow import cli
from vipflow.diffusion import fit_gmm_prior, save_prior
from vipflow.imaging import load_sequence
from vipflow.synthverse import SceneSpec, SpriteSpec


def digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}


def write_spec(path, **kw):
    base = dict(height=16, width=16, n_frames=4, texture_cell=4, pan=(1.0, 0.0), mask_fraction=0.3)
    base.update(kw)
    path.write_text(SceneSpec(**base).to_json())
    return path


@pytest.fixture
def scene_dir(tmp_path):
    spec = write_spec(tmp_path / "spec.json")
    out = tmp_path / "scene"
    assert cli.main(["synth", str(spec), str(out), "--seed", "1"]) == 0
    return out


@pytest.fixture
def prior_file(tmp_path, scene_dir):
    out = tmp_path / "prior" / "p.bin"
    assert cli.main(["fit-prior", str(scene_dir), "--K", "2", "--out", str(out)]) == 0
    return out


def test_synth_writes_expected_files(scene_dir):
    names = {p.name for p in scene_dir.iterdir()}
    assert sum(n.startswith("frame_") for n in names) == 4
    assert sum(n.startswith("mask_") for n in names) == 4
    assert sum(n.endswith(".flo") for n in names) == 3
    assert {"scene.json", "run.json"} <= names


def test_synth_is_deterministic(tmp_path, scene_dir):
    again = tmp_path / "again"
    assert cli.main(["synth", str(tmp_path / "spec.json"), str(again), "--seed", "1"]) == 0
    a, b = digest(scene_dir), digest(again)
    a.pop("run.json"), b.pop("run.json")  # records the output path
    assert a == b


def test_synth_bad_spec_exit_2(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(SceneSpec(height=16, width=16, n_frames=6,
                              sprites=[SpriteSpec(0, (4, 4), (3.0, 0.0), (8.0, 2.0))]).to_json())
    assert cli.main(["synth", str(spec), str(tmp_path / "o")]) == 2
    assert "out of bounds" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path, scene_dir):
    with pytest.raises(SystemExit) as exc:
        cli.main(["inpaint"])
    assert exc.value.code == 2
    assert cli.main(["inpaint", str(scene_dir), str(tmp_path / "o")]) == 2  # no prior for the full variant
    assert cli.main(["inpaint", str(tmp_path / "missing"), str(tmp_path / "o"), "--variant", "pp-only"]) == 2
    assert cli.main(["inpaint", str(scene_dir), str(tmp_path / "o"), "--variant", "pp-only", "--steps", "0"]) == 2


def test_runtime_failure_exit_1(tmp_path, scene_dir, prior_file, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("solver blew up")

    monkeypatch.setattr(cli, "inpaint_sequence", boom)
    assert cli.main(["inpaint", str(scene_dir), str(tmp_path / "o"), "--prior", str(prior_file)]) == 1


def test_inpaint_unmasked_is_identity(tmp_path, scene_dir, prior_file):
    src = tmp_path / "clean"
    src.mkdir()
    for p in scene_dir.iterdir():
        data = p.read_bytes()
        if p.name.startswith("mask_"):
            from vipflow.imaging import write_mask
            write_mask(np.zeros((16, 16), np.uint8), src / p.name)
        else:
            (src / p.name).write_bytes(data)
    out = tmp_path / "out"
    assert cli.main(["inpaint", str(src), str(out), "--prior", str(prior_file)]) == 0
    assert np.array_equal(load_sequence(out).frames, load_sequence(src).frames)
    rep = json.loads((out / "report.json").read_text())
    assert rep["n_generation_runs"] == 0


def test_inpaint_deterministic(tmp_path, scene_dir, prior_file):
    outs = [tmp_path / "o1", tmp_path / "o2"]
    for o in outs:
        assert cli.main(["inpaint", str(scene_dir), str(o), "--prior", str(prior_file), "--steps", "3"]) == 0
    a, b = digest(outs[0]), digest(outs[1])
    for name in ("run.json", "timing.json"):
        a.pop(name), b.pop(name)
    assert a == b and "report.json" in a
    assert (outs[0] / "traces").is_dir()
    run = json.loads((outs[0] / "run.json").read_text())
    assert run["config"]["gamma"] == 0.001 and run["config"]["steps"] == 3 and run["schedule"]["T"] == 50
    assert not load_sequence(outs[0]).masks.any()


def test_eval_pred_equals_gt_static(tmp_path):
    spec = write_spec(tmp_path / "static.json", pan=(0.0, 0.0))
    gt = tmp_path / "gt"
    assert cli.main(["synth", str(spec), str(gt)]) == 0
    out = tmp_path / "ev"
    assert cli.main(["eval", str(gt), str(gt), "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["psnr_mean"] == 99.0 and m["ssim_mean"] == pytest.approx(1.0, abs=1e-12) and m["e_warp_mean"] == 0
    assert (out / "run.json").exists()


def test_eval_estimated_flow(tmp_path, scene_dir, capsys):
    assert cli.main(["eval", str(scene_dir), str(scene_dir), "--flow", "estimated"]) == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert res["psnr"] == 99.0


def test_ablate_writes_table(tmp_path, prior_file):
    scenes = tmp_path / "scenes"
    scenes.mkdir()
    write_spec(scenes / "a.json", mask_fraction=0.2)
    write_spec(scenes / "b.json", pan=(-1.0, 0.0), texture_seed=3)
    out = tmp_path / "res" / "ablation.csv"
    rc = cli.main(["ablate", str(scenes), str(out), "--prior", str(prior_file), "--steps", "2"])
    assert rc == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["variant"] for r in rows] == ["full", "per-frame", "pp-only", "no-opt"]
    assert set(rows[0]) == {"variant", "psnr", "ssim", "e_warp"}
    assert (out.parent / "run.json").exists() and (out.parent / "ablation_scenes.csv").exists()


def test_suite_writes_specs(tmp_path):
    assert cli.main(["suite", str(tmp_path / "s"), "--n", "3"]) == 0
    assert len(list((tmp_path / "s").glob("scene_*.json"))) == 3


def test_module_entry_point_and_log_env(tmp_path):
    env = {"VIPFLOW_LOG": "DEBUG", "PATH": "/usr/bin:/bin"}
    r = subprocess.run([sys.executable, "-m", "vipflow", "--version"], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and r.stdout.strip() == "0.1.0"
