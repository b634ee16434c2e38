import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from kinfit import __version__, cli
from kinfit.core import PointCloud, chamfer
from kinfit.ingest import load_manifest, read_ply, write_ply


def kinfit(*argv):
    return cli.main([str(a) for a in argv])


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("clamp")
    data, reg, est = d / "data", d / "reg", d / "est"
    assert kinfit("synth", "--preset", "clamp", "--out", data) == 0
    assert kinfit("register", "--manifest", data / "manifest.json", "--out", reg) == 0
    assert kinfit("estimate", "--manifest", data / "manifest.json", "--registrations", reg / "registrations.json",
                  "--out", est) == 0
    assert kinfit("eval", "--structure", est / "structure.json", "--ground-truth", data / "ground_truth.json",
                  "--out", est) == 0
    return d


def test_end_to_end_axis_error(pipeline_dir):
    report = json.loads((pipeline_dir / "est" / "eval.json").read_text())
    j = report["joints"][0]
    assert j["estimated_kind"] == "Revolute" and j["kind_correct"]
    assert j["axis_angle_error"] < 1e-3
    assert report["tree_edge_f1"] == 1.0
    assert "tree edge F1" in (pipeline_dir / "est" / "eval.txt").read_text()


def test_outputs_present(pipeline_dir):
    est = pipeline_dir / "est"
    assert sorted(p.name for p in est.iterdir()) == ["eval.json", "eval.txt", "object.urdf", "part_1.ply",
                                                     "part_2.ply", "structure.json"]
    assert not list(pipeline_dir.rglob("*.tmp"))


def test_render_reproduces_each_scene(pipeline_dir, capsys):
    data, est = pipeline_dir / "data", pipeline_dir / "est"
    ss = load_manifest(data / "manifest.json")
    edge = json.loads((est / "structure.json").read_text())["edges"][0]
    for s in range(len(ss)):
        q = edge["joint"]["configurations"][s]
        out = pipeline_dir / f"render_{s}.ply"
        assert kinfit("render", "--urdf", est / "object.urdf", "--structure", est / "structure.json",
                      "--q", f"{edge['urdf_joint']}={q!r}", "--out", out) == 0
        rendered = read_ply(out)
        if s == 0:
            observed = np.concatenate([ss.cloud(0, p).points for p in ss.part_ids])
            assert chamfer(rendered.points, observed).symmetric_mean < 1e-9
        # the fixed jaw is the root and stays put, the moving jaw follows scene s
        moving = rendered.points[rendered.part_ids == 2]
        assert chamfer(moving, ss.cloud(s, 2).points).symmetric_mean < 1e-4
    capsys.readouterr()


def test_render_positional_and_errors(pipeline_dir, capsys):
    est = pipeline_dir / "est"
    out = pipeline_dir / "render_dir"
    assert kinfit("render", "--urdf", est / "object.urdf", "--q", "0.2", "--out", out) == 0
    assert (out / "render.ply").is_file()
    capsys.readouterr()
    assert kinfit("render", "--urdf", est / "object.urdf", "--q", "0.2", "0.3", "--out", out) == 2
    assert kinfit("render", "--urdf", est / "object.urdf", "--q", "nope=1", "--out", out) == 2
    assert kinfit("render", "--urdf", est / "missing.urdf", "--out", out) == 2


def test_missing_part_exits_2_naming_scene(tmp_path, capsys):
    assert kinfit("synth", "--preset", "clamp", "--points", "200", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "manifest.json").read_text())
    del doc["scenes"][2]["parts"]["2"]
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    capsys.readouterr()
    code = kinfit("estimate", "--manifest", tmp_path / "manifest.json", "--out", tmp_path / "est")
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 2 and len(err) == 1
    diag = json.loads(err[0])
    assert diag["status"] == "error" and diag["exit_code"] == 2
    assert diag["details"]["scene"] == 2 and "scene 2" in diag["message"]
    assert not (tmp_path / "est").exists()


def test_estimation_failure_exits_3(tmp_path, capsys):
    rng = np.random.default_rng(0)
    good = PointCloud(rng.normal(size=(100, 3)) * 0.05)
    flat = PointCloud(np.zeros((20, 3)))
    scenes = []
    for s in range(2):
        entry = {"id": s, "parts": {}}
        for pid, cloud in ((1, good), (2, flat)):
            name = f"s{s}_p{pid}.ply"
            write_ply(tmp_path / name, cloud)
            entry["parts"][str(pid)] = {"ply": name}
        scenes.append(entry)
    (tmp_path / "manifest.json").write_text(json.dumps({"scenes": scenes}))
    code = kinfit("register", "--manifest", tmp_path / "manifest.json", "--out", tmp_path)
    diag = json.loads(capsys.readouterr().err)
    assert code == 3 and diag["exit_code"] == 3 and diag["error"] == "DegenerateCloud"


def test_config_file_and_unknown_keys(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"registration": {"max_iterations": 10}, "colour": "blue"}))
    assert kinfit("ablate", "--config", bad, "--out", tmp_path, "--cases", 2) == 2
    diag = json.loads(capsys.readouterr().err)
    assert diag["error"] == "SchemaError"
    bad.write_text(json.dumps({"registration": {"not_a_param": 1}}))
    assert kinfit("ablate", "--config", bad, "--out", tmp_path, "--cases", 2) == 2
    capsys.readouterr()
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"out": str(tmp_path / "from_config"), "seed": 3}))
    assert kinfit("ablate", "--config", good, "--cases", 2) == 0
    doc = json.loads((tmp_path / "from_config" / "ablation.json").read_text())
    assert doc["source"]["benchmark_seed"] == 3
    # flags override the file
    assert kinfit("ablate", "--config", good, "--cases", 2, "--seed", 4, "--out", tmp_path / "flag") == 0
    assert json.loads((tmp_path / "flag" / "ablation.json").read_text())["source"]["benchmark_seed"] == 4


def test_version_flag():
    proc = subprocess.run([sys.executable, "-m", "kinfit.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == __version__ == "0.1.0"


def test_ablate_table(tmp_path, capsys):
    assert kinfit("ablate", "--out", tmp_path, "--cases", 4) == 0
    out = capsys.readouterr().out
    for name in ("IcpOnly", "RobustOnly", "IcpThenRobust"):
        assert name in out
    methods = json.loads((tmp_path / "ablation.json").read_text())["methods"]
    best = methods["IcpThenRobust"]["mean_error_m"]
    assert best <= methods["IcpOnly"]["mean_error_m"] and best <= methods["RobustOnly"]["mean_error_m"]
    assert last_json(out)["status"] == "ok"


def run_all(root, jobs):
    data, est = root / "data", root / "est"
    assert kinfit("synth", "--preset", "slider", "--points", "500", "--noise", "0.001", "--outliers", "0.05",
                  "--seed", 7, "--out", data) == 0
    assert kinfit("register", "--manifest", data / "manifest.json", "--out", est, "--jobs", jobs) == 0
    assert kinfit("estimate", "--manifest", data / "manifest.json", "--registrations", est / "registrations.json",
                  "--out", est, "--jobs", jobs) == 0
    assert kinfit("eval", "--structure", est / "structure.json", "--ground-truth", data / "ground_truth.json",
                  "--out", est) == 0
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("jobs", [1, 2])
def test_byte_identical_reruns(tmp_path, capsys, jobs):
    a = run_all(tmp_path / "a", jobs)
    b = run_all(tmp_path / "b", jobs)
    capsys.readouterr()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == b[k], k


def test_rerun_overwrites_atomically(tmp_path, capsys, monkeypatch):
    root = tmp_path / "r"
    first = run_all(root, 1)
    second = run_all(root, 1)
    assert first == second
    assert not [p for p in root.rglob("*") if p.name.startswith(".")]
    # a crash during the rename leaves the previous file whole and no temp file behind
    target = root / "est" / "structure.json"
    before = target.read_bytes()

    def boom(src, dst):
        raise OSError("disk full")
    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        cli.atomic_write_json(target, {"partial": True})
    assert target.read_bytes() == before
    assert sorted(p.name for p in target.parent.iterdir()) == sorted(Path(k).name for k in first if k.startswith("est/"))
    capsys.readouterr()
