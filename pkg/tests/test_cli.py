import json
import os
import shutil
import subprocess
import sys

import pytest

from chainterp.cli import main


def args(demo, out, *rest):
    return [*rest, "--net", str(demo / "net.json"), "--manifest", str(demo / "manifest.csv"), "--out", str(out)]


@pytest.fixture
def with_banks(demo_dir, tmp_path):
    out = tmp_path / "out"
    shutil.copytree(demo_dir / "banks", out / "banks")
    return out


def test_demo_passes_and_writes_everything(demo_dir):
    summary = json.loads((demo_dir / "demo_summary.json").read_text())
    assert summary["passed"] and all(c["passed"] for c in summary["checks"].values())
    assert sorted(p.name for p in (demo_dir / "banks").iterdir()) == [
        "color.json", "material.json", "object.json", "part.json", "scene.json"]
    for name in ("net.json", "manifest.csv", "planted.json", "distances.csv", "pca.csv", "distances.meta.json"):
        assert (demo_dir / name).is_file()


def test_every_output_embeds_provenance(demo_dir):
    docs = list((demo_dir / "banks").glob("*.json")) + list((demo_dir / "instances").rglob("*.json"))
    docs += list((demo_dir / "classes").rglob("*.json")) + [demo_dir / "distances.meta.json"]
    for path in docs:
        prov = json.loads(path.read_text())["provenance"]
        assert "config" in prov and prov["inputs"], path
        assert all(len(v["sha256"]) == 64 for v in prov["inputs"].values())


def test_harmonize_missing_inputs(tmp_path, demo_dir, capsys):
    missing = tmp_path / "nope.csv"
    code = main(["harmonize", "--net", str(demo_dir / "net.json"), "--manifest", str(missing), "--out", str(tmp_path)])
    assert code == 2 and str(missing) in capsys.readouterr().err
    assert main(["harmonize", "--manifest", str(demo_dir / "manifest.csv"), "--out", str(tmp_path)]) == 2


def test_harmonize_rerun_is_byte_identical(demo_dir, tmp_path, capsys):
    out = tmp_path / "h"
    assert main(args(demo_dir, out, "harmonize", "--layer", "relu4")) == 0
    assert "object_01" in capsys.readouterr().out
    assert [p.name for p in (out / "banks").iterdir()] == ["object.json"]
    assert main(args(demo_dir, tmp_path / "h2", "harmonize", "--layer", "relu4")) == 0
    assert (out / "banks" / "object.json").read_bytes() == (tmp_path / "h2" / "banks" / "object.json").read_bytes()
    strip = lambda p: {k: v for k, v in json.loads(p.read_text()).items() if k != "provenance"}  # noqa: E731
    assert strip(out / "banks" / "object.json") == strip(demo_dir / "banks" / "object.json")
    assert main(args(demo_dir, out, "harmonize", "--layer", "gap")) == 4


def test_explain_instance_codes(demo_dir, with_banks, tmp_path, capsys):
    empty = tmp_path / "empty"
    assert main(args(demo_dir, empty, "explain-instance", "s0000")) == 3
    assert main(args(demo_dir, with_banks, "explain-instance", "not_a_sample")) == 4
    assert main(args(demo_dir, with_banks, "explain-instance", "full_scene_01_0")) == 0
    out = capsys.readouterr().out
    assert "predicted" in out and "path" in out
    produced = with_banks / "instances" / "full_scene_01_0" / "chain.json"
    assert produced.read_bytes() == (demo_dir / "instances" / "full_scene_01_0" / "chain.json").read_bytes()


def test_explain_class_codes(demo_dir, with_banks):
    assert main(args(demo_dir, with_banks, "explain-class", "scene_01")) == 2
    assert main(args(demo_dir, with_banks, "explain-class", "scene_01", "full_scene_01_0", "full_scene_02_0")) == 1
    assert main(args(demo_dir, with_banks, "explain-class", "scene_01", "full_scene_01_0", "full_scene_01_0")) == 0
    doc = json.loads((with_banks / "classes" / "scene_01" / "class_chain.json").read_text())
    single = json.loads((demo_dir / "instances" / "full_scene_01_0" / "chain.json").read_text())
    assert doc["levels"]["scene"][0]["concept_id"] == single["root"]["concept_id"]


def write_grouping(path, rows):
    path.write_text("set_id,instance_id,path\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))


def test_distances_cases(demo_dir, tmp_path):
    inf = demo_dir / "instances"
    w = lambda sid, cid: str(inf / sid / "inference" / f"{cid}.json")  # noqa: E731
    g = tmp_path / "g1.csv"
    write_grouping(g, [("a", "full_scene_01_0", w("full_scene_01_0", "scene_01"))])
    assert main(["distances", str(g), "--out", str(tmp_path / "o1")]) == 0
    assert len((tmp_path / "o1" / "distances.csv").read_text().splitlines()) == 2
    assert not (tmp_path / "o1" / "pca.csv").exists()

    rows = [(s, i, w(i, "scene_01")) for s in ("a", "b") for i in ("full_scene_01_0", "full_scene_01_1")]
    write_grouping(g, rows)
    assert main(["distances", str(g), "--out", str(tmp_path / "o2")]) == 0
    lines = (tmp_path / "o2" / "distances.csv").read_text().splitlines()
    assert lines[1].split(",")[2] == "0.0000"

    objs = [p.stem for p in (inf / "full_scene_01_0" / "inference").glob("object_*.json")]
    write_grouping(g, [("a", "full_scene_01_0", w("full_scene_01_0", "scene_01")),
                       ("b", "full_scene_01_0", w("full_scene_01_0", objs[0]))])
    assert main(["distances", str(g), "--out", str(tmp_path / "o3")]) == 1

    write_grouping(g, [("a", "x", str(tmp_path / "missing.json"))])
    assert main(["distances", str(g), "--out", str(tmp_path / "o4")]) == 3
    assert main(["distances", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o5")]) == 2


def test_config_file_and_flag_precedence(demo_dir, tmp_path):
    from chainterp.cli import build_parser, resolve_config

    cfg = tmp_path / "run.toml"
    cfg.write_text('epsilon = 3\nkeep-prob = 0.7\nseed = 5\nlambda = 0.01\n')
    rc = resolve_config(build_parser().parse_args(["harmonize", "--config", str(cfg), "--seed", "9"]))
    assert (rc.epsilon, rc.keep_prob, rc.seed, rc.lam) == (3, 0.7, 9, 0.01)
    cfg.write_text("bogus = 1\n")
    assert main(["harmonize", "--config", str(cfg)]) == 1
    assert main(["harmonize", "--config", str(tmp_path / "none.toml")]) == 2
    assert main(args(demo_dir, tmp_path / "x", "harmonize", "--keep-prob", "0")) == 1


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["demo", "--out", str(blocker / "sub")]) == 5


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores directory permissions")
def test_read_only_directory(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        assert main(["demo", "--out", str(ro)]) == 5
    finally:
        ro.chmod(0o700)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "chainterp", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "chainterp" in res.stdout


@pytest.mark.slow
def test_second_seed_gives_different_passing_workspace(demo_dir, tmp_path):
    out = tmp_path / "seed1"
    assert main(["demo", "--out", str(out), "--seed", "1"]) == 0
    assert json.loads((out / "demo_summary.json").read_text())["passed"]
    assert (out / "net.json").read_bytes() != (demo_dir / "net.json").read_bytes()
