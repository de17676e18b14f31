import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from expertmerge import cli
from expertmerge.archive import read_archive, write_archive
from expertmerge.store import load_store
from expertmerge.subspace import subspace_affinity, truncated_svd


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def gen(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    assert run("generate", "--tasks", "6", "--shared-layers", "1", "--out", root) == 0
    return root


def tasks(gen, n):
    return [gen / f"task_{i}" for i in range(1, n + 1)]


def test_evolve_single_task(gen, tmp_path, capsys):
    assert run("evolve", gen / "backbone", gen / "task_1", "--out", tmp_path / "s") == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("task 1 ")]
    assert len(lines) == 6 and all("created expert 0" in l for l in lines)
    store = load_store(tmp_path / "s")
    assert all(len(r.experts) == 1 for r in store.modules.values())


def test_evolve_is_byte_identical(gen, tmp_path):
    for name in ("a", "b"):
        assert run("evolve", gen / "backbone", *tasks(gen, 3), "--out", tmp_path / name) == 0
    for rel in ("registry.json", "experts/manifest.json", "experts/blob.bin"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_evolve_mismatched_module(gen, tmp_path, capsys):
    weights = read_archive(gen / "task_1")
    weights["layer.7.attn.o"] = weights.pop("layer.2.mlp.fc1")
    write_archive(weights, tmp_path / "bad")
    assert run("evolve", gen / "backbone", tmp_path / "bad", "--out", tmp_path / "s") == 1
    assert "layer.2.mlp.fc1" in capsys.readouterr().err
    assert not (tmp_path / "s").exists()


def test_evolve_missing_archive(gen, tmp_path, capsys):
    assert run("evolve", gen / "backbone", tmp_path / "nope", "--out", tmp_path / "s") == 1
    assert "cannot read" in capsys.readouterr().err


def test_evolve_f32_inputs_consolidate_shared_modules(gen, tmp_path):
    assert run("evolve", gen / "backbone", *tasks(gen, 6), "--out", tmp_path / "s") == 0
    counts = load_store(tmp_path / "s").expert_counts()
    assert counts["layer.0.attn.o"] == 1 and counts["layer.2.mlp.fc1"] == 6
    assert load_store(tmp_path / "s").config.rank_rtol == cli.F32_RANK_RTOL


def test_stats(gen, tmp_path, capsys):
    run("evolve", gen / "backbone", *tasks(gen, 6), "--out", tmp_path / "s")
    capsys.readouterr()
    assert run("stats", tmp_path / "s", "--out", tmp_path / "csv") == 0
    out = capsys.readouterr().out
    assert out.startswith("6 tasks")
    with open(tmp_path / "csv" / "allocation_module.csv") as fh:
        rows = {r["module"]: float(r["reduction"]) for r in csv.DictReader(fh)}
    assert rows["layer.0.attn.o"] == pytest.approx(5 / 6)
    assert rows["layer.1.attn.o"] == 0.0
    assert (tmp_path / "csv" / "allocation_kind.csv").exists()
    assert (tmp_path / "csv" / "allocation_layer.csv").exists()


def test_stats_single_task(gen, tmp_path, capsys):
    run("evolve", gen / "backbone", gen / "task_1", "--out", tmp_path / "s")
    capsys.readouterr()
    assert run("stats", tmp_path / "s") == 0
    out = capsys.readouterr().out
    assert "1 tasks" in out and "reduction 0.000" in out


def test_stats_empty_directory(tmp_path, capsys):
    assert run("stats", tmp_path) == 1
    assert "registry.json" in capsys.readouterr().err


def test_route_with_input(gen, tmp_path, capsys):
    run("evolve", gen / "backbone", *tasks(gen, 2), "--out", tmp_path / "s")
    capsys.readouterr()
    assert run("route", tmp_path / "s", "--input", gen / "input_2.json", "--backbone", gen / "backbone",
               "--out", tmp_path / "path.json") == 0
    doc = json.loads((tmp_path / "path.json").read_text())
    assert doc["active_tasks"] == [2]
    assert doc["consistent"] is True
    assert json.loads(capsys.readouterr().out) == doc


def test_route_with_features_single_expert(gen, tmp_path, capsys):
    run("evolve", gen / "backbone", gen / "task_1", "--out", tmp_path / "s")
    store = load_store(tmp_path / "s")
    rng = np.random.default_rng(0)
    feats = {"features": {m: rng.standard_normal(32).tolist() for m in store.modules}}
    (tmp_path / "f.json").write_text(json.dumps(feats))
    capsys.readouterr()
    assert run("route", tmp_path / "s", "--features", tmp_path / "f.json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["selections"].values()) == {0}
    assert doc["consistent"] is True


def test_route_zero_input(gen, tmp_path, capsys):
    run("evolve", gen / "backbone", gen / "task_1", "--out", tmp_path / "s")
    (tmp_path / "z.json").write_text(json.dumps({"input": [0.0] * 32}))
    assert run("route", tmp_path / "s", "--input", tmp_path / "z.json", "--backbone", gen / "backbone") == 1
    assert "zero feature" in capsys.readouterr().err


def test_route_dimension_mismatch(gen, tmp_path, capsys):
    run("evolve", gen / "backbone", gen / "task_1", "--out", tmp_path / "s")
    (tmp_path / "x.json").write_text(json.dumps({"input": [1.0] * 5}))
    assert run("route", tmp_path / "s", "--input", tmp_path / "x.json", "--backbone", gen / "backbone") == 1
    assert "length" in capsys.readouterr().err


def test_route_input_requires_backbone(gen, tmp_path):
    run("evolve", gen / "backbone", gen / "task_1", "--out", tmp_path / "s")
    assert run("route", tmp_path / "s", "--input", gen / "input_1.json") == 1


def _affinity_rows(path):
    with open(path) as fh:
        return {r["module"]: float(r["affinity"]) for r in csv.DictReader(fh)}


def test_affinity_same_and_orthogonal(gen, tmp_path):
    assert run("affinity", gen / "task_1", gen / "task_1", "--backbone", gen / "backbone",
               "--out", tmp_path / "same.csv") == 0
    assert set(_affinity_rows(tmp_path / "same.csv").values()) == {1.0}
    assert run("affinity", gen / "task_1", gen / "task_2", "--backbone", gen / "backbone",
               "--out", tmp_path / "pair.csv") == 0
    rows = _affinity_rows(tmp_path / "pair.csv")
    for m, v in rows.items():
        expect = 1.0 if m.startswith("layer.0.") else 0.0
        assert v == pytest.approx(expect, abs=1e-6), m


def test_affinity_matches_library(tmp_path):
    rng = np.random.default_rng(1)
    names = ["layer.0.attn.o", "layer.0.mlp.fc1"]
    bb = {m: rng.standard_normal((20, 20)) for m in names}
    a = {m: rng.standard_normal((20, 20)) for m in names}
    b = {m: rng.standard_normal((20, 20)) for m in names}
    for name, w in (("bb", bb), ("a", a), ("b", b)):
        write_archive(w, tmp_path / name, dtype="f64")
    assert run("affinity", tmp_path / "a", tmp_path / "b", "--backbone", tmp_path / "bb", "--rho", "0.2",
               "--out", tmp_path / "x.csv") == 0
    rows = _affinity_rows(tmp_path / "x.csv")
    for m in names:
        ea, eb = truncated_svd(a[m] - bb[m], rank=4), truncated_svd(b[m] - bb[m], rank=4)
        assert rows[m] == subspace_affinity(ea, eb)


def test_affinity_module_mismatch(gen, tmp_path, capsys):
    write_archive({"layer.0.attn.o": np.eye(32)}, tmp_path / "small")
    assert run("affinity", gen / "task_1", tmp_path / "small", "--backbone", gen / "backbone") == 1
    assert "missing" in capsys.readouterr().err


def test_bench_prints_and_writes(tmp_path, capsys):
    assert run("bench", "--tasks", "4", "--seeds", "42..51", "--probes", "8", "--out", tmp_path / "r") == 0
    out = capsys.readouterr().out
    assert "10 runs" in out
    assert "ACC=1.000 ± 0.000  BWT=0.000 ± 0.000" in out
    doc = json.loads((tmp_path / "r" / "report.json").read_text())
    assert doc["seeds"] == list(range(42, 52))
    assert doc["config"]["rho"] == 0.1 and doc["config"]["beta"] == 1.0


@pytest.mark.parametrize("argv", [
    ["bench", "--rho", "1.1"],
    ["bench", "--rho", "0"],
    ["bench", "--pool-min", "0"],
    ["bench", "--seeds", "9..3"],
    ["evolve", "bb"],
])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2


def test_bench_infeasible_plan(capsys):
    assert run("bench", "--tasks", "20", "--planted-rank", "2", "--seeds", "1") == 1
    assert "do not fit" in capsys.readouterr().err


def test_seed_list_forms():
    assert cli._seeds("42..51") == list(range(42, 52))
    assert cli._seeds("1,5,9") == [1, 5, 9]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "expertmerge", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "expertmerge" in res.stdout
