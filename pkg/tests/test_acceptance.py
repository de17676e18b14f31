"""Acceptance gate: eight criteria, each printed as a PASS/FAIL line in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py``.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import Timer, make_expert, orthogonal_blocks, orthonormal
from expertmerge import cli
from expertmerge.archive import read_archive, write_archive
from expertmerge.backbone import BackboneSpec, RoutedModel, forward, init_backbone
from expertmerge.bench import TaskPlan, compute_acc, compute_bwt, generate_stream, sample_probes
from expertmerge.evolution import evolve
from expertmerge.routing import build_graph, route
from expertmerge.store import EvolutionConfig
from expertmerge.subspace import (
    chordal_distance_sq,
    principal_angle_cosines,
    projection_affinity,
    reconstruct,
    subspace_affinity,
    subspace_merge,
    truncated_svd,
    truncation_rank,
)


@pytest.mark.criterion(1, "subspace identities on 500 random basis pairs")
def test_identity_suite():
    rng = np.random.default_rng(1)
    worst = dict(trace=0.0, spectral=0.0, chordal=0.0, rotation=0.0)
    with Timer() as t:
        for i in range(500):
            d = (8, 16, 64)[i % 3]
            r = (1, 2, 8)[(i // 3) % 3]
            s1, s2 = orthonormal(rng, d, r), orthonormal(rng, d, r)
            aff = projection_affinity(s1, s2)
            frob = float(np.sum((s1.T @ s2) ** 2))
            p1, p2 = s1 @ s1.T, s2 @ s2.T
            worst["trace"] = max(worst["trace"], abs(np.trace(p1 @ p2) - frob))
            cos = principal_angle_cosines(s1, s2)
            worst["spectral"] = max(worst["spectral"], abs(aff - np.mean(cos ** 2)))
            worst["chordal"] = max(worst["chordal"], abs(aff - (1 - chordal_distance_sq(s1, s2) / r)))
            q1, q2 = orthonormal(rng, r, r), orthonormal(rng, r, r)
            worst["rotation"] = max(worst["rotation"], abs(projection_affinity(s1 @ q1, s2 @ q2) - aff))
            assert projection_affinity(s2, s1) == aff
            a = make_expert(rng, (d, d), r)
            b = make_expert(rng, (d, d), r)
            assert subspace_affinity(a, b) == subspace_affinity(b, a)
    for key, val in worst.items():
        assert val <= 1e-9, f"{key} identity off by {val:.2e}"
    assert t.elapsed < 10


def _optimal_error(m, r):
    # Eckart-Young optimum from the eigenvalues of the Gram matrix
    eig = np.linalg.eigvalsh(m.T @ m)
    return float(np.sqrt(max(np.sum(eig[:m.shape[1] - r]), 0.0)))


@pytest.mark.criterion(2, "truncated SVD reaches the Eckart-Young optimum on 100 matrices")
def test_eckart_young():
    rng = np.random.default_rng(2)
    with Timer() as t:
        for i in range(100):
            m = rng.standard_normal((32, 32))
            r = int(rng.integers(1, 33))
            err = np.linalg.norm(m - reconstruct(truncated_svd(m, rank=r)))
            assert err <= _optimal_error(m, r) + 1e-9
    assert t.elapsed < 5


@pytest.mark.criterion(3, "merge of orthogonal experts equals dense SVD_r of the sum")
def test_consolidation_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    with Timer() as t:
        for i in range(100):
            d_o, d_i = int(rng.integers(8, 40)), int(rng.integers(8, 40))
            r = int(rng.integers(1, min(d_o, d_i) // 2 + 1))
            u1, u2 = orthogonal_blocks(rng, d_o, (r, r))
            v1, v2 = orthogonal_blocks(rng, d_i, (r, r))
            a = make_expert(rng, (d_o, d_i), r, (1,), u1, v1)
            b = make_expert(rng, (d_o, d_i), r, (2,), u2, v2)
            dense = reconstruct(a) + reconstruct(b)
            p, s, qt = np.linalg.svd(dense)
            oracle = (p[:, :r] * s[:r]) @ qt[:r]
            merged = subspace_merge(a, b)
            worst = max(worst, np.linalg.norm(reconstruct(merged) - oracle))
            assert merged.tasks == {1, 2}
    assert worst <= 1e-8, f"max Frobenius gap {worst:.2e}"
    assert t.elapsed < 10


@pytest.mark.criterion(4, "6-task shared-early/specific-late stream gives counts 1 and 6 over seeds 42-51")
def test_evolution_fixture():
    spec = BackboneSpec(layers=3, width=32)
    backbone = init_backbone(spec)
    r = truncation_rank((32, 32), 0.1)
    plan = TaskPlan.layered(spec, 6, shared_layers=1, planted_rank=r)
    with Timer() as t:
        stream = generate_stream(plan, backbone, r)
        for seed in range(42, 52):
            order = np.random.default_rng(seed).permutation(6)
            engine, _ = evolve([stream.deltas[i] for i in order], EvolutionConfig())
            store = engine.freeze()
            for m, reg in store.modules.items():
                if m in plan.shared_modules:
                    assert len(reg.experts) == 1, (seed, m)
                    assert reg.experts[0].tasks == set(range(1, 7))
                    assert 1 - len(reg.experts) / 6 == pytest.approx(5 / 6)
                else:
                    assert len(reg.experts) == 6, (seed, m)
    assert t.elapsed < 30


def _orthogonal_store(rng, tasks, modules, d, r):
    """Store evolved from tasks with pairwise-orthogonal planted subspaces at every module."""
    rights = {}
    deltas = [dict() for _ in range(tasks)]
    for m in modules:
        lefts = orthogonal_blocks(rng, d, [r] * tasks)
        rights[m] = orthogonal_blocks(rng, d, [r] * tasks)
        for k in range(tasks):
            deltas[k][m] = (lefts[k] * rng.uniform(1, 2, r)) @ rights[m][k].T
    engine, _ = evolve(deltas, EvolutionConfig())
    return engine.freeze(), rights


@pytest.mark.criterion(5, "routing recovery: >=99% at noise 0.1, 100% and teacher match at noise 0")
def test_routing_recovery():
    rng = np.random.default_rng(5)
    modules = [f"layer.{i}.{k}" for i in range(3) for k in ("attn.o", "mlp.fc1")]
    K, d, r = 4, 32, 3
    with Timer() as t:
        store, rights = _orthogonal_store(rng, K, modules, d, r)
        graph = build_graph(store)
        for noise in (0.1, 0.0):
            hits = 0
            for trial in range(1000):
                k = trial % K
                feats = {}
                for m in modules:
                    h = rights[m][k] @ rng.standard_normal(r)
                    if noise:
                        e = rng.standard_normal(d)
                        h = h + e * (noise * np.linalg.norm(h) / np.linalg.norm(e))
                    feats[m] = h
                path = route(store, graph, feats)
                hits += all(store.modules[m].experts[path.selections[m]].tasks == {k + 1} for m in modules)
            rate = hits / 1000
            if noise:
                assert rate >= 0.99, f"selection rate {rate:.3f} at noise {noise}"
            else:
                assert rate == 1.0

        spec = BackboneSpec(layers=3, width=d)
        backbone = init_backbone(spec)
        plan = TaskPlan.layered(spec, K, planted_rank=r)
        stream = generate_stream(plan, backbone, r)
        engine, _ = evolve(stream.deltas, EvolutionConfig())
        model = RoutedModel(backbone, engine.freeze())
        worst = 0.0
        for k in range(K):
            for x in sample_probes(stream, k, 250, rng):
                assert model.route(x).active_tasks == {k + 1}
                worst = max(worst, float(np.max(np.abs(model(x) - forward(stream.tasks[k], x)))))
        assert worst <= 1e-8, f"teacher mismatch {worst:.2e}"
    assert t.elapsed < 30


@pytest.mark.criterion(6, "ACC/BWT equal brute-force recomputation; T=2 example gives -0.05")
def test_metrics():
    rng = np.random.default_rng(6)
    for _ in range(200):
        T = int(rng.integers(2, 12))
        a = np.triu(rng.uniform(0, 1, (T, T)))
        a[np.tril_indices(T, -1)] = np.nan
        acc = sum(a[i][T - 1] for i in range(T)) / T
        bwt = sum(a[i][T - 1] - a[i][i] for i in range(T - 1)) / (T - 1)
        assert abs(compute_acc(a) - acc) <= 1e-12
        assert abs(compute_bwt(a) - bwt) <= 1e-12
    hand = np.array([[0.90, 0.85], [np.nan, 1.0]])
    assert compute_bwt(hand) == 0.85 - 0.90
    assert compute_bwt(hand) == pytest.approx(-0.05, abs=1e-15)


@pytest.mark.criterion(7, "bench on the noiseless specific plan prints ACC=1.000 and BWT=0.000 over 10 seeds")
def test_bench_end_to_end(capsys):
    with Timer() as t:
        code = cli.main(["bench", "--tasks", "4", "--width", "32", "--layers", "3", "--seeds", "42..51"])
    out = capsys.readouterr().out
    assert code == 0
    assert "10 runs" in out
    assert "ACC=1.000 ± 0.000" in out
    assert "BWT=0.000 ± 0.000" in out
    assert t.elapsed < 60


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(8, "evolve is byte-deterministic; archives round-trip bit-exactly on 1000 tensors")
def test_determinism_and_round_trip(tmp_path, capsys):
    assert cli.main(["generate", "--tasks", "4", "--shared-layers", "1", "--out", str(tmp_path / "gen")]) == 0
    gen = tmp_path / "gen"
    tasks = [str(gen / f"task_{i}") for i in range(1, 5)]
    for name in ("a", "b"):
        assert cli.main(["evolve", str(gen / "backbone"), *tasks, "--out", str(tmp_path / name)]) == 0
    first, second = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert first and first == second

    rng = np.random.default_rng(8)
    tensors = {}
    for i in range(1000):
        shape = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(1, 4))))
        tensors[f"t{i}"] = rng.standard_normal(shape).astype(np.float32)
    tensors["t0"] = np.array([np.inf, -np.inf, -0.0, 1e-45, np.finfo(np.float32).max], dtype=np.float32)
    # quiet and signalling NaNs with non-default payloads
    tensors["t1"] = np.array([0x7FC00001, 0xFFC12345, 0x7F800F0F], dtype=np.uint32).view(np.float32)
    write_archive(tensors, tmp_path / "rt")
    back = read_archive(tmp_path / "rt", promote=False)
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert back[name].dtype == np.float32
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
