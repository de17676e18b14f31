"""Command-line entry point: ``expertmerge <command> ...``.

Exit status is 0 on success, 1 on any archive, store, or validation
failure, and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .archive import diff_modules, ordered_modules, read_archive, read_archive_digest, read_archive_dtypes, write_archive
from .backbone import BackboneSpec, forward_capture, init_backbone
from .bench import TaskPlan, allocation_stats, generate_stream, run_experiment, sample_probes, write_allocation_csvs, write_report
from .errors import ExpertMergeError
from .evolution import EvolutionEngine
from .routing import ZeroFeature, build_graph, route
from .store import EvolutionConfig, load_store, save_store
from .subspace import subspace_affinity, truncated_svd, truncation_rank

log = logging.getLogger("expertmerge")

F32_RANK_RTOL = 1e-6


class CliError(Exception):
    pass


def _rho(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"rho must lie in (0, 1], got {value}")
    return value


def _unit(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"value must lie in [0, 1], got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seeds(text: str) -> list[int]:
    """``42..51`` (inclusive) or ``1,2,3``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use 42..51 or 1,2,3")


def _add_evolution_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rho", type=_rho, default=0.1, help="rank ratio in (0, 1] (default 0.1)")
    p.add_argument("--beta", type=float, default=1.0, help="threshold margin coefficient (default 1.0)")
    p.add_argument("--gamma0", type=_unit, default=0.6, help="bootstrap threshold (default 0.6)")
    p.add_argument("--pool-min", type=_positive_int, default=8,
                   help="affinity scores needed before the adaptive threshold kicks in (default 8)")
    p.add_argument("--pool-scope", choices=("global", "module"), default="global")


def _config(args, rank_rtol: float | None = None) -> EvolutionConfig:
    kwargs = dict(rho=args.rho, beta=args.beta, gamma0=args.gamma0, pool_min=args.pool_min,
                  pool_scope=args.pool_scope)
    if rank_rtol is not None:
        kwargs["rank_rtol"] = rank_rtol
    return EvolutionConfig(**kwargs)


def _spec_from(args) -> BackboneSpec:
    return BackboneSpec(args.layers, args.width, tuple(args.kinds), args.backbone_seed)


def _plan_from(args, spec: BackboneSpec) -> TaskPlan:
    rank = truncation_rank((spec.width, spec.width), args.rho)
    planted = args.planted_rank if args.planted_rank is not None else max(rank, 1)
    return TaskPlan.layered(spec, args.tasks, args.shared_layers, planted_rank=planted,
                            noise_scale=args.noise, seed=args.plan_seed,
                            identical_shared=args.identical_shared)


def cmd_evolve(args) -> int:
    backbone = read_archive(args.backbone)
    dtypes = read_archive_dtypes(args.backbone)
    for p in args.tasks:
        dtypes |= read_archive_dtypes(p)
    rtol = args.rank_rtol
    if rtol is None and "f32" in dtypes:
        rtol = F32_RANK_RTOL
    engine = EvolutionEngine(
        _config(args, rtol),
        module_shapes={k: v.shape for k, v in backbone.items()},
        targets=args.targets,
        backbone_ref=read_archive_digest(args.backbone),
    )
    for t, path in enumerate(args.tasks, start=1):
        deltas = diff_modules(backbone, read_archive(path))
        report = engine.evolve_step(t, deltas)
        for line in report.lines():
            print(line)
    store = engine.freeze()
    digest = save_store(store, args.out)
    counts = store.expert_counts()
    print(f"store written to {args.out} ({sum(counts.values())} experts over {len(counts)} modules, "
          f"sha256 {digest[:16]})")
    if store.skipped:
        print(f"modules without experts: {', '.join(store.skipped)}")
    return 0


def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}")


def cmd_route(args) -> int:
    store = load_store(args.store)
    if args.features:
        doc = _load_json(args.features)
        feats = doc.get("features") if isinstance(doc, dict) else None
        if not isinstance(feats, dict):
            raise CliError("features file must hold {\"features\": {module: [floats]}}")
        features = {m: np.asarray(v, dtype=np.float64) for m, v in feats.items()}
    else:
        if not args.backbone:
            raise CliError("--input needs --backbone")
        doc = _load_json(args.input)
        x = doc.get("input") if isinstance(doc, dict) else doc
        x = np.asarray(x, dtype=np.float64)
        if not np.any(x):
            raise ZeroFeature("zero feature: input vector is all zeros")
        _, features = forward_capture(read_archive(args.backbone), x)
    for m, h in features.items():
        if m in store.modules and not np.any(h):
            raise ZeroFeature(f"zero feature for module {m}")
    graph = build_graph(store, validate=not args.lenient)
    path = route(store, graph, features)
    text = path.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_bench(args) -> int:
    spec = _spec_from(args)
    plan = _plan_from(args, spec)
    report = run_experiment(plan, spec, _config(args), seeds=args.seeds, probes=args.probes,
                            n_classes=args.classes, jobs=args.jobs)
    print(f"{len(report.seeds)} runs, T={plan.num_tasks}, L={spec.layers}, d={spec.width}")
    print(report.summary())
    for m, v in report.allocation.per_module.items():
        print(f"  {m}: {v['experts']:.2f} experts, reduction {v['reduction']:.3f}")
    if args.out:
        for p in write_report(report, args.out):
            log.info("wrote %s", p)
        print(f"report written to {args.out}")
    return 0


def cmd_affinity(args) -> int:
    backbone = read_archive(args.backbone)
    da = diff_modules(backbone, read_archive(args.a))
    db = diff_modules(backbone, read_archive(args.b))
    rows = []
    for m in ordered_modules(backbone):
        rank = truncation_rank(da[m].shape, args.rho)
        try:
            ea = truncated_svd(da[m], rank=rank)
            eb = truncated_svd(db[m], rank=rank)
        except ExpertMergeError as exc:
            log.warning("%s: %s", m, exc)
            rows.append((m, ""))
            continue
        rows.append((m, repr(subspace_affinity(ea, eb))))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["module", "affinity"])
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_stats(args) -> int:
    store = load_store(args.store)
    tasks = set()
    for reg in store.modules.values():
        tasks |= reg.covered_tasks()
    if not tasks:
        raise CliError("store has no tasks")
    stats = allocation_stats(store.expert_counts(), len(tasks))
    print(f"{len(tasks)} tasks")
    for m, v in stats.per_module.items():
        print(f"  {m}: {int(v['experts'])} experts, reduction {v['reduction']:.3f}")
    if args.out:
        write_allocation_csvs(stats, Path(args.out))
        print(f"allocation tables written to {args.out}")
    return 0


def cmd_generate(args) -> int:
    spec = _spec_from(args)
    plan = _plan_from(args, spec)
    backbone = init_backbone(spec)
    rank = truncation_rank((spec.width, spec.width), args.rho)
    stream = generate_stream(plan, backbone, rank)
    out = Path(args.out)
    write_archive(backbone, out / "backbone", dtype=args.dtype)
    rng = np.random.default_rng(args.plan_seed)
    for t, weights in enumerate(stream.tasks, start=1):
        write_archive(weights, out / f"task_{t}", dtype=args.dtype)
        probe = sample_probes(stream, t - 1, 1, rng)[0]
        (out / f"input_{t}.json").write_text(json.dumps({"input": probe.tolist()}) + "\n")
    print(f"wrote backbone, {plan.num_tasks} task archives and probe inputs to {out}")
    return 0


def _add_plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tasks", type=_positive_int, default=4, help="number of tasks T")
    p.add_argument("--layers", type=_positive_int, default=3)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--kinds", nargs="+", default=["attn.o", "mlp.fc1"])
    p.add_argument("--shared-layers", type=int, default=0,
                   help="leading layers whose plants are shared by all tasks (rest are task-specific)")
    p.add_argument("--planted-rank", type=_positive_int, default=None,
                   help="rank of planted updates (default: the expert rank)")
    p.add_argument("--noise", type=float, default=0.0, help="relative Frobenius noise on updates")
    p.add_argument("--identical-shared", action="store_true",
                   help="shared modules use the same singular values for every task")
    p.add_argument("--plan-seed", type=int, default=0)
    p.add_argument("--backbone-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertmerge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="merge task checkpoints into an expert store")
    p.add_argument("backbone", help="backbone archive directory")
    p.add_argument("tasks", nargs="+", help="task archive directories, in arrival order")
    p.add_argument("--out", required=True, help="expert store directory to write")
    p.add_argument("--targets", nargs="+", default=None, help="module names or kinds to merge (default: all)")
    p.add_argument("--rank-rtol", type=float, default=None,
                   help="relative rank tolerance of the polar step (default 1e-10; 1e-6 for f32 archives)")
    _add_evolution_flags(p)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("route", help="select one expert per module for a query")
    p.add_argument("store")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", help='JSON file {"features": {module: [floats]}}')
    src.add_argument("--input", help='JSON file {"input": [floats]} run through --backbone')
    p.add_argument("--backbone")
    p.add_argument("--out")
    p.add_argument("--lenient", action="store_true", help="skip the task-coverage check on the store")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("bench", help="run the planted-stream benchmark over several seeds")
    _add_plan_flags(p)
    _add_evolution_flags(p)
    p.add_argument("--seeds", type=_seeds, default=list(range(42, 52)), help="e.g. 42..51 or 1,2,3")
    p.add_argument("--probes", type=_positive_int, default=64, help="probe inputs per task")
    p.add_argument("--classes", type=_positive_int, default=10, help="readout classes")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("affinity", help="per-module subspace affinity of two task checkpoints")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--backbone", required=True)
    p.add_argument("--rho", type=_rho, default=0.1)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_affinity)

    p = sub.add_parser("stats", help="expert counts and reduction rates of a store")
    p.add_argument("store")
    p.add_argument("--out", help="directory for the allocation CSVs")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("generate", help="write a synthetic backbone and planted task checkpoints")
    _add_plan_flags(p)
    p.add_argument("--rho", type=_rho, default=0.1)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ZeroFeature as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ExpertMergeError, CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
