"""Synthetic continual-merging benchmark.

Task checkpoints are built around planted low-rank updates. In *shared*
modules every task uses one common subspace pair. In *specific* modules
each task gets its own, mutually orthogonal pair. The input side of a
specific plant is the image of that task's input subspace under the
backbone's linearisation, so backbone features of a task's inputs line
up with that task's expert.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .archive import module_kind, module_layer, ordered_modules
from .backbone import BackboneSpec, RoutedModel, forward, init_backbone, random_orthogonal
from .errors import ValidationError, ZeroUpdate
from .evolution import EvolutionEngine
from .store import EvolutionConfig
from .subspace import subspace_affinity, truncated_svd, truncation_rank

log = logging.getLogger(__name__)

PROBE_SCALE = 0.1
SPECIFIC_AFFINITY_MAX = 0.1


class PlanError(ValidationError):
    """A task plan cannot be realised on the given backbone."""


@dataclass(frozen=True)
class TaskPlan:
    num_tasks: int
    shared_modules: frozenset = frozenset()
    specific_modules: frozenset = frozenset()
    planted_rank: int = 1
    noise_scale: float = 0.0
    seed: int = 0
    identical_shared: bool = False

    def __post_init__(self):
        object.__setattr__(self, "shared_modules", frozenset(self.shared_modules))
        object.__setattr__(self, "specific_modules", frozenset(self.specific_modules))
        if self.num_tasks < 1:
            raise PlanError(f"num_tasks must be >= 1, got {self.num_tasks}")
        if self.planted_rank < 1:
            raise PlanError(f"planted_rank must be >= 1, got {self.planted_rank}")
        if self.shared_modules & self.specific_modules:
            raise PlanError("shared and specific module sets overlap")
        if not 0.0 <= self.noise_scale <= 0.5:
            raise PlanError(f"noise_scale must lie in [0, 0.5], got {self.noise_scale}")

    @classmethod
    def layered(cls, spec: BackboneSpec, num_tasks: int, shared_layers: int = 0, **kwargs) -> "TaskPlan":
        """First ``shared_layers`` layers shared, the rest task-specific."""
        names = spec.module_names()
        shared = {n for n in names if module_layer(n) < shared_layers}
        return cls(num_tasks, frozenset(shared), frozenset(set(names) - shared), **kwargs)


@dataclass
class TaskStream:
    """Generated checkpoints, in plan order (task index 0..T-1)."""

    plan: TaskPlan
    tasks: list[dict[str, np.ndarray]]
    deltas: list[dict[str, np.ndarray]]
    input_bases: list[np.ndarray]


def _orthonormal_blocks(m: np.ndarray, blocks: int, width: int) -> list[np.ndarray]:
    # QR keeps span of each leading block, so block t spans m's block t modulo earlier blocks
    q, _ = np.linalg.qr(m)
    return [q[:, t * width:(t + 1) * width] for t in range(blocks)]


def generate_stream(plan: TaskPlan, backbone: Mapping[str, np.ndarray], rank: int | None = None) -> TaskStream:
    """Build T task checkpoints on top of ``backbone`` following ``plan``.

    ``rank`` is the expert rank the stream will be merged at; the planted
    rank may not exceed it.
    """
    modules = ordered_modules(backbone)
    unknown = (plan.shared_modules | plan.specific_modules) - set(modules)
    if unknown:
        raise PlanError("plan names a module absent from the backbone", sorted(unknown)[0])
    T, p = plan.num_tasks, plan.planted_rank
    shapes = {m: np.asarray(backbone[m]).shape for m in modules}
    if rank is not None and p > rank:
        raise PlanError(f"planted rank {p} exceeds expert rank {rank}")
    d_in = shapes[modules[0]][1]
    need = [d_in] + [min(shapes[m]) for m in plan.specific_modules]
    if plan.specific_modules and T * p > min(need):
        raise PlanError(f"{T} tasks x planted rank {p} = {T * p} orthogonal directions "
                        f"do not fit in dimension {min(need)}")
    if any(p > min(shapes[m]) for m in plan.shared_modules):
        raise PlanError(f"planted rank {p} exceeds a shared module's dimensions")

    rng = np.random.default_rng(plan.seed)
    if T * p <= d_in:
        input_bases = _orthonormal_blocks(random_orthogonal(d_in, rng)[:, :T * p], T, p)
    else:
        input_bases = [random_orthogonal(d_in, rng)[:, :p] for _ in range(T)]

    deltas: list[dict[str, np.ndarray]] = [dict() for _ in range(T)]
    linear = np.eye(d_in)
    common_scales = np.sort(rng.uniform(1.0, 2.0, p))[::-1]
    for m in modules:
        d_o, d_i = shapes[m]
        w0 = np.asarray(backbone[m], dtype=np.float64)
        if m in plan.specific_modules:
            feats = linear @ np.hstack(input_bases)
            rights = _orthonormal_blocks(feats, T, p)
            lefts = _orthonormal_blocks(random_orthogonal(d_o, rng)[:, :T * p], T, p)
            for t in range(T):
                scales = np.sort(rng.uniform(1.0, 2.0, p))[::-1]
                deltas[t][m] = (lefts[t] * scales) @ rights[t].T
        elif m in plan.shared_modules:
            left = random_orthogonal(d_o, rng)[:, :p]
            right = random_orthogonal(d_i, rng)[:, :p]
            for t in range(T):
                scales = common_scales if plan.identical_shared else np.sort(rng.uniform(1.0, 2.0, p))[::-1]
                deltas[t][m] = (left * scales) @ right.T
        else:
            for t in range(T):
                deltas[t][m] = np.zeros((d_o, d_i))
        if plan.noise_scale > 0:
            for t in range(T):
                size = np.linalg.norm(deltas[t][m])
                if size > 0:
                    noise = rng.standard_normal((d_o, d_i))
                    deltas[t][m] = deltas[t][m] + noise * (plan.noise_scale * size / np.linalg.norm(noise))
        linear = w0 @ linear

    if plan.noise_scale > 0 and rank is not None:
        _verify_specific(plan, deltas, rank)
    tasks = [{m: np.asarray(backbone[m], dtype=np.float64) + deltas[t][m] for m in modules} for t in range(T)]
    return TaskStream(plan, tasks, deltas, input_bases)


def _verify_specific(plan: TaskPlan, deltas, rank: int) -> None:
    for m in ordered_modules(plan.specific_modules):
        experts = [truncated_svd(d[m], rank=rank) for d in deltas]
        for a in range(len(experts)):
            for b in range(a + 1, len(experts)):
                aff = subspace_affinity(experts[a], experts[b])
                if aff > SPECIFIC_AFFINITY_MAX:
                    raise PlanError(f"noise raised cross-task affinity of tasks {a + 1},{b + 1} "
                                    f"to {aff:.3f} > {SPECIFIC_AFFINITY_MAX}", m)


def sample_probes(stream: TaskStream, task: int, n: int, rng: np.random.Generator,
                  scale: float = PROBE_SCALE) -> np.ndarray:
    """``n`` inputs (rows) drawn from task ``task``'s input subspace."""
    basis = stream.input_bases[task]
    return (rng.standard_normal((n, basis.shape[1])) * scale) @ basis.T


def make_readout(d: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n_classes, d))


def task_accuracy(model: Callable[[np.ndarray], np.ndarray], teacher: Callable[[np.ndarray], np.ndarray],
                  probes: np.ndarray, readout: np.ndarray) -> float:
    """Fraction of probes whose readout argmax matches the teacher's."""
    probes = np.atleast_2d(probes)
    if probes.shape[0] < 1:
        raise ValueError("need at least one probe")
    hits = 0
    for x in probes:
        hits += int(np.argmax(readout @ model(x)) == np.argmax(readout @ teacher(x)))
    return hits / probes.shape[0]


def _check_matrix(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"evaluation matrix must be square T x T, got {a.shape}")
    return a


def compute_acc(a: np.ndarray) -> float:
    """Mean accuracy over all tasks after the final merge (last column)."""
    a = _check_matrix(a)
    last = a[:, -1]
    if np.any(np.isnan(last)):
        raise ValueError("final column has missing entries")
    return float(np.mean(last))


def compute_bwt(a: np.ndarray) -> float:
    """Mean change, over tasks 1..T-1, from right after a task's own merge to the end."""
    a = _check_matrix(a)
    T = a.shape[0]
    if T < 2:
        raise ValueError("backward transfer needs at least two tasks")
    final = a[:T - 1, -1]
    own = np.diag(a)[:T - 1]
    if np.any(np.isnan(final)) or np.any(np.isnan(own)):
        raise ValueError("evaluation matrix is missing entries needed for backward transfer")
    return float(np.mean(final - own))


@dataclass
class AllocationStats:
    num_tasks: int
    per_module: dict[str, dict]
    per_kind: dict[str, dict]
    per_layer: dict[int, dict]


def allocation_stats(counts: Mapping[str, float], num_tasks: int) -> AllocationStats:
    per_module = {m: {"experts": float(c), "reduction": 1.0 - c / num_tasks} for m, c in counts.items()}

    def group(key):
        acc = defaultdict(list)
        for m, c in counts.items():
            acc[key(m)].append(c)
        return {g: {"experts": float(np.mean(v)), "reduction": float(1.0 - np.mean(v) / num_tasks)}
                for g, v in acc.items()}

    return AllocationStats(num_tasks, per_module, group(module_kind),
                           group(lambda m: module_layer(m) if module_layer(m) is not None else -1))


@dataclass
class RunResult:
    seed: int
    order: list[int]
    eval_matrix: np.ndarray
    acc: float
    bwt: float | None
    expert_counts: dict[str, int]
    final_accuracies: list[float]
    backbone_accuracies: list[float]


def run_single(plan: TaskPlan, spec: BackboneSpec, config: EvolutionConfig, seed: int,
               probes: int = 64, n_classes: int = 10,
               stream: TaskStream | None = None) -> RunResult:
    """One shuffled pass: evolve task by task, evaluating every prefix on the tasks seen so far."""
    backbone = init_backbone(spec)
    rank = truncation_rank((spec.width, spec.width), config.rho)
    if stream is None:
        stream = generate_stream(plan, backbone, rank)
    T = plan.num_tasks
    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(T)]
    readout = make_readout(spec.width, n_classes, rng)
    task_probes = [sample_probes(stream, order[i], probes, rng) for i in range(T)]

    engine = EvolutionEngine(config)
    evals = np.full((T, T), np.nan)
    store = None
    for t in range(T):
        engine.evolve_step(t + 1, stream.deltas[order[t]])
        store = engine.freeze()
        model = RoutedModel(backbone, store) if store.modules else (lambda x: forward(backbone, x))
        for i in range(t + 1):
            teacher_w = stream.tasks[order[i]]
            evals[i, t] = task_accuracy(model, lambda x, w=teacher_w: forward(w, x), task_probes[i], readout)

    base = [task_accuracy(lambda x: forward(backbone, x), lambda x, w=stream.tasks[order[i]]: forward(w, x),
                          task_probes[i], readout) for i in range(T)]
    counts = {m: len(store.modules[m].experts) if m in store.modules else 0
              for m in ordered_modules(backbone)}
    return RunResult(
        seed=seed,
        order=[o + 1 for o in order],
        eval_matrix=evals,
        acc=compute_acc(evals),
        bwt=compute_bwt(evals) if T >= 2 else None,
        expert_counts=counts,
        final_accuracies=[float(v) for v in evals[:, -1]],
        backbone_accuracies=base,
    )


def affinity_heatmaps(stream: TaskStream, rank: int) -> dict[str, np.ndarray]:
    """Pairwise affinity of the tasks' candidate experts, per module, in plan order."""
    out = {}
    for m in ordered_modules(stream.deltas[0]):
        experts = []
        for d in stream.deltas:
            try:
                experts.append(truncated_svd(d[m], rank=rank))
            except ZeroUpdate:
                experts.append(None)
        T = len(experts)
        mat = np.full((T, T), np.nan)
        for a in range(T):
            for b in range(T):
                if experts[a] is not None and experts[b] is not None:
                    mat[a, b] = subspace_affinity(experts[a], experts[b])
        out[m] = mat
    return out


@dataclass
class Report:
    plan: TaskPlan
    spec: BackboneSpec
    config: EvolutionConfig
    seeds: list[int]
    runs: list[RunResult]
    acc_mean: float
    acc_std: float
    bwt_mean: float | None
    bwt_std: float | None
    allocation: AllocationStats
    heatmaps: dict[str, np.ndarray] = field(default_factory=dict)

    def summary(self) -> str:
        text = f"ACC={self.acc_mean:.3f} ± {self.acc_std:.3f}"
        if self.bwt_mean is not None:
            text += f"  BWT={self.bwt_mean:.3f} ± {self.bwt_std:.3f}"
        return text

    def to_dict(self) -> dict:
        plan = asdict(self.plan)
        plan["shared_modules"] = ordered_modules(self.plan.shared_modules)
        plan["specific_modules"] = ordered_modules(self.plan.specific_modules)
        return {
            "plan": plan,
            "backbone": asdict(self.spec),
            "config": asdict(self.config),
            "seeds": self.seeds,
            "acc": {"mean": self.acc_mean, "std": self.acc_std},
            "bwt": {"mean": self.bwt_mean, "std": self.bwt_std},
            "allocation": {
                "num_tasks": self.allocation.num_tasks,
                "per_module": self.allocation.per_module,
                "per_kind": self.allocation.per_kind,
                "per_layer": {str(k): v for k, v in self.allocation.per_layer.items()},
            },
            "runs": [
                {
                    "seed": r.seed,
                    "order": r.order,
                    "acc": r.acc,
                    "bwt": r.bwt,
                    "expert_counts": r.expert_counts,
                    "final_accuracies": r.final_accuracies,
                    "backbone_accuracies": r.backbone_accuracies,
                    "eval_matrix": [[None if math.isnan(v) else v for v in row] for row in r.eval_matrix.tolist()],
                }
                for r in self.runs
            ],
        }


def _run_one(args):
    return run_single(*args)


def run_experiment(plan: TaskPlan, spec: BackboneSpec, config: EvolutionConfig | None = None,
                   seeds: Iterable[int] = range(42, 52), probes: int = 64, n_classes: int = 10,
                   jobs: int = 1) -> Report:
    """Repeat ``run_single`` over seeds (each seed shuffles the task order) and aggregate."""
    config = config or EvolutionConfig()
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    rank = truncation_rank((spec.width, spec.width), config.rho)
    backbone = init_backbone(spec)
    stream = generate_stream(plan, backbone, rank)
    work = [(plan, spec, config, s, probes, n_classes, stream) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_one, work))
    else:
        runs = [_run_one(w) for w in work]

    accs = np.array([r.acc for r in runs])
    bwts = np.array([r.bwt for r in runs if r.bwt is not None])
    mean_counts = {m: float(np.mean([r.expert_counts[m] for r in runs])) for m in runs[0].expert_counts}
    return Report(
        plan=plan, spec=spec, config=config, seeds=seeds, runs=runs,
        acc_mean=float(accs.mean()), acc_std=float(accs.std()),
        bwt_mean=float(bwts.mean()) if bwts.size else None,
        bwt_std=float(bwts.std()) if bwts.size else None,
        allocation=allocation_stats(mean_counts, plan.num_tasks),
        heatmaps=affinity_heatmaps(stream, rank),
    )


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_allocation_csvs(stats: AllocationStats, out: Path, prefix: str = "allocation") -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{prefix}_module.csv", out / f"{prefix}_kind.csv", out / f"{prefix}_layer.csv"]
    _write_csv(paths[0], ["module", "experts", "reduction"],
               [(m, v["experts"], v["reduction"]) for m, v in stats.per_module.items()])
    _write_csv(paths[1], ["kind", "experts", "reduction"],
               [(k, v["experts"], v["reduction"]) for k, v in sorted(stats.per_kind.items())])
    _write_csv(paths[2], ["layer", "experts", "reduction"],
               [(k, v["experts"], v["reduction"]) for k, v in sorted(stats.per_layer.items())])
    return paths


def write_report(report: Report, out) -> list[Path]:
    """report.json plus CSV tables: eval matrices, allocation breakdowns, affinity heatmaps."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.json"]
    written[0].write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    rows = []
    for r in report.runs:
        T = r.eval_matrix.shape[0]
        for i in range(T):
            for t in range(i, T):
                rows.append((r.seed, i + 1, t + 1, r.eval_matrix[i, t]))
    written.append(out / "eval_matrix.csv")
    _write_csv(written[-1], ["seed", "task", "step", "accuracy"], rows)
    written += write_allocation_csvs(report.allocation, out)
    heat = []
    for m, mat in report.heatmaps.items():
        for a in range(mat.shape[0]):
            for b in range(mat.shape[1]):
                heat.append((m, a + 1, b + 1, "" if math.isnan(mat[a, b]) else mat[a, b]))
    written.append(out / "affinity.csv")
    _write_csv(written[-1], ["module", "task_a", "task_b", "affinity"], heat)
    return written
