"""Sequential expert evolution: create a new expert or consolidate into an existing one.

Every incoming task checkpoint is split into per-module weight updates.
Each update becomes a rank-r candidate expert, which is compared to the
module's current experts by subspace affinity. If the best affinity
reaches the adaptive threshold the candidate is merged into that expert;
otherwise it becomes a new one.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .archive import module_kind, ordered_modules
from .errors import ModuleMismatch, ValidationError, ZeroUpdate
from .store import (
    CONSOLIDATED,
    CREATED,
    SKIPPED_ZERO,
    Decision,
    EvolutionConfig,
    ExpertRegistry,
    ExpertStore,
)
from .subspace import ExpertSubspace, subspace_affinity, subspace_merge, truncated_svd, truncation_rank

log = logging.getLogger(__name__)

GLOBAL_POOL = "*"


@dataclass
class AffinityPool:
    """Append-only history of decision affinities behind the adaptive threshold."""

    beta: float = 1.0
    gamma0: float = 0.6
    pool_min: int = 8
    scores: list[float] = field(default_factory=list)

    def add(self, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"affinity score {value} outside [0, 1]")
        self.scores.append(float(value))


def adaptive_threshold(pool: AffinityPool) -> float:
    """``mean + beta * std`` of the pooled scores, clamped to [0, 1].

    Falls back to ``gamma0`` while the pool is smaller than ``pool_min``
    or has no spread at all (every score identical).
    """
    if len(pool.scores) < pool.pool_min:
        return pool.gamma0
    scores = np.asarray(pool.scores, dtype=np.float64)
    sigma = float(scores.std())
    if sigma == 0.0:
        return pool.gamma0
    return float(np.clip(scores.mean() + pool.beta * sigma, 0.0, 1.0))


def argmax_affinity(registry: ExpertRegistry, candidate: ExpertSubspace) -> tuple[int, float]:
    """Index and value of the most affine expert; the lowest index wins ties."""
    if not registry.experts:
        raise ValidationError("registry is empty", registry.module_name)
    best, best_val = 0, -1.0
    for k, expert in enumerate(registry.experts):
        val = subspace_affinity(expert, candidate)
        if val > best_val:
            best, best_val = k, val
    return best, best_val


@dataclass(frozen=True)
class EvolutionReport:
    task_id: int
    step: int
    decisions: dict[str, Decision]

    @property
    def thresholds(self) -> dict[str, float | None]:
        return {m: d.threshold for m, d in self.decisions.items()}

    def counts(self) -> dict[str, int]:
        out = {CREATED: 0, CONSOLIDATED: 0, SKIPPED_ZERO: 0}
        for d in self.decisions.values():
            out[d.action] += 1
        return out

    def lines(self) -> list[str]:
        return [f"task {self.task_id} {m}: {d.describe()}" for m, d in self.decisions.items()]


class EvolutionEngine:
    """Holds one registry per target module and absorbs task updates one at a time.

    ``targets`` restricts which modules take part; entries may be full
    module names or module kinds (``"mlp.fc1"``). Deltas for other modules
    are ignored.
    """

    def __init__(self, config: EvolutionConfig | None = None, *,
                 module_shapes: Mapping[str, tuple[int, int]] | None = None,
                 targets: Iterable[str] | None = None,
                 backbone_ref: str | None = None):
        self.config = config or EvolutionConfig()
        self.targets = frozenset(targets) if targets is not None else None
        self.backbone_ref = backbone_ref
        self.registries: dict[str, ExpertRegistry] = {}
        self.pools: dict[str, AffinityPool] = {}
        self.step = 0
        self.task_ids: list[int] = []
        if module_shapes is not None:
            self._init_registries({k: v for k, v in module_shapes.items() if self._is_target(k)})

    def _is_target(self, name: str) -> bool:
        return self.targets is None or name in self.targets or module_kind(name) in self.targets

    def _new_pool(self) -> AffinityPool:
        c = self.config
        return AffinityPool(beta=c.beta, gamma0=c.gamma0, pool_min=c.pool_min)

    def _pool_key(self, module: str) -> str:
        return GLOBAL_POOL if self.config.pool_scope == "global" else module

    def _init_registries(self, shapes: Mapping[str, tuple[int, int]]) -> None:
        if not shapes:
            raise ValidationError("no target modules")
        for name in ordered_modules(shapes):
            shape = tuple(int(s) for s in shapes[name])
            if len(shape) != 2:
                raise ModuleMismatch(f"expected a 2-D weight, got shape {shape}", name)
            rank = truncation_rank(shape, self.config.rho)
            if rank < 1:
                raise ModuleMismatch(f"rank ratio {self.config.rho} gives rank 0 for shape {shape}", name)
            self.registries[name] = ExpertRegistry(name, rank, shape)
            self.pools.setdefault(self._pool_key(name), self._new_pool())

    def threshold_for(self, module: str) -> float:
        return adaptive_threshold(self.pools[self._pool_key(module)])

    def _check_deltas(self, deltas: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        picked = {k: np.asarray(v, dtype=np.float64) for k, v in deltas.items() if self._is_target(k)}
        if not self.registries:
            self._init_registries({k: v.shape for k, v in picked.items()})
        for name in ordered_modules(set(self.registries) | set(picked)):
            if name not in picked:
                raise ModuleMismatch("module missing from task update", name)
            if name not in self.registries:
                raise ModuleMismatch("unknown module in task update", name)
            if picked[name].shape != tuple(self.registries[name].shape):
                raise ModuleMismatch(
                    f"shape {picked[name].shape} differs from {tuple(self.registries[name].shape)}", name
                )
        return picked

    def evolve_step(self, task_id: int, deltas: Mapping[str, np.ndarray]) -> EvolutionReport:
        """Absorb one task's per-module updates.

        Thresholds are frozen from earlier steps before any module is
        processed, and this step's max affinities join the pool only
        afterwards, so module order inside a step cannot matter.
        """
        if isinstance(task_id, bool) or not isinstance(task_id, (int, np.integer)) or task_id < 1:
            raise ValidationError(f"task id must be a positive integer, got {task_id!r}")
        task_id = int(task_id)
        if task_id in self.task_ids:
            raise ValidationError(f"task {task_id} was already merged")
        picked = self._check_deltas(deltas)
        frozen = {key: adaptive_threshold(pool) for key, pool in self.pools.items()}

        decisions: dict[str, Decision] = {}
        pending: list[tuple[str, float]] = []
        for name in ordered_modules(self.registries):
            reg = self.registries[name]
            gamma = frozen[self._pool_key(name)]
            try:
                cand = truncated_svd(picked[name], rank=reg.rank, tasks={task_id})
            except ZeroUpdate:
                decisions[name] = Decision(task_id, SKIPPED_ZERO, threshold=gamma)
                continue
            if not reg.experts:
                reg.experts.append(cand)
                decisions[name] = Decision(task_id, CREATED, len(reg.experts) - 1, None, gamma)
                continue
            k, best = argmax_affinity(reg, cand)
            pending.append((self._pool_key(name), best))
            if best >= gamma:
                reg.experts[k] = subspace_merge(reg.experts[k], cand, self.config.rank_rtol)
                decisions[name] = Decision(task_id, CONSOLIDATED, k, best, gamma)
            else:
                reg.experts.append(cand)
                decisions[name] = Decision(task_id, CREATED, len(reg.experts) - 1, best, gamma)

        for name, d in decisions.items():
            self.registries[name].decision_log.append(d)
        for key, score in pending:
            self.pools[key].add(score)
        self.task_ids.append(task_id)
        self.step += 1
        report = EvolutionReport(task_id, self.step, decisions)
        log.info("step %d (task %d): %s", self.step, task_id, report.counts())
        return report

    def freeze(self) -> ExpertStore:
        """Immutable snapshot of the current expert sets; modules without experts are left out."""
        if self.step == 0:
            raise ValidationError("no task has been merged yet")
        modules = {}
        skipped = []
        for name in ordered_modules(self.registries):
            reg = self.registries[name]
            if reg.experts:
                modules[name] = reg.copy()
            else:
                skipped.append(name)
        if skipped:
            log.warning("modules without any expert (all updates zero): %s", ", ".join(skipped))
        return ExpertStore(modules, self.config, tuple(self.task_ids), self.backbone_ref, tuple(skipped))


def evolve(task_deltas: Iterable[Mapping[str, np.ndarray]], config: EvolutionConfig | None = None,
           **kwargs) -> tuple[EvolutionEngine, list[EvolutionReport]]:
    """Run a whole stream with task ids 1..T in arrival order."""
    engine = EvolutionEngine(config, **kwargs)
    reports = [engine.evolve_step(t, deltas) for t, deltas in enumerate(task_deltas, start=1)]
    return engine, reports
