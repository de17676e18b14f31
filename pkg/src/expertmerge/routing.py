"""Data-free expert activation.

Each module's feature (its input under the pre-trained backbone) is scored
against every expert's input subspace. Selection starts at the module with
the most experts and spreads outward along the module chain. A running
set of task ids keeps the chosen experts consistent with one another.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .archive import module_sort_key
from .errors import ValidationError
from .store import SKIPPED_ZERO, ExpertStore
from .subspace import CLAMP_SLACK, ExpertSubspace

FPA_ZERO_RTOL = 1e-12


class ZeroFeature(ValidationError):
    """A routing feature vector has zero norm."""


def fpa_score(h: np.ndarray, expert: ExpertSubspace) -> float:
    """Cosine between ``h`` and its projection onto the expert's input subspace."""
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    basis = expert.right
    if h.shape[0] != basis.shape[0]:
        raise ValidationError(f"feature has length {h.shape[0]}, expert expects {basis.shape[0]}")
    norm_h = float(np.linalg.norm(h))
    if norm_h == 0.0:
        raise ZeroFeature("zero feature vector")
    proj = basis @ (basis.T @ h)
    norm_p = float(np.linalg.norm(proj))
    if norm_p <= FPA_ZERO_RTOL * norm_h:
        return 0.0
    cos = float(h @ proj) / (norm_h * norm_p)
    if cos > 1.0 + CLAMP_SLACK or cos < -CLAMP_SLACK:
        raise ValidationError(f"projection cosine {cos!r} outside [0, 1]")
    return min(max(cos, 0.0), 1.0)


def fpa_argmax(candidates: Sequence[tuple[int, ExpertSubspace]] | Sequence[ExpertSubspace],
               h: np.ndarray) -> tuple[int, float]:
    """Best-aligned candidate as ``(id, score)``; the smallest id wins exact ties.

    Candidates are ``(id, expert)`` pairs, or bare experts identified by position.
    """
    items = [c if isinstance(c, tuple) else (i, c) for i, c in enumerate(candidates)]
    if not items:
        raise ValidationError("no candidate experts")
    best_id, best = None, -1.0
    for eid, expert in sorted(items, key=lambda c: c[0]):
        score = fpa_score(h, expert)
        if score > best:
            best_id, best = eid, score
    return best_id, best


@dataclass(frozen=True)
class DependencyGraph:
    modules: tuple[str, ...]
    nodes: tuple[tuple[str, int], ...]
    edges: frozenset

    def successors(self, node: tuple[str, int]) -> list[tuple[str, int]]:
        return sorted((b for a, b in self.edges if a == node), key=lambda n: (module_sort_key(n[0]), n[1]))


def expected_tasks(store: ExpertStore, module: str) -> set[int]:
    skipped = {d.task_id for d in store.modules[module].decision_log if d.action == SKIPPED_ZERO}
    return set(store.task_ids) - skipped


def build_graph(store: ExpertStore, validate: bool = True) -> DependencyGraph:
    """Experts as nodes; edges join experts of adjacent modules whose task sets intersect."""
    modules = tuple(store.module_order())
    if validate:
        for name in modules:
            covered = store.modules[name].covered_tasks()
            want = expected_tasks(store, name)
            if covered != want:
                raise ValidationError(
                    f"experts cover tasks {sorted(covered)} but tasks {sorted(want)} were merged", name
                )
    nodes = tuple((m, k) for m in modules for k in range(len(store.modules[m].experts)))
    edges = set()
    for a, b in zip(modules, modules[1:]):
        for k, ea in enumerate(store.modules[a].experts):
            for j, eb in enumerate(store.modules[b].experts):
                if ea.tasks & eb.tasks:
                    edges.add(((a, k), (b, j)))
    return DependencyGraph(modules, nodes, frozenset(edges))


def select_anchor(store: ExpertStore) -> str:
    """Module with the most experts; ties go to the deepest such module."""
    order = store.module_order()
    if not order:
        raise ValidationError("store has no modules")
    best = order[0]
    for name in order[1:]:
        if len(store.modules[name].experts) >= len(store.modules[best].experts):
            best = name
    return best


def outward_order(modules: Sequence[str], anchor: str) -> list[str]:
    """anchor-1, anchor+1, anchor-2, ... so every step touches a decided neighbour."""
    i = list(modules).index(anchor)
    out = []
    for step in range(1, len(modules)):
        for j in (i - step, i + step):
            if 0 <= j < len(modules):
                out.append(modules[j])
    return out


@dataclass
class ActivationPath:
    selections: dict[str, int]
    active_tasks: frozenset
    anchor: str
    consistent: bool = True
    fpa_scores: dict[str, dict[int, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "selections": dict(self.selections),
            "active_tasks": sorted(self.active_tasks),
            "anchor": self.anchor,
            "consistent": self.consistent,
            "scores": {m: {str(k): v for k, v in s.items()} for m, s in self.fpa_scores.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def route(store: ExpertStore, graph: DependencyGraph, features: Mapping[str, np.ndarray]) -> ActivationPath:
    """Pick one expert per module for a single query.

    ``features`` maps every store module to its backbone input vector.
    When no expert at a module agrees with the active task set (only
    possible for hand-assembled stores) the best-aligned expert is taken
    there, the task set is left alone, and the path is flagged
    inconsistent.
    """
    modules = list(graph.modules)
    missing = [m for m in modules if m not in features]
    if missing:
        raise ValidationError("no feature for module", missing[0])

    scores: dict[str, dict[int, float]] = {}
    for m in modules:
        scores[m] = {k: fpa_score(features[m], e) for k, e in enumerate(store.modules[m].experts)}

    def best_of(module: str, ids) -> int:
        # first (smallest) id attaining the max
        return max(sorted(ids), key=lambda k: (scores[module][k], -k))

    anchor = select_anchor(store)
    chosen = best_of(anchor, scores[anchor])
    active = frozenset(store.modules[anchor].experts[chosen].tasks)
    selections = {anchor: chosen}
    consistent = True
    for m in outward_order(modules, anchor):
        experts = store.modules[m].experts
        allowed = [k for k, e in enumerate(experts) if e.tasks & active]
        if not allowed:
            selections[m] = best_of(m, scores[m])
            consistent = False
            continue
        pick = allowed[0] if len(allowed) == 1 else best_of(m, allowed)
        selections[m] = pick
        active = active & experts[pick].tasks

    ordered = {m: selections[m] for m in modules}
    return ActivationPath(ordered, active, anchor, consistent, scores)


def path_is_valid(path: ActivationPath, graph: DependencyGraph) -> bool:
    """Every adjacent pair of selected experts is joined by a dependency edge."""
    mods = graph.modules
    return all(((a, path.selections[a]), (b, path.selections[b])) in graph.edges
               for a, b in zip(mods, mods[1:]))
