"""Expert registries, frozen expert stores, and their on-disk layout.

A store directory holds ``registry.json`` (ranks, task sets, singular
values, decision logs) and an ``experts/`` tensor archive with the bases
under ``expert.<module>.<id>.left`` / ``.right``. Bases are archived as
f64 so that a reloaded store is identical to the one that was saved.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .archive import encode_archive, module_sort_key, ordered_modules, read_archive, write_encoded
from .errors import ArchiveError, ValidationError
from .subspace import ExpertSubspace

REGISTRY = "registry.json"
EXPERTS_DIR = "experts"
STORE_FORMAT = 1

CREATED = "created"
CONSOLIDATED = "consolidated"
SKIPPED_ZERO = "skipped-zero"


@dataclass(frozen=True)
class EvolutionConfig:
    rho: float = 0.1
    beta: float = 1.0
    gamma0: float = 0.6
    pool_min: int = 8
    pool_scope: str = "global"  # or "module"
    rank_rtol: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0.0 <= self.gamma0 <= 1.0:
            raise ValueError(f"gamma0 must lie in [0, 1], got {self.gamma0}")
        if self.pool_min < 1:
            raise ValueError(f"pool_min must be >= 1, got {self.pool_min}")
        if not 0.0 < self.rank_rtol < 1.0:
            raise ValueError(f"rank_rtol must lie in (0, 1), got {self.rank_rtol}")
        if self.pool_scope not in ("global", "module"):
            raise ValueError(f"pool_scope must be 'global' or 'module', got {self.pool_scope!r}")


@dataclass(frozen=True)
class Decision:
    task_id: int
    action: str
    expert: int | None = None
    affinity: float | None = None
    threshold: float | None = None

    def describe(self) -> str:
        if self.action == CREATED:
            text = f"created expert {self.expert}"
        elif self.action == CONSOLIDATED:
            text = f"consolidated into expert {self.expert}"
        else:
            return SKIPPED_ZERO
        if self.affinity is not None:
            text += f" (max affinity {self.affinity:.4f}, threshold {self.threshold:.4f})"
        return text


@dataclass
class ExpertRegistry:
    """The evolving expert population of one module."""

    module_name: str
    rank: int
    shape: tuple[int, int]
    experts: list[ExpertSubspace] = field(default_factory=list)
    decision_log: list[Decision] = field(default_factory=list)

    def covered_tasks(self) -> set[int]:
        out: set[int] = set()
        for e in self.experts:
            out |= e.tasks
        return out

    def copy(self) -> "ExpertRegistry":
        return ExpertRegistry(self.module_name, self.rank, tuple(self.shape),
                              list(self.experts), list(self.decision_log))


@dataclass(frozen=True)
class ExpertStore:
    """Immutable snapshot of every module's expert set after some merge step."""

    modules: dict[str, ExpertRegistry]
    config: EvolutionConfig
    task_ids: tuple[int, ...]
    backbone_ref: str | None = None
    skipped: tuple[str, ...] = ()

    def module_order(self) -> list[str]:
        return ordered_modules(self.modules)

    def expert_counts(self) -> dict[str, int]:
        return {name: len(self.modules[name].experts) for name in self.module_order()}

    def content_hash(self) -> str:
        registry, manifest, blob = _encode_store(self)
        h = hashlib.sha256()
        for part in (registry, manifest, blob):
            h.update(len(part).to_bytes(8, "little"))
            h.update(part)
        return h.hexdigest()


def _encode_store(store: ExpertStore) -> tuple[bytes, bytes, bytes]:
    modules = {}
    tensors = []
    for name in store.module_order():
        reg = store.modules[name]
        experts = []
        for i, e in enumerate(reg.experts):
            experts.append({
                "id": i,
                "tasks": sorted(e.tasks),
                "singular_values": [float(s) for s in e.singular_values],
            })
            tensors.append((f"expert.{name}.{i}.left", e.left))
            tensors.append((f"expert.{name}.{i}.right", e.right))
        modules[name] = {
            "rank": reg.rank,
            "shape": list(reg.shape),
            "experts": experts,
            "decision_log": [asdict(d) for d in reg.decision_log],
        }
    doc = {
        "format": STORE_FORMAT,
        "backbone_ref": store.backbone_ref,
        "config": asdict(store.config),
        "task_ids": list(store.task_ids),
        "skipped": list(store.skipped),
        "modules": modules,
    }
    registry = (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8")
    manifest, blob = encode_archive(tensors, dtype="f64")
    return registry, manifest, blob


def save_store(store: ExpertStore, path) -> str:
    """Write ``store`` to directory ``path``; returns its content hash."""
    registry, manifest, blob = _encode_store(store)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_encoded(manifest, blob, path / EXPERTS_DIR)
    tmp = path / (REGISTRY + ".tmp")
    tmp.write_bytes(registry)
    tmp.replace(path / REGISTRY)
    return store.content_hash()


def load_store(path) -> ExpertStore:
    path = Path(path)
    try:
        doc = json.loads((path / REGISTRY).read_text("utf-8"))
    except FileNotFoundError as exc:
        raise ValidationError(f"no {REGISTRY} in {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"unreadable {REGISTRY} in {path}: {exc}") from exc
    if doc.get("format") != STORE_FORMAT:
        raise ValidationError(f"unsupported store format {doc.get('format')!r}")
    tensors = read_archive(path / EXPERTS_DIR, promote=True)
    modules = {}
    try:
        for name, m in doc["modules"].items():
            experts = []
            for entry in m["experts"]:
                i = entry["id"]
                key = f"expert.{name}.{i}"
                if f"{key}.left" not in tensors or f"{key}.right" not in tensors:
                    raise ArchiveError("expert bases missing from archive", key)
                experts.append(ExpertSubspace(tensors[f"{key}.left"], tensors[f"{key}.right"],
                                              np.asarray(entry["singular_values"]),
                                              frozenset(entry["tasks"])))
            log = [Decision(**d) for d in m["decision_log"]]
            modules[name] = ExpertRegistry(name, int(m["rank"]), tuple(m["shape"]), experts, log)
        store = ExpertStore(
            modules={k: modules[k] for k in sorted(modules, key=module_sort_key)},
            config=EvolutionConfig(**doc["config"]),
            task_ids=tuple(doc["task_ids"]),
            backbone_ref=doc.get("backbone_ref"),
            skipped=tuple(doc.get("skipped", ())),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed {REGISTRY}: {exc!r}") from exc
    validate_store(store)
    return store


def validate_store(store: ExpertStore) -> None:
    """Check the structural invariants a frozen store must satisfy."""
    for name, reg in store.modules.items():
        if not reg.experts:
            raise ValidationError("module has no experts", name)
        seen: set[int] = set()
        for e in reg.experts:
            if not e.tasks or any(t < 1 for t in e.tasks):
                raise ValidationError("expert task set must be non-empty positive ids", name)
            if e.rank != reg.rank:
                raise ValidationError(f"expert rank {e.rank} differs from module rank {reg.rank}", name)
            if e.shape != tuple(reg.shape):
                raise ValidationError(f"expert shape {e.shape} differs from module shape", name)
            if seen & e.tasks:
                raise ValidationError(f"task ids {sorted(seen & e.tasks)} shared by two experts", name)
            seen |= e.tasks
