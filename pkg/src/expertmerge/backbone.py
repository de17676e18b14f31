"""A small bias-free tanh network standing in for a pre-trained model.

Modules run as one chain in module order: ``h_next = tanh(W_c @ h_c)``.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .archive import KIND_ORDER, ordered_modules
from .errors import ModuleMismatch, ValidationError
from .routing import ActivationPath, build_graph, route
from .store import ExpertStore
from .subspace import reconstruct


@dataclass(frozen=True)
class BackboneSpec:
    layers: int = 3
    width: int = 32
    kinds: tuple[str, ...] = ("attn.o", "mlp.fc1")
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.width < 4:
            raise ValueError(f"width must be >= 4, got {self.width}")
        if not self.kinds or len(set(self.kinds)) != len(self.kinds):
            raise ValueError(f"kinds must be non-empty and unique, got {self.kinds}")
        bad = [k for k in self.kinds if k not in KIND_ORDER]
        if bad:
            raise ValueError(f"unknown module kinds {bad}; expected a subset of {KIND_ORDER}")
        object.__setattr__(self, "kinds", tuple(sorted(self.kinds, key=KIND_ORDER.index)))

    def module_names(self) -> list[str]:
        return [f"layer.{i}.{k}" for i in range(self.layers) for k in self.kinds]


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def init_backbone(spec: BackboneSpec) -> dict[str, np.ndarray]:
    """Haar-random orthogonal weights (entries of size ~1/sqrt(d)), one per module."""
    rng = np.random.default_rng(spec.seed)
    return {name: random_orthogonal(spec.width, rng) for name in spec.module_names()}


def _chain(weights: Mapping[str, np.ndarray], x: np.ndarray,
           patches: Mapping[str, np.ndarray] | None = None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    h = np.asarray(x, dtype=np.float64)
    trace = {}
    for name in ordered_modules(weights):
        w = np.asarray(weights[name], dtype=np.float64)
        if h.shape[-1] != w.shape[1]:
            raise ValidationError(f"input has length {h.shape[-1]}, module expects {w.shape[1]}")
        trace[name] = h
        if patches is not None and name in patches:
            w = w + patches[name]
        h = np.tanh(h @ w.T)
    return h, trace


def forward(weights: Mapping[str, np.ndarray], x: np.ndarray,
            patches: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Network output for ``x`` (a vector, or a batch with one vector per row)."""
    return _chain(weights, x, patches)[0]


def forward_capture(backbone: Mapping[str, np.ndarray], x: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Output plus every module's input.

    For a sequence (one position per row) the captured features are the
    mean over positions; the output keeps one row per position.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ValidationError(f"input must be a vector or a sequence of vectors, got shape {x.shape}")
    out, trace = _chain(backbone, x)
    if x.ndim == 2:
        trace = {k: v.mean(axis=0) for k, v in trace.items()}
    return out, trace


def expert_patches(path: ActivationPath, store: ExpertStore) -> dict[str, np.ndarray]:
    extra = set(path.selections) - set(store.modules)
    if extra:
        raise ModuleMismatch("path selects a module absent from the store", sorted(extra)[0])
    patches = {}
    for name in store.module_order():
        if name not in path.selections:
            raise ModuleMismatch("path has no selection for store module", name)
        patches[name] = reconstruct(store.modules[name].experts[path.selections[name]])
    return patches


def integrate_and_forward(backbone: Mapping[str, np.ndarray], path: ActivationPath,
                          store: ExpertStore, x: np.ndarray) -> np.ndarray:
    """Forward pass with each selected expert added onto its module's weight."""
    patches = expert_patches(path, store)
    missing = set(patches) - set(backbone)
    if missing:
        raise ModuleMismatch("store module absent from backbone", sorted(missing)[0])
    return forward(backbone, x, patches)


class RoutedModel:
    """Backbone plus expert store: routes each input, then runs the patched network.

    Reconstructed expert weights are cached per ``(module, expert id)``.
    """

    def __init__(self, backbone: Mapping[str, np.ndarray], store: ExpertStore, validate: bool = True):
        self.backbone = backbone
        self.store = store
        self.graph = build_graph(store, validate=validate)
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def route(self, x: np.ndarray) -> ActivationPath:
        _, trace = forward_capture(self.backbone, x)
        return route(self.store, self.graph, {m: trace[m] for m in self.graph.modules})

    def _patch(self, module: str, k: int) -> np.ndarray:
        key = (module, k)
        if key not in self._cache:
            self._cache[key] = reconstruct(self.store.modules[module].experts[k])
        return self._cache[key]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        path = self.route(x)
        patches = {m: self._patch(m, k) for m, k in path.selections.items()}
        return forward(self.backbone, x, patches)
