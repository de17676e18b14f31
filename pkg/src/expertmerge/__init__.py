"""Continual merging of task checkpoints into low-rank subspace experts, with data-free routing."""

__version__ = "0.1.0"

from .archive import diff_modules, read_archive, write_archive
from .backbone import BackboneSpec, RoutedModel, forward, forward_capture, init_backbone, integrate_and_forward
from .bench import TaskPlan, compute_acc, compute_bwt, generate_stream, run_experiment, task_accuracy
from .evolution import AffinityPool, EvolutionEngine, adaptive_threshold, argmax_affinity, evolve
from .routing import ActivationPath, build_graph, fpa_argmax, fpa_score, route, select_anchor
from .store import EvolutionConfig, ExpertRegistry, ExpertStore, load_store, save_store
from .subspace import (
    ExpertSubspace,
    chordal_distance_sq,
    polar_orthonormalize,
    principal_angle_cosines,
    reconstruct,
    subspace_affinity,
    subspace_merge,
    truncated_svd,
)

__all__ = [
    "diff_modules",
    "read_archive",
    "write_archive",
    "BackboneSpec",
    "RoutedModel",
    "forward",
    "forward_capture",
    "init_backbone",
    "integrate_and_forward",
    "TaskPlan",
    "compute_acc",
    "compute_bwt",
    "generate_stream",
    "run_experiment",
    "task_accuracy",
    "AffinityPool",
    "EvolutionEngine",
    "adaptive_threshold",
    "argmax_affinity",
    "evolve",
    "ActivationPath",
    "build_graph",
    "fpa_argmax",
    "fpa_score",
    "route",
    "select_anchor",
    "EvolutionConfig",
    "ExpertRegistry",
    "ExpertStore",
    "load_store",
    "save_store",
    "ExpertSubspace",
    "chordal_distance_sq",
    "polar_orthonormalize",
    "principal_angle_cosines",
    "reconstruct",
    "subspace_affinity",
    "subspace_merge",
    "truncated_svd",
]
