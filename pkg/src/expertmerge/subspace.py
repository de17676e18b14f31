"""Dense subspace numerics: truncated SVD, polar factors, and subspace affinity.

Experts are stored factored as ``left @ diag(singular_values) @ right.T``
with orthonormal ``left`` (d_o x r) and ``right`` (d_i x r). All
computation is f64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, RankDeficient, RankUnderflow, ValidationError, ZeroUpdate

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-8
CLAMP_SLACK = 1e-9
ZERO_UPDATE_RTOL = 1e-10
RANK_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class ExpertSubspace:
    """A rank-r factored expert plus the ids of the tasks it serves."""

    left: np.ndarray
    right: np.ndarray
    singular_values: np.ndarray
    tasks: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        left = np.asarray(self.left, dtype=np.float64)
        right = np.asarray(self.right, dtype=np.float64)
        sv = np.asarray(self.singular_values, dtype=np.float64).reshape(-1)
        if left.ndim != 2 or right.ndim != 2:
            raise ValidationError("expert bases must be 2-D")
        r = sv.shape[0]
        if left.shape[1] != r or right.shape[1] != r or r < 1:
            raise ValidationError(
                f"rank mismatch: left {left.shape}, right {right.shape}, {r} singular values"
            )
        if np.any(sv < 0) or np.any(np.diff(sv) > 0):
            raise ValidationError("singular values must be non-negative and non-increasing")
        check_orthonormal(left)
        check_orthonormal(right)
        for arr in (left, right, sv):
            arr.setflags(write=False)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "singular_values", sv)
        object.__setattr__(self, "tasks", frozenset(int(t) for t in self.tasks))

    @property
    def rank(self) -> int:
        return self.singular_values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[0]

    def with_tasks(self, tasks) -> "ExpertSubspace":
        return ExpertSubspace(self.left, self.right, self.singular_values, frozenset(tasks))

    def __eq__(self, other):
        if not isinstance(other, ExpertSubspace):
            return NotImplemented
        return (
            self.tasks == other.tasks
            and np.array_equal(self.left, other.left)
            and np.array_equal(self.right, other.right)
            and np.array_equal(self.singular_values, other.singular_values)
        )

    __hash__ = None


def orthonormality_error(basis: np.ndarray) -> float:
    basis = np.asarray(basis, dtype=np.float64)
    return float(np.linalg.norm(basis.T @ basis - np.eye(basis.shape[1])))


def check_orthonormal(basis: np.ndarray, tol: float = ORTHO_TOL) -> None:
    if basis.ndim != 2 or not 1 <= basis.shape[1] <= basis.shape[0]:
        raise ValidationError(f"basis must be d x r with 1 <= r <= d, got {basis.shape}")
    err = orthonormality_error(basis)
    if err > tol:
        raise ValidationError(f"basis is not orthonormal (|B^T B - I|_F = {err:.3e})")


def truncation_rank(shape: tuple[int, int], rho: float) -> int:
    """``floor(rho * min(d_o, d_i))``, robust to the float error in ``rho * m``."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rank ratio must lie in (0, 1], got {rho}")
    m = min(shape)
    return int(math.floor(rho * m + 1e-9))


def _fix_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of every left vector made positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def truncated_svd(delta: np.ndarray, rho: float | None = None, *, rank: int | None = None,
                  tasks=()) -> ExpertSubspace:
    """Best rank-r approximation of ``delta`` as an expert.

    ``r`` comes from ``rho`` unless ``rank`` is given explicitly.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 2:
        raise ValidationError(f"weight update must be 2-D, got shape {delta.shape}")
    d_o, d_i = delta.shape
    if rank is None:
        if rho is None:
            raise ValueError("either rho or rank is required")
        rank = truncation_rank(delta.shape, rho)
    if rank < 1:
        raise RankUnderflow(f"truncation rank is 0 for shape {delta.shape} and rho={rho}")
    if rank > min(d_o, d_i):
        raise ValueError(f"rank {rank} exceeds min{delta.shape}")
    if np.linalg.norm(delta) <= ZERO_UPDATE_RTOL * math.sqrt(d_o * d_i):
        raise ZeroUpdate("weight update is numerically zero")

    u, s, vt = np.linalg.svd(delta, full_matrices=False)
    if rank < s.shape[0] and s[rank - 1] == s[rank]:
        log.warning("singular value tie at truncation boundary (rank %d, sigma=%g)", rank, s[rank])
    left, right = _fix_signs(u[:, :rank], vt[:rank].T)
    return ExpertSubspace(left, right, s[:rank], frozenset(tasks))


def reconstruct(expert: ExpertSubspace) -> np.ndarray:
    return (expert.left * expert.singular_values) @ expert.right.T


def clamp_unit(value: float, what: str = "value") -> float:
    """Clamp to [0, 1]; values within the slack of a bound snap onto it.

    Excursions beyond the slack mean a broken invariant upstream and raise.
    """
    if value < -CLAMP_SLACK or value > 1.0 + CLAMP_SLACK:
        raise NumericalError(f"{what} {value!r} outside [0, 1] beyond slack {CLAMP_SLACK}")
    if value <= CLAMP_SLACK:
        return 0.0
    if value >= 1.0 - CLAMP_SLACK:
        return 1.0
    return float(value)


def _check_pair(s1: np.ndarray, s2: np.ndarray) -> None:
    if s1.ndim != 2 or s2.ndim != 2:
        raise ValidationError("bases must be 2-D")
    if s1.shape[0] != s2.shape[0]:
        raise ValidationError(f"ambient dimension mismatch: {s1.shape[0]} vs {s2.shape[0]}")
    if s1.shape[1] != s2.shape[1]:
        raise ValidationError(f"rank mismatch: {s1.shape[1]} vs {s2.shape[1]}")


def _overlap(s1: np.ndarray, s2: np.ndarray) -> float:
    # ||s1^T s2||_F^2 evaluated in both orders so that swapping arguments is bit-identical
    a = float(np.sum(np.square(s1.T @ s2)))
    b = float(np.sum(np.square(s2.T @ s1)))
    return 0.5 * (a + b)


def projection_affinity(s1: np.ndarray, s2: np.ndarray) -> float:
    """Single-sided affinity ``||s1^T s2||_F^2 / r`` of two orthonormal bases."""
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    _check_pair(s1, s2)
    return clamp_unit(_overlap(s1, s2) / s1.shape[1], "subspace affinity")


def subspace_affinity(a: ExpertSubspace, b: ExpertSubspace) -> float:
    """Mean squared principal-angle cosine over output and input subspaces, in [0, 1]."""
    _check_pair(a.left, b.left)
    _check_pair(a.right, b.right)
    total = _overlap(a.left, b.left) + _overlap(a.right, b.right)
    return clamp_unit(total / (2 * a.rank), "subspace affinity")


def principal_angle_cosines(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    _check_pair(s1, s2)
    cos = np.linalg.svd(s1.T @ s2, compute_uv=False)
    if cos.size and (cos[0] > 1.0 + CLAMP_SLACK or cos[-1] < -CLAMP_SLACK):
        raise NumericalError(f"principal cosine outside [0, 1]: {cos[0]!r}")
    return np.clip(cos, 0.0, 1.0)


def chordal_distance_sq(s1: np.ndarray, s2: np.ndarray) -> float:
    """``0.5 * ||P1 - P2||_F^2`` with the dense d x d projectors."""
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    _check_pair(s1, s2)
    diff = s1 @ s1.T - s2 @ s2.T
    return 0.5 * float(np.sum(diff * diff))


def polar_orthonormalize(x: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthogonal factor ``W`` of the polar decomposition ``x = W H``.

    Raises RankDeficient when the smallest singular value of ``x`` falls
    below ``rtol`` (default ``1e-10``) times the largest.
    """
    x = np.asarray(x, dtype=np.float64)
    d, k = x.shape
    if k > d:
        raise ValidationError(f"polar factor needs k <= d, got {x.shape}")
    p, s, qt = np.linalg.svd(x, full_matrices=False)
    smax = s[0] if s.size else 0.0
    deficient = int(np.sum(s < rtol * smax)) if smax > 0 else k
    if deficient:
        raise RankDeficient(f"matrix of shape {x.shape} is rank deficient by {deficient}", deficient)
    return p @ qt


def _partial_isometry(x: np.ndarray, rtol: float) -> tuple[np.ndarray, np.ndarray]:
    """Factors ``(P, Q)`` of the partial-isometry polar factor ``P @ Q.T`` of a rank-deficient ``x``."""
    p, s, qt = np.linalg.svd(x, full_matrices=False)
    keep = int(np.sum(s >= rtol * s[0])) if s.size and s[0] > 0 else 0
    return p[:, :keep], qt[:keep].T


def _orthonormal_factors(x: np.ndarray, rtol: float) -> tuple[np.ndarray, np.ndarray]:
    try:
        w = polar_orthonormalize(x, rtol)
        return w, np.eye(x.shape[1])
    except RankDeficient as exc:
        log.debug("polar step fell back to partial isometry: %s", exc)
        return _partial_isometry(x, rtol)


def subspace_merge(keep: ExpertSubspace, incoming: ExpertSubspace, rank_rtol: float = RANK_RTOL) -> ExpertSubspace:
    """Consolidate ``incoming`` into ``keep``; the result keeps rank r and serves both task sets.

    Bases are concatenated (incoming first), orthonormalized through their
    polar factors, and the top-r singular triples of
    ``U_hat @ blockdiag(sigma) @ V_hat.T`` are taken. The product is
    never formed densely: the SVD runs on the small core
    ``Q_u.T @ blockdiag(sigma) @ Q_v``.

    If a concatenation is rank deficient (relative to ``rank_rtol``) its
    polar factor is not unique. The partial isometry on its range is used
    instead, so identical experts merge back into themselves.
    """
    if keep.shape != incoming.shape:
        raise ValidationError(f"ambient dimension mismatch: {keep.shape} vs {incoming.shape}")
    if keep.rank != incoming.rank:
        raise ValidationError(f"rank mismatch: {keep.rank} vs {incoming.rank}")
    r = keep.rank
    u_cat = np.hstack([incoming.left, keep.left])
    v_cat = np.hstack([incoming.right, keep.right])
    sigma = np.concatenate([incoming.singular_values, keep.singular_values])

    pu, qu = _orthonormal_factors(u_cat, rank_rtol)
    pv, qv = _orthonormal_factors(v_cat, rank_rtol)
    core = (qu.T * sigma) @ qv
    a, s, bt = np.linalg.svd(core, full_matrices=False)
    if s.shape[0] < r:
        raise NumericalError(f"merged core has rank {s.shape[0]} < {r}")
    left, right = _fix_signs(pu @ a[:, :r], pv @ bt[:r].T)
    return ExpertSubspace(left, right, s[:r], keep.tasks | incoming.tasks)
