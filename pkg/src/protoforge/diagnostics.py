"""Numerical verification of the probabilistic reading of the penalty.

Covers the isotropic-Gaussian negative log-likelihood, its equivalence with
cosine-argmax assignment on the unit sphere, the within/total/between scatter
decomposition, the affine link between the between-cluster term and the
off-diagonal Gram sum, and the prototype-geometry metrics (displacement,
intra-class cosine dispersion, max off-diagonal Gram).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corelinalg import EmbeddingMatrix, gram
from .errors import EmptyAssignment, IdentityViolation, NotNormalized, ShapeMismatch

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class AssignmentMatrix:
    """K x N one-hot assignments; every sample belongs to exactly one class."""

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.ndim != 2:
            raise ShapeMismatch("assignment matrix must be 2-d (K x N)")
        if not np.all((u == 0.0) | (u == 1.0)):
            raise ShapeMismatch("assignments must be binary")
        col = u.sum(axis=0)
        if not np.all(col == 1.0):
            bad = int(np.argmax(col != 1.0))
            raise EmptyAssignment(
                f"sample {bad} is assigned to {col[bad]:.0f} classes, expected 1"
            )
        u = u.copy()
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @classmethod
    def from_labels(cls, labels: Sequence[int], k: int) -> "AssignmentMatrix":
        labels = np.asarray(labels, dtype=np.intp)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ShapeMismatch("labels out of range")
        u = np.zeros((k, labels.size))
        u[labels, np.arange(labels.size)] = 1.0
        return cls(u)

    @property
    def k(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.u.shape[1]

    def labels(self) -> np.ndarray:
        return np.argmax(self.u, axis=0)


@dataclass(frozen=True)
class ScatterReport:
    """Within/total/between scatter; within = total - between must hold."""

    within: float
    total: float
    between: float
    global_mean: np.ndarray
    class_counts: np.ndarray
    class_means: np.ndarray
    empty_classes: tuple[int, ...] = ()

    def __post_init__(self):
        resid = abs(self.within - (self.total - self.between))
        if resid > 1e-9 * max(self.total, 1.0):
            raise IdentityViolation(
                f"scatter decomposition residual {resid:.3e} exceeds tolerance"
            )

    @property
    def residual(self) -> float:
        return abs(self.within - (self.total - self.between))


def gaussian_nll(
    features: EmbeddingMatrix, u: AssignmentMatrix, centers: EmbeddingMatrix
) -> float:
    """Negative log-likelihood under per-class unit-covariance Gaussians.

    0.5 * sum_ik u_ik ||f_i - x_k||^2 plus the N * (d/2) * log(2pi) constant.
    """
    f = features.data
    c = centers.data
    if u.n != f.shape[0] or u.k != c.shape[0] or f.shape[1] != c.shape[1]:
        raise ShapeMismatch(
            f"features {f.shape}, centers {c.shape}, assignments {u.u.shape}"
        )
    labels = u.labels()
    diff = f - c[labels]
    quad = 0.5 * float(np.sum(diff * diff))
    n, d = f.shape
    return quad + n * (d / 2.0) * LOG_2PI


def cosine_assign(
    features: EmbeddingMatrix, prototypes: EmbeddingMatrix
) -> AssignmentMatrix:
    """Assign each sample to the prototype with the largest cosine similarity.

    Requires unit rows on both sides; ties break toward the lowest class
    index, which makes the assignment identical to Euclidean argmin on the
    sphere.
    """
    if not features.unit_rows:
        raise NotNormalized("features must carry the unit_rows flag")
    if not prototypes.unit_rows:
        raise NotNormalized("prototypes must carry the unit_rows flag")
    if features.cols != prototypes.cols:
        raise ShapeMismatch(
            f"feature dim {features.cols} != prototype dim {prototypes.cols}"
        )
    scores = features.data @ prototypes.data.T
    labels = np.argmax(scores, axis=1)  # first max wins: lowest index on ties
    return AssignmentMatrix.from_labels(labels, prototypes.rows)


def huygens(features: EmbeddingMatrix, u: AssignmentMatrix) -> ScatterReport:
    """Within/total/between scatter with class centers at within-class means.

    Empty classes contribute zero to both within and between and are listed in
    the report.  The decomposition identity is asserted at construction.
    """
    f = features.data
    if u.n != f.shape[0]:
        raise ShapeMismatch(f"{u.n} assignments vs {f.shape[0]} feature rows")
    counts = u.u.sum(axis=1)
    labels = u.labels()
    k = u.k
    global_mean = f.mean(axis=0)

    class_means = np.zeros((k, f.shape[1]))
    empty = []
    for c in range(k):
        members = f[labels == c]
        if members.shape[0] == 0:
            empty.append(c)
        else:
            class_means[c] = members.mean(axis=0)

    diff_w = f - class_means[labels]
    within = float(np.sum(diff_w * diff_w))
    diff_t = f - global_mean
    total = float(np.sum(diff_t * diff_t))
    diff_b = class_means - global_mean
    between = float(np.sum(counts[:, None] * diff_b * diff_b))

    return ScatterReport(
        within=within,
        total=total,
        between=between,
        global_mean=global_mean,
        class_counts=counts,
        class_means=class_means,
        empty_classes=tuple(empty),
    )


def between_vs_offdiag(
    prototypes: EmbeddingMatrix, counts: Sequence[float]
) -> tuple[float, float]:
    """Both sides of the between-scatter / off-diagonal-Gram identity.

    With unit-row prototypes x_k, counts N_k and weighted mean
    fbar = sum_k N_k x_k / N:

        sum_k N_k ||x_k - fbar||^2  +  sum_{k != k'} (N_k N_k' / N) x_k.x_k'
            = N - sum_k N_k^2 / N

    Returns (between_term, weighted_offdiag).  The identity is asserted to
    1e-9 before returning, so a violation surfaces as an error rather than a
    silently wrong pair of numbers.
    """
    if not prototypes.unit_rows:
        raise NotNormalized("prototypes must carry the unit_rows flag")
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.shape[0] != prototypes.rows:
        raise ShapeMismatch("counts must match the number of prototypes")
    if np.any(counts <= 0):
        raise ShapeMismatch("counts must be positive")
    x = prototypes.data
    n = float(counts.sum())
    fbar = counts @ x / n
    diff = x - fbar
    between = float(np.sum(counts[:, None] * diff * diff))
    g = x @ x.T
    w = np.outer(counts, counts) / n
    weighted_offdiag = float(np.sum(w * g) - np.sum(np.diag(w) * np.diag(g)))
    const = n - float(np.sum(counts * counts)) / n
    resid = abs(between + weighted_offdiag - const)
    if resid > 1e-9 * max(abs(const), 1.0):
        raise IdentityViolation(
            f"between/off-diagonal identity residual {resid:.3e}"
        )
    return between, weighted_offdiag


@dataclass(frozen=True)
class GeometryMetrics:
    """Prototype displacement and class-geometry summary."""

    displacement_mean: float
    displacement_median: float
    dispersion: float
    max_offdiag_gram: float

    def as_dict(self) -> dict:
        return {
            "displacement_mean": self.displacement_mean,
            "displacement_median": self.displacement_median,
            "dispersion": self.dispersion,
            "max_offdiag_gram": self.max_offdiag_gram,
        }


def geometry_metrics(
    x: EmbeddingMatrix,
    v: EmbeddingMatrix,
    features: EmbeddingMatrix,
    labels: Sequence[int],
) -> GeometryMetrics:
    """Displacement of refined vs initial prototypes plus feature-side stats.

    Dispersion is, per class, the mean of (1 - cosine between each unit
    feature and the normalized class feature mean), averaged over classes with
    at least one sample; it is zero iff every class has collapsed onto one
    direction.
    """
    if x.shape != v.shape:
        raise ShapeMismatch(f"x {x.shape} vs v {v.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape[0] != features.rows:
        raise ShapeMismatch("labels length must match feature rows")
    k = x.rows
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeMismatch("labels out of range")

    disp = np.linalg.norm(x.data - v.data, axis=1)
    per_class = []
    f = features.data
    for c in range(k):
        members = f[labels == c]
        if members.shape[0] == 0:
            continue
        mean = members.mean(axis=0)
        nrm = np.linalg.norm(mean)
        if nrm <= 1e-12:
            per_class.append(1.0)
            continue
        per_class.append(float(np.mean(1.0 - members @ (mean / nrm))))
    dispersion = float(np.mean(per_class)) if per_class else 0.0

    g = gram(x).data
    off = np.abs(g - np.diag(np.diag(g)))
    max_off = float(off.max()) if k > 1 else 0.0

    return GeometryMetrics(
        displacement_mean=float(disp.mean()),
        displacement_median=float(np.median(disp)),
        dispersion=dispersion,
        max_offdiag_gram=max_off,
    )
