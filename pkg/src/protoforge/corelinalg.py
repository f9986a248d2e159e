"""Dense float64 matrix primitives used everywhere else.

The central type is :class:`EmbeddingMatrix`, a thin immutable wrapper around a
row-major ``numpy`` array with an optional unit-row marker.  On top of it this
module provides Frobenius norms, Gram products, row normalization and a small
one-sided Jacobi SVD with a fixed sign convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, NonFinite, NotNormalized, ShapeMismatch, ZeroRow

ZERO_ROW_TOL = 1e-12
UNIT_ROW_TOL = 1e-9


def _as_matrix_data(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C", copy=True)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d matrix, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatch(f"matrix dimensions must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFinite(f"non-finite entry at row {bad[0]}, col {bad[1]}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EmbeddingMatrix:
    """A dense K-by-d real matrix; rows are embeddings.

    ``unit_rows`` marks matrices whose rows are unit-norm.  The flag is
    validated at construction time so downstream cosine-based code can trust
    it.
    """

    data: np.ndarray
    unit_rows: bool = False

    def __post_init__(self):
        object.__setattr__(self, "data", _as_matrix_data(self.data))
        if self.unit_rows:
            norms = np.linalg.norm(self.data, axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > UNIT_ROW_TOL:
                raise NotNormalized(
                    f"unit_rows set but a row norm deviates from 1 by {worst:.3e}"
                )

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def matrix(values, unit_rows: bool = False) -> EmbeddingMatrix:
    """Convenience constructor from nested lists or arrays."""
    return EmbeddingMatrix(values, unit_rows=unit_rows)


def frobenius_sq(m: EmbeddingMatrix) -> float:
    """Squared Frobenius norm, sum of squared entries."""
    return float(np.sum(m.data * m.data))


def gram(x: EmbeddingMatrix) -> EmbeddingMatrix:
    """X @ X.T, symmetrized to exact bit equality.

    The upper triangle is computed once and mirrored so tests may assert
    ``G[i, j] == G[j, i]`` bitwise.
    """
    g = x.data @ x.data.T
    low = np.tril_indices(g.shape[0], -1)
    g[low] = g.T[low]
    return EmbeddingMatrix(g)


def normalize_rows(x: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale each row to unit Euclidean norm.

    Raises ZeroRow when any row has norm <= 1e-12; such rows carry no
    direction and normalizing them silently would hide degenerate input.
    """
    norms = np.linalg.norm(x.data, axis=1)
    if np.any(norms <= ZERO_ROW_TOL):
        idx = int(np.argmax(norms <= ZERO_ROW_TOL))
        raise ZeroRow(f"row {idx} has norm {norms[idx]:.3e} <= {ZERO_ROW_TOL}")
    return EmbeddingMatrix(x.data / norms[:, None], unit_rows=True)


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD of a K-by-d matrix (K <= d): V = u @ diag(sigma) @ r.T.

    u is K-by-K orthogonal, sigma is descending and nonnegative with length K,
    r is d-by-K with orthonormal columns.
    """

    u: EmbeddingMatrix
    sigma: np.ndarray
    r: EmbeddingMatrix
    sweeps: int = field(default=0, compare=False)

    def reconstruct(self) -> np.ndarray:
        return (self.u.data * self.sigma) @ self.r.data.T


def _complete_orthonormal(q: np.ndarray, n_needed: int) -> np.ndarray:
    """Append n_needed orthonormal columns to q (d x m, orthonormal columns)."""
    d = q.shape[0]
    cols = [q[:, i] for i in range(q.shape[1])]
    e = 0
    while n_needed > 0:
        if e >= d:
            raise NoConvergence("cannot complete orthonormal basis")
        v = np.zeros(d)
        v[e] = 1.0
        e += 1
        for c in cols:
            v -= (c @ v) * c
        nrm = np.linalg.norm(v)
        if nrm > 1e-8:
            v /= nrm
            cols.append(v)
            n_needed -= 1
    return np.column_stack(cols)


def svd(v: EmbeddingMatrix, max_sweeps: int = 64, tol: float = 1e-13) -> SvdFactors:
    """One-sided Jacobi SVD for the wide regime (rows <= cols).

    Works on A = V.T (d x K) and applies plane rotations to column pairs of A
    until all columns are mutually orthogonal, accumulating the rotations into
    the K x K factor U.  Then sigma_j = ||a_j|| and the columns of R are the
    normalized columns of A.  Deterministic; the sign convention makes the
    first nonzero entry of every column of U nonnegative.
    """
    k, d = v.shape
    if k > d:
        raise ShapeMismatch(f"svd expects rows <= cols, got {k}x{d}")

    a = np.array(v.data.T, order="F")  # d x k, columns get orthogonalized
    u = np.eye(k)

    sweeps = 0
    off = np.inf
    for sweeps in range(1, max_sweeps + 1):
        off = 0.0
        rotated = False
        for p in range(k - 1):
            for q in range(p + 1, k):
                ap = a[:, p]
                aq = a[:, q]
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                gamma = float(ap @ aq)
                if alpha * beta == 0.0:
                    continue
                off = max(off, abs(gamma) / np.sqrt(alpha * beta))
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[:, p] = new_p
                a[:, q] = new_q
                up = u[:, p].copy()
                uq = u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
        if not rotated:
            break
    else:
        raise NoConvergence(
            f"Jacobi SVD did not converge in {max_sweeps} sweeps", residual=off
        )

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    u = u[:, order]

    r = np.zeros((d, k))
    null_cols = []
    for j in range(k):
        if sigma[j] > ZERO_ROW_TOL:
            r[:, j] = a[:, j] / sigma[j]
        else:
            sigma[j] = 0.0
            null_cols.append(j)
    if null_cols:
        base = r[:, [j for j in range(k) if j not in null_cols]]
        completed = _complete_orthonormal(base, len(null_cols))
        extra = completed[:, base.shape[1]:]
        for idx, j in enumerate(null_cols):
            r[:, j] = extra[:, idx]

    # sign convention: first nonzero entry of each U column nonnegative
    for j in range(k):
        col = u[:, j]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0.0:
            u[:, j] = -col
            r[:, j] = -r[:, j]

    return SvdFactors(
        u=EmbeddingMatrix(u),
        sigma=np.asarray(sigma, dtype=np.float64),
        r=EmbeddingMatrix(r),
        sweeps=sweeps,
    )
