"""Fitting the frozen latent projection by PCA over collected features.

A MomentAccumulator streams D-dimensional feature vectors (float64 sums,
so ordering does not matter), finalize() eigendecomposes the population
covariance with a cyclic Jacobi sweep and freezes the top-k directions
into a Projection. The stored mean and basis are quantized to float32
values up front so a checkpoint round trip through the f32 tensor file
format reproduces them bit-identically.
"""

import numpy as np

from .latent import Projection
from .tensor import ShapeError

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


class MomentAccumulator:
    """Running first and second moments of a stream of vectors in R^D."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        self.dim = dim
        self.count = 0
        self.sum = np.zeros(dim, dtype=np.float64)
        self.sum_outer = np.zeros((dim, dim), dtype=np.float64)

    def accumulate(self, feature) -> "MomentAccumulator":
        f = np.asarray(feature, dtype=np.float64)
        if f.shape != (self.dim,):
            raise ShapeError(f"feature shape {f.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(f)):
            raise ValueError("feature contains non-finite values")
        self.count += 1
        self.sum += f
        self.sum_outer += np.outer(f, f)
        return self

    def mean(self) -> np.ndarray:
        if self.count < 1:
            raise ValueError("no features accumulated")
        return self.sum / self.count

    def covariance(self) -> np.ndarray:
        """Population (1/N) covariance, symmetrized against rounding."""
        m = self.mean()
        cov = self.sum_outer / self.count - np.outer(m, m)
        return 0.5 * (cov + cov.T)


def symmetric_eigen(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvectors as matching columns).
    Sweeps until every off-diagonal magnitude is below 1e-10 or 100
    sweeps elapse. Deterministic ordering: stable descending sort on the
    eigenvalues, then each column is flipped so its largest-magnitude
    entry is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    sym_err = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if sym_err > 1e-6 * max(1.0, float(np.max(np.abs(a)))):
        raise ValueError(f"matrix is not symmetric (err {sym_err:g})")
    n = a.shape[0]
    work = 0.5 * (a + a.T)
    vecs = np.eye(n)

    for _ in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off = max(off, abs(work[p, q]))
        if off < JACOBI_TOL:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if apq == 0.0:
                    continue
                # classic Jacobi rotation annihilating the (p, q) entry
                theta = (work[q, q] - work[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(1.0 + theta * theta))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp, rq = work[p, :].copy(), work[q, :].copy()
                work[p, :] = c * rp - s * rq
                work[q, :] = s * rp + c * rq
                cp, cq = work[:, p].copy(), work[:, q].copy()
                work[:, p] = c * cp - s * cq
                work[:, q] = s * cp + c * cq
                work[p, q] = 0.0
                work[q, p] = 0.0
                vp, vq = vecs[:, p].copy(), vecs[:, q].copy()
                vecs[:, p] = c * vp - s * vq
                vecs[:, q] = s * vp + c * vq

    vals = np.diagonal(work).copy()
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    for j in range(n):
        col = vecs[:, j]
        if col[np.argmax(np.abs(col))] < 0.0:
            vecs[:, j] = -col
    return vals, vecs


def finalize(acc: MomentAccumulator, k: int) -> Projection:
    """Freeze the top-k principal directions of the accumulated stream.

    Requires count >= dim + 1 so the covariance is meaningfully estimable
    and 1 <= k <= dim. The result is an immutable Projection whose mean
    and basis hold exactly float32-representable values.
    """
    if not 1 <= k <= acc.dim:
        raise ValueError(f"k must be in [1, {acc.dim}], got {k}")
    if acc.count < acc.dim + 1:
        raise ValueError(
            f"need at least {acc.dim + 1} features to fit, have {acc.count}"
        )
    _, vecs = symmetric_eigen(acc.covariance())
    mean = acc.mean().astype(np.float32).astype(np.float64)
    basis = np.ascontiguousarray(vecs[:, :k]).astype(np.float32).astype(np.float64)
    return Projection(mean=mean, basis=basis)


def fit_projection(features, k: int) -> Projection:
    """One-shot fit from an N-by-D feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"expected an N x D matrix, got shape {features.shape}")
    acc = MomentAccumulator(features.shape[1])
    for row in features:
        acc.accumulate(row)
    return finalize(acc, k)
