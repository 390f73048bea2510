"""Latent-space algebra for the compact-bottleneck conditional VAE.

Native-space distributions are diagonal Gaussians in R^D described by
(mu, log_var). A frozen affine projection (mean m, orthonormal basis U
with k columns) maps them to full-covariance Gaussians in R^k where the
KL term is evaluated and sampling happens; samples are mapped back to
R^D with z_tilde = U z_k + m before decoder fusion.

Everything here runs in float64: the compact matrices are tiny and the
KL identities (q == p gives exactly zero) rely on exact cancellation.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class LatentError(RuntimeError):
    """Degenerate latent state, e.g. a singular covariance inside a KL."""


def _check_vector(t: Tensor, name: str) -> None:
    if t.data.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {t.shape}")
    if t.data.dtype != np.float64:
        raise TypeError(f"{name} must be float64, got {t.data.dtype}")
    if not np.all(np.isfinite(t.data)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass
class GaussianD:
    """Diagonal Gaussian in the native D-dimensional latent space."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        _check_vector(self.mu, "mu")
        _check_vector(self.log_var, "log_var")
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {self.mu.shape} vs log_var {self.log_var.shape}")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class GaussianK:
    """Full-covariance Gaussian in the compact k-dimensional space."""

    mu: Tensor
    cov: Tensor

    def __post_init__(self):
        _check_vector(self.mu, "mu")
        c = self.cov.data
        k = self.mu.shape[0]
        if c.shape != (k, k):
            raise ShapeError(f"cov shape {c.shape} does not match mu length {k}")
        if c.dtype != np.float64:
            raise TypeError(f"cov must be float64, got {c.dtype}")
        if not np.all(np.isfinite(c)):
            raise ValueError("cov contains non-finite values")
        sym_err = float(np.max(np.abs(c - c.T))) if c.size else 0.0
        if sym_err > 1e-6 * max(1.0, float(np.max(np.abs(c)))):
            raise ValueError(f"cov is not symmetric (err {sym_err:g})")

    @property
    def k(self) -> int:
        return self.mu.shape[0]

    def min_eigenvalue(self) -> float:
        """Smallest eigenvalue of cov; PSD check hook for tests and debugging."""
        return float(np.linalg.eigvalsh(0.5 * (self.cov.data + self.cov.data.T))[0])


@dataclass(frozen=True, eq=False)
class Projection:
    """Frozen affine map between R^D and the compact R^k subspace.

    mean is the centering vector m, basis the D-by-k matrix U with
    orthonormal columns. Arrays are locked read-only at construction;
    the dataclass is frozen, so the instance cannot be rebound either.
    """

    mean: np.ndarray
    basis: np.ndarray
    mean_t: Tensor = field(init=False, repr=False, compare=False)
    basis_t: Tensor = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.array(self.mean, dtype=np.float64)
        u = np.array(self.basis, dtype=np.float64)
        if u.ndim != 2 or m.ndim != 1 or m.shape[0] != u.shape[0]:
            raise ShapeError(f"projection shapes: mean {m.shape}, basis {u.shape}")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(u))):
            raise ValueError("projection contains non-finite values")
        gram_err = float(np.max(np.abs(u.T @ u - np.eye(u.shape[1]))))
        if gram_err > 1e-5:
            raise ValueError(f"basis columns are not orthonormal (err {gram_err:g})")
        m.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "basis", u)
        object.__setattr__(self, "mean_t", Tensor(m))
        object.__setattr__(self, "basis_t", Tensor(u))

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def is_identity(self) -> bool:
        return (
            self.k == self.d
            and np.array_equal(self.basis, np.eye(self.d))
            and not self.mean.any()
        )

    @classmethod
    def identity(cls, d: int) -> "Projection":
        return cls(mean=np.zeros(d), basis=np.eye(d))


@dataclass
class LatentSample:
    """A draw z_k in compact space, optionally with its native-space image."""

    z_k: Tensor
    z_tilde: Optional[Tensor] = None


def project_gaussian(g: GaussianD, p: Projection) -> GaussianK:
    """Push a native diagonal Gaussian through the projection.

    mu_k = U^T (mu - m); cov_k = U^T diag(exp(log_var)) U. The same map
    serves prior and posterior; callers must pass the one shared frozen
    Projection so both live in the identical subspace.
    """
    if g.dim != p.d:
        raise ShapeError(f"gaussian dim {g.dim} != projection dim {p.d}")
    ut = T.transpose(p.basis_t)
    centered = T.add(g.mu, T.neg(p.mean_t))
    mu_k = T.matmul(ut, centered)
    cov = T.matmul(T.matmul(ut, T.diag_embed(T.exp(g.log_var))), p.basis_t)
    return GaussianK(mu_k, cov)


def kl_compact(q: GaussianK, p: GaussianK) -> Tensor:
    """KL(q || p) between full-covariance Gaussians in compact space.

    0.5 [ tr(Sp^-1 Sq) + (mp-mq)^T Sp^-1 (mp-mq) - k + ln det Sp - ln det Sq ],
    evaluated through Cholesky factors so that q == p cancels to exactly 0.
    """
    if q.k != p.k:
        raise ShapeError(f"kl_compact: q has k={q.k}, p has k={p.k}")
    lq, _ = T.cholesky(q.cov)
    lp, _ = T.cholesky(p.cov)
    for lm, name in ((lq, "q"), (lp, "p")):
        if np.any(np.diagonal(lm.data) <= 0.0):
            raise LatentError(f"singular {name} covariance in kl_compact")
    ratio = T.tri_solve_lower(lp, lq)
    trace_term = T.tsum(T.mul(ratio, ratio))
    dmu = T.add(p.mu, T.neg(q.mu))
    white = T.tri_solve_lower(lp, dmu)
    maha = T.tsum(T.mul(white, white))
    logdet_p = T.scale(T.tsum(T.log(T.diag_part(lp))), 2.0)
    logdet_q = T.scale(T.tsum(T.log(T.diag_part(lq))), 2.0)
    inner = T.add(T.add(trace_term, maha), T.add(logdet_p, T.neg(logdet_q)))
    return T.scale(T.add(inner, Tensor(np.asarray(-float(q.k)))), 0.5)


def sample_compact(g: GaussianK, noise: np.ndarray) -> LatentSample:
    """Reparameterized draw z_k = mu + L @ noise with L the jittered factor.

    Differentiable w.r.t. mu and cov; a zero covariance degenerates to
    z_k = mu exactly for any noise.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (g.k,):
        raise ShapeError(f"noise shape {noise.shape}, expected ({g.k},)")
    lower, _ = T.cholesky(g.cov)
    z_k = T.add(g.mu, T.matmul(lower, Tensor(noise)))
    return LatentSample(z_k=z_k)


def inverse_reproject(z_k: Tensor, p: Projection) -> Tensor:
    """Map a compact sample back to the native space: z_tilde = U z_k + m."""
    if z_k.data.ndim != 1 or z_k.shape[0] != p.k:
        raise ShapeError(f"z_k shape {z_k.shape}, expected ({p.k},)")
    return T.add(T.matmul(p.basis_t, z_k), p.mean_t)


def kl_diag_fullspace(q: GaussianD, p: GaussianD) -> Tensor:
    """Closed-form KL between the native diagonal Gaussians, no projection.

    The reference objective for the identity-bottleneck baseline and the
    upper bound the projected KL can never exceed (data processing).
    """
    if q.dim != p.dim:
        raise ShapeError(f"kl_diag_fullspace: dims {q.dim} vs {p.dim}")
    dlv = T.add(q.log_var, T.neg(p.log_var))
    ratio_sum = T.tsum(T.exp(dlv))
    dmu = T.add(p.mu, T.neg(q.mu))
    maha_sum = T.tsum(T.mul(T.mul(dmu, dmu), T.exp(T.neg(p.log_var))))
    inner = T.add(
        T.add(ratio_sum, maha_sum),
        T.neg(T.add(T.tsum(dlv), Tensor(np.asarray(float(q.dim))))),
    )
    return T.scale(inner, 0.5)
