"""Kernel-based dependence measures and an exact discrete-MI oracle.

Two parallel paths live here. The numpy path (``rbf_gram``, ``renyi_entropy``,
``hsic``, ...) is for estimation and monitoring and goes through an explicit
symmetric eigensolver. The graph path (``penalty_mi``) builds the same
quantities out of autodiff ops so the penalty can be differentiated through
the encoder; it is restricted to HSIC and the alpha=2 Renyi mutual
information, where tr(K_norm^2) reduces to a plain Frobenius sum and no
eigendecomposition is needed.

All entropies and mutual informations are in bits (log base 2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Array = np.ndarray

_LN2 = float(np.log(2.0))


@dataclass
class GramMatrix:
    """Kernel matrix over a sample batch, optionally trace-normalized."""

    K: Array
    sigma: float
    normalized: bool = False

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def normalize(self) -> "GramMatrix":
        if self.normalized:
            return self
        return GramMatrix(self.K / np.trace(self.K), self.sigma, normalized=True)


@dataclass
class Spectrum:
    """Eigenvalues sorted descending, clamped to be non-negative."""

    eigenvalues: Array


@dataclass
class MIEstimate:
    value: float
    estimator: str
    alpha: float | None = None


def _as_sample_matrix(samples) -> Array:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    return x


def rbf_gram(samples, sigma: float) -> GramMatrix:
    """K_ij = exp(-||x_i - x_j||^2 / (2 sigma^2)), exactly symmetric."""
    if sigma <= 0.0:
        raise ValueError("rbf_gram: sigma must be positive")
    x = _as_sample_matrix(samples)
    n = x.shape[0]
    if n < 2:
        raise ValueError("rbf_gram: needs at least 2 samples")
    diff = x[:, None, :] - x[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return GramMatrix(np.exp(-d2 / (2.0 * sigma * sigma)), float(sigma))


def median_bandwidth(samples) -> float:
    """Median of the nonzero pairwise distances; 1.0 if all points coincide."""
    x = _as_sample_matrix(samples)
    n = x.shape[0]
    if n < 2:
        raise ValueError("median_bandwidth: needs at least 2 samples")
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    upper = d[np.triu_indices(n, k=1)]
    nonzero = upper[upper > 0.0]
    if nonzero.size == 0:
        return 1.0
    return float(np.median(nonzero))


def symmetric_eigenvalues(matrix, tol: float | None = None) -> Spectrum:
    """All eigenvalues of a symmetric matrix via cyclic Jacobi rotations.

    Sweeps run until the off-diagonal Frobenius norm drops below ``tol``
    (default 1e-12 * N). Eigenvalues within ``tol`` of zero, negative or
    positive, are numerical noise on PSD Gram matrices and are snapped to
    exactly zero; fractional orders would otherwise amplify them.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"symmetric_eigenvalues: expected a square matrix, got {a.shape}")
    n = a.shape[0]
    if np.max(np.abs(a - a.T)) > 1e-10:
        raise ValueError("symmetric_eigenvalues: matrix is not symmetric within 1e-10")
    a = 0.5 * (a + a.T)
    if tol is None:
        tol = 1e-12 * n

    def off_norm(m: Array) -> float:
        off = m - np.diag(np.diag(m))
        return float(np.sqrt((off * off).sum()))

    for _ in range(100):  # each sweep reduces the off-diagonal mass quadratically
        if off_norm(a) <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    if off_norm(a) > tol:
        raise RuntimeError("symmetric_eigenvalues: Jacobi sweeps did not converge")

    lam = np.sort(np.diag(a))[::-1]
    lam = np.maximum(lam, 0.0)
    lam[lam < tol] = 0.0
    return Spectrum(lam)


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    if alpha == 1.0:
        raise ValueError("alpha = 1 (Shannon limit) is not implemented")
    return alpha


def renyi_entropy(gram: GramMatrix, alpha: float) -> float:
    """Matrix-based Renyi entropy of order alpha, in bits."""
    alpha = _check_alpha(alpha)
    k = gram.normalize().K
    lam = symmetric_eigenvalues(k).eigenvalues
    powered = np.where(lam > 0.0, lam, 0.0) ** alpha
    return float(np.log2(powered.sum()) / (1.0 - alpha))


def renyi_joint_entropy(gram_x: GramMatrix, gram_y: GramMatrix, alpha: float) -> float:
    """Entropy of the trace-normalized Hadamard product of the two Grams."""
    if gram_x.n != gram_y.n:
        raise ValueError(f"renyi_joint_entropy: size mismatch {gram_x.n} vs {gram_y.n}")
    had = gram_x.K * gram_y.K
    return renyi_entropy(GramMatrix(had / np.trace(had), 0.0, normalized=True), alpha)


def renyi_mi(x_samples, y_samples, alpha: float,
             sigma_x: float | None = None, sigma_y: float | None = None) -> MIEstimate:
    """H_a(X) + H_a(Y) - H_a(X, Y) with RBF Grams (median bandwidth by default)."""
    x = _as_sample_matrix(x_samples)
    y = _as_sample_matrix(y_samples)
    if x.shape[0] != y.shape[0]:
        raise ValueError("renyi_mi: sample sets must be paired")
    sx = median_bandwidth(x) if sigma_x is None else sigma_x
    sy = median_bandwidth(y) if sigma_y is None else sigma_y
    gx, gy = rbf_gram(x, sx), rbf_gram(y, sy)
    value = renyi_entropy(gx, alpha) + renyi_entropy(gy, alpha) - renyi_joint_entropy(gx, gy, alpha)
    return MIEstimate(value=value, estimator="renyi", alpha=float(alpha))


def _double_center(k: Array) -> Array:
    # H K H with H = I - (1/N) 1 1^T, written so a constant K centers to exact zeros
    return ((k - k.mean(axis=0, keepdims=True)) - k.mean(axis=1, keepdims=True)) + k.mean()


def hsic(x_samples, y_samples,
         sigma_x: float | None = None, sigma_y: float | None = None) -> MIEstimate:
    """Biased empirical HSIC, (1/N^2) tr(K_x H K_y H) with H = I - (1/N) 1 1^T.

    H is idempotent, so the trace equals the elementwise product of the two
    doubly-centered Grams; that form makes a constant variable give exactly 0.
    """
    x = _as_sample_matrix(x_samples)
    y = _as_sample_matrix(y_samples)
    n = x.shape[0]
    if n != y.shape[0]:
        raise ValueError("hsic: sample sets must be paired")
    if n < 2:
        raise ValueError("hsic: needs at least 2 samples")
    sx = median_bandwidth(x) if sigma_x is None else sigma_x
    sy = median_bandwidth(y) if sigma_y is None else sigma_y
    kx, ky = rbf_gram(x, sx).K, rbf_gram(y, sy).K
    value = float((_double_center(kx) * _double_center(ky)).sum() / (n * n))
    return MIEstimate(value=value, estimator="hsic")


# ---------------------------------------------------------------------------
# differentiable penalty

@dataclass(frozen=True)
class PenaltyConfig:
    """Estimator selection for the differentiable MI penalty.

    ``sigma_x`` / ``sigma_y`` override the per-call median heuristic; the
    bandwidth is always treated as a constant in differentiation.
    """

    estimator: str = "hsic"
    sigma_x: float | None = None
    sigma_y: float | None = None

    def __post_init__(self):
        if self.estimator not in ("hsic", "renyi2"):
            raise ValueError(f"unknown penalty estimator {self.estimator!r}")


def _flatten_batch(t: Tensor) -> Tensor:
    return ad.reshape(t, (t.shape[0], -1)) if t.ndim != 2 else t


def _gram_graph(x: Tensor, sigma: float) -> Tensor:
    """Differentiable RBF Gram matrix over the rows of a [N, d] tensor."""
    sq = ad.reduce_sum(ad.square(x), axes=1, keepdims=True)
    cross = ad.matmul(x, ad.transpose(x, (1, 0)))
    d2 = ad.sub(ad.add(sq, ad.transpose(sq, (1, 0))), ad.scale(cross, 2.0))
    d2 = ad.clip(d2, 0.0, None)  # cancellation can leave ~-1e-16 residues
    return ad.exp(ad.scale(d2, -1.0 / (2.0 * sigma * sigma)))


def _center_graph(k: Tensor) -> Tensor:
    row = ad.reduce_mean(k, axes=0, keepdims=True)
    col = ad.reduce_mean(k, axes=1, keepdims=True)
    return ad.add(ad.sub(ad.sub(k, row), col), ad.reduce_mean(k))


def _hsic_graph(kx: Tensor, ky: Tensor, n: int) -> Tensor:
    # tr(Kx H Ky H) as the product of doubly-centered Grams (H is idempotent)
    return ad.scale(ad.reduce_sum(ad.mul(_center_graph(kx), _center_graph(ky))), 1.0 / (n * n))


def _renyi2_entropy_graph(k: Tensor, n: int) -> Tensor:
    # H_2 = -log2(tr(K_norm^2)) = -(log sum K_ij^2 - 2 log tr K) / log 2
    eye = Tensor(np.eye(n))
    trace = ad.reduce_sum(ad.mul(k, eye))
    frob = ad.reduce_sum(ad.square(k))
    return ad.scale(ad.sub(ad.log(frob), ad.scale(ad.log(trace), 2.0)), -1.0 / _LN2)


def penalty_mi(x_batch: Tensor, z_batch: Tensor, config: PenaltyConfig) -> Tensor:
    """Differentiable dependence between paired batches, as a graph scalar.

    Rows are flattened per sample. The kernel bandwidths come from the
    median heuristic on the current values (or the config overrides) and
    carry no gradient.
    """
    x = _flatten_batch(x_batch)
    z = _flatten_batch(z_batch)
    n = x.shape[0]
    if n < 2:
        raise ValueError("penalty_mi: batch must contain at least 2 samples")
    if z.shape[0] != n:
        raise ValueError(f"penalty_mi: batch sizes differ, {n} vs {z.shape[0]}")
    sx = config.sigma_x if config.sigma_x is not None else median_bandwidth(x.data)
    sy = config.sigma_y if config.sigma_y is not None else median_bandwidth(z.data)
    kx = _gram_graph(x, sx)
    kz = _gram_graph(z, sy)
    if config.estimator == "hsic":
        return _hsic_graph(kx, kz, n)
    joint = ad.mul(kx, kz)
    hx = _renyi2_entropy_graph(kx, n)
    hz = _renyi2_entropy_graph(kz, n)
    hxz = _renyi2_entropy_graph(joint, n)
    return ad.sub(ad.add(hx, hz), hxz)


# ---------------------------------------------------------------------------
# exact discrete oracle

def discrete_mi(joint_pmf) -> float:
    """Exact mutual information of a finite joint pmf, in bits (0 log 0 := 0)."""
    p = np.asarray(joint_pmf, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("discrete_mi: joint pmf must be a matrix")
    if np.any(p < 0.0):
        raise ValueError("discrete_mi: probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"discrete_mi: pmf sums to {p.sum()}, not 1")
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if p[i, j] > 0.0:
                total += p[i, j] * np.log2(p[i, j] / (px[i] * py[j]))
    return float(total)
