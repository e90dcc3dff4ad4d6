"""Dense linear algebra used by training and analysis.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi iteration so that its behaviour is easy to verify in
isolation; power iteration provides the spectral norm used by SRIP.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError, ShapeError

__all__ = ["SvdResult", "matmul", "svd", "spectral_norm", "power_iteration", "gram_schmidt", "as_matrix"]


@dataclass(frozen=True)
class SvdResult:
    """Full SVD ``m = u @ diag(sigma) @ v.T``.

    ``u`` is ``rows x rows``, ``v`` is ``cols x cols`` and ``sigma`` holds the
    ``min(rows, cols)`` singular values in descending order. Columns of ``v``
    are the right singular vectors.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        k = self.sigma.size
        return (self.u[:, :k] * self.sigma) @ self.v[:, :k].T


def as_matrix(a):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_finite(m, what):
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} contains non-finite entries")


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    _check_finite(out, "matrix product")
    return out


def _jacobi_columns(a, tol, max_sweeps):
    """Orthogonalize the columns of ``a`` in place; returns the accumulated rotations."""
    n = a.shape[1]
    v = np.eye(n)
    norms = np.einsum("ij,ij->j", a, a)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gamma = a[:, p] @ a[:, q]
                alpha, beta = norms[p], norms[q]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap, aq = a[:, p].copy(), a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
                norms[p] = a[:, p] @ a[:, p]
                norms[q] = a[:, q] @ a[:, q]
        if not rotated:
            return v
    # measure how far from orthogonal the columns still are
    g = a.T @ a
    d = np.sqrt(np.outer(np.diag(g), np.diag(g)))
    off = np.abs(g - np.diag(np.diag(g)))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(d > 0, off / d, 0.0)
    residual = float(rel.max()) if rel.size else 0.0
    if residual > 1e3 * tol:
        raise NumericError(f"Jacobi SVD did not converge after {max_sweeps} sweeps", residual)
    return v


def _complete_basis(cols, dim):
    """Extend orthonormal columns ``cols`` (dim x k) to a dim x dim orthogonal matrix."""
    k = cols.shape[1]
    if k == dim:
        return cols
    q, _ = np.linalg.qr(np.hstack([cols, np.eye(dim)]), mode="complete")
    # QR may flip signs of the leading columns; keep the originals
    out = q.copy()
    out[:, :k] = cols
    return out


def _svd_tall(m, tol, max_sweeps):
    rows, cols = m.shape
    a = m.copy()
    v = _jacobi_columns(a, tol, max_sweeps)
    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    scale = max(sigma[0] if sigma.size else 0.0, 1.0)
    nonzero = sigma > 1e-14 * scale
    u_cols = np.zeros((rows, cols))
    u_cols[:, nonzero] = a[:, nonzero] / sigma[nonzero]
    sigma = np.where(nonzero, sigma, 0.0)
    # columns with zero singular value get an arbitrary orthonormal completion
    r = int(nonzero.sum())
    u = _complete_basis(u_cols[:, :r], rows)
    return u, sigma, v


def svd(m, tol=1e-12, max_sweeps=30):
    """Singular value decomposition by one-sided Jacobi rotations.

    Rotations are skipped once the normalized column inner product falls
    below ``tol``; :class:`NumericError` is raised if ``max_sweeps`` sweeps
    are not enough. Each right singular vector is sign-normalized so that
    its first nonzero entry is positive.
    """
    m = as_matrix(m)
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError("svd needs at least one row and one column")
    _check_finite(m, "svd input")
    rows, cols = m.shape
    if rows >= cols:
        u, sigma, v = _svd_tall(m, tol, max_sweeps)
    else:
        v, sigma, u = _svd_tall(m.T, tol, max_sweeps)
    k = sigma.size
    for j in range(cols):
        col = v[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            v[:, j] = -col
            if j < k:
                u[:, j] = -u[:, j]
    return SvdResult(u=u, sigma=sigma, v=v)


def power_iteration(m, max_iters=100, tol=1e-6):
    """Largest singular value of ``m`` and its right singular vector.

    Power iteration on ``m.T @ m`` from a fixed start vector (all ones plus a
    ramp, so structured inputs are not started orthogonal to the answer).
    Stops early once successive estimates agree to ``1e-3 * tol``.
    """
    m = as_matrix(m)
    _check_finite(m, "power iteration input")
    n = m.shape[1]
    x = np.ones(n) + np.linspace(0.0, 0.5, n)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iters):
        y = m.T @ (m @ x)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0, x
        x = y / norm
        new = np.sqrt(norm)
        done = abs(new - est) <= 1e-3 * tol * new
        est = new
        if done:
            break
    return float(np.linalg.norm(m @ x)), x


def spectral_norm(m, max_iters=100, tol=1e-6):
    """Largest singular value of ``m``; 0 for the zero matrix."""
    return power_iteration(m, max_iters, tol)[0]


def gram_schmidt(vectors, tol=1e-10):
    """Orthonormalize ``vectors`` (modified Gram-Schmidt, one re-orthogonalization pass).

    Vectors whose residual norm after projection is below ``tol`` are
    dropped, so the result has as many entries as there are linearly
    independent inputs.
    """
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vectors:
        return []
    dim = vectors[0].shape
    basis = []
    for v in vectors:
        if v.shape != dim:
            raise ShapeError(f"vector of shape {v.shape} does not match {dim}")
        w = v.astype(np.float64, copy=True)
        for _ in range(2):
            for q in basis:
                w -= (q @ w) * q
        norm = np.linalg.norm(w)
        if norm < tol:
            continue
        basis.append(w / norm)
    return basis
