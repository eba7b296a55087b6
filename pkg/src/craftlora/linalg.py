"""Dense linear algebra primitives: QR, orthogonal projection, low-rank updates.

All arithmetic is 64-bit. Every function is pure, so concurrent use is safe.
"""

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import DegenerateInput, NotOrthonormal, ShapeMismatch
from .validation import as_matrix

# Columns whose residual falls below this fraction of the largest input
# column norm are treated as linearly dependent and dropped.
DROP_TOL_FACTOR = 1e-10

ORTHO_TOL = 1e-6


def householder_qr(b, drop_tol_factor=DROP_TOL_FACTOR):
    """Reduced QR via Householder reflections with dependent-column dropping.

    Returns ``(q, r)`` with ``q`` of shape ``(m, k)`` carrying orthonormal
    columns and ``r`` of shape ``(k, n)`` upper trapezoidal, ``k <= n`` after
    dropping columns that are numerically in the span of earlier ones.
    Column signs are flipped so that every pivot of ``r`` is nonnegative,
    which makes the output deterministic across platforms.

    Raises DegenerateInput when every column is numerically zero.
    """
    b = as_matrix(b, "b")
    m, n = b.shape
    if n == 0:
        return np.zeros((m, 0)), np.zeros((0, 0))
    col_norms = np.sqrt(np.einsum("ij,ij->j", b, b))
    scale = col_norms.max()
    if scale == 0.0:
        raise DegenerateInput("every column of b is zero")
    tol = drop_tol_factor * scale

    r = b.copy()
    reflectors = []
    kept = []
    for j in range(n):
        i = len(kept)
        if i == m:
            break  # row space exhausted; remaining columns keep coefficients
        x = r[i:, j]
        norm_x = np.linalg.norm(x)
        if norm_x < tol:
            r[i:, j] = 0.0
            continue
        v = x.copy()
        v[0] += norm_x if x[0] >= 0.0 else -norm_x
        v /= np.linalg.norm(v)
        r[i:, j:] -= 2.0 * np.outer(v, v @ r[i:, j:])
        r[i + 1:, j] = 0.0
        reflectors.append(v)
        kept.append(j)

    k = len(kept)
    if k == 0:
        raise DegenerateInput("every column of b is numerically dependent or zero")

    q = np.eye(m, k)
    for i in range(k - 1, -1, -1):
        v = reflectors[i]
        q[i:, :] -= 2.0 * np.outer(v, v @ q[i:, :])

    r = r[:k, :]
    for i, j in enumerate(kept):
        if r[i, j] < 0.0:
            r[i, :] = -r[i, :]
            q[:, i] = -q[:, i]
    return q, r


def qr_backward(q, r, grad_q):
    """Pull a gradient w.r.t. ``q`` back to the QR input.

    Valid only for full-column-rank factorizations (no dropped columns);
    ``q`` is (m, k), ``r`` is (k, k) upper triangular. The loss may depend on
    ``q`` alone, which is all the projection training needs.
    """
    q = as_matrix(q, "q")
    r = as_matrix(r, "r")
    grad_q = as_matrix(grad_q, "grad_q")
    k = q.shape[1]
    if r.shape != (k, k):
        raise ShapeMismatch(
            f"qr_backward needs a square r for a full-rank factorization, got {r.shape}"
        )
    if grad_q.shape != q.shape:
        raise ShapeMismatch(f"grad_q shape {grad_q.shape} does not match q {q.shape}")
    if k == 0:
        return np.zeros((q.shape[0], 0))
    s = q.T @ grad_q
    p = np.tril(s - s.T, -1)
    m = q @ p + grad_q - q @ s
    # right-multiply by r^{-T}: (m r^{-T}) = (r^{-1} m^T)^T
    return solve_triangular(r, m.T, lower=False).T


def check_orthonormal(q, tol=ORTHO_TOL, name="q"):
    q = as_matrix(q, name)
    if q.shape[1] == 0:
        return q
    dev = np.abs(q.T @ q - np.eye(q.shape[1])).max()
    if dev > tol:
        raise NotOrthonormal(f"{name} deviates from orthonormal columns by {dev:.3e}")
    return q


def project_out(w0, q, tol=ORTHO_TOL):
    """Remove the span of ``q`` from ``w0``: returns ``w0 - q q^T w0``.

    ``q`` must have orthonormal columns; a zero-column ``q`` leaves ``w0``
    untouched and a square orthonormal ``q`` annihilates it. Idempotent.
    """
    w0 = as_matrix(w0, "w0")
    q = as_matrix(q, "q")
    if q.shape[1] == 0:
        return w0.copy()
    if q.shape[0] != w0.shape[0]:
        raise ShapeMismatch(
            f"q has {q.shape[0]} rows but w0 has {w0.shape[0]}"
        )
    check_orthonormal(q, tol)
    return w0 - q @ (q.T @ w0)


def low_rank_update(w0, b, a):
    """Return ``w0 + b @ a`` after conformability checks."""
    w0 = as_matrix(w0, "w0")
    b = as_matrix(b, "b")
    a = as_matrix(a, "a")
    if b.shape[1] != a.shape[0]:
        raise ShapeMismatch(f"b is {b.shape} but a is {a.shape}")
    if b.shape[0] != w0.shape[0] or a.shape[1] != w0.shape[1]:
        raise ShapeMismatch(
            f"update {b.shape[0]}x{a.shape[1]} does not match w0 {w0.shape}"
        )
    return w0 + b @ a
