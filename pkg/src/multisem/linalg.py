"""Half-vectorization and related matrix calculus helpers.

All covariance-moment coordinates in this package are vech coordinates
(column-stacked lower triangle).  The duplication matrix D maps vech to the
column-major vec of the corresponding symmetric matrix; its Moore-Penrose
inverse D+ maps back.  Formulas stated in vec space (Kronecker products,
commutation matrices) are projected onto the symmetric subspace with these
mappings.
"""

import numpy as np


def vech_indices(p):
    """Row/column index arrays of the lower triangle in vech order.

    Order is column-major: (0,0), (1,0), ..., (p-1,0), (1,1), (2,1), ...
    """
    cols, rows = np.triu_indices(p)
    return rows, cols


def vech(a):
    """Half-vectorize a square matrix (lower triangle, column-major)."""
    a = np.asarray(a)
    rows, cols = vech_indices(a.shape[0])
    return a[rows, cols]


def unvech(v):
    """Rebuild a symmetric matrix from its half-vectorization."""
    v = np.asarray(v)
    m = v.shape[0]
    p = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if p * (p + 1) // 2 != m:
        raise ValueError(f"length {m} is not a triangular number")
    out = np.zeros((p, p), dtype=v.dtype)
    rows, cols = vech_indices(p)
    out[rows, cols] = v
    out[cols, rows] = v
    return out


def duplication_matrix(p):
    """Duplication matrix D with vec(A) = D @ vech(A) for symmetric A."""
    m = p * (p + 1) // 2
    d = np.zeros((p * p, m))
    rows, cols = vech_indices(p)
    for k in range(m):
        i, j = rows[k], cols[k]
        d[i + p * j, k] = 1.0
        d[j + p * i, k] = 1.0
    return d


def duplication_pinv(p):
    """Moore-Penrose inverse of the duplication matrix (vech = D+ @ vec)."""
    m = p * (p + 1) // 2
    dp = np.zeros((m, p * p))
    rows, cols = vech_indices(p)
    for k in range(m):
        i, j = rows[k], cols[k]
        if i == j:
            dp[k, i + p * j] = 1.0
        else:
            dp[k, i + p * j] = 0.5
            dp[k, j + p * i] = 0.5
    return dp


def commutation_matrix(p, q=None):
    """Commutation matrix K with K @ vec(A) = vec(A') for A of shape (p, q)."""
    q = p if q is None else q
    k = np.zeros((p * q, p * q))
    for i in range(p):
        for j in range(q):
            k[j + q * i, i + p * j] = 1.0
    return k


def symmetrize(a):
    """Average a matrix with its transpose."""
    return 0.5 * (a + a.T)
