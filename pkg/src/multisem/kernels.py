"""Hot numerical kernels: template assembly, discrepancy, analytic gradient.

These functions are called tens of thousands of times per Monte Carlo run,
once per line-search step of every fit.  By default they are compiled with
numba's ``@njit``; setting the environment variable ``MULTISEM_KERNELS=numpy``
(or running without numba installed) selects the identical pure-Python/NumPy
code path.  ``benchmarks/kernel_bench.py`` compares the two.

All kernels are exception-free: infeasibility (non-positive-definite implied
covariance, singular recursive system) is reported through a boolean status
so the optimizer can shorten the step instead of unwinding.

Matrix products are written as explicit loops: the operands are tiny (p and
k_xi are single digits) and loops beat BLAS dispatch at that size under numba
while remaining valid NumPy-era Python in the fallback.
"""

import os

import numpy as np

_requested = os.environ.get("MULTISEM_KERNELS", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"MULTISEM_KERNELS must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    JIT_ENABLED = False
else:
    try:
        from numba import njit as _njit

        JIT_ENABLED = True
    except ImportError:
        if _requested == "numba":
            raise RuntimeError("MULTISEM_KERNELS=numba but numba is not importable")
        JIT_ENABLED = False

BACKEND = "numba" if JIT_ENABLED else "numpy"


def _jit(fn):
    if JIT_ENABLED:
        return _njit(cache=True, fastmath=False)(fn)
    return fn


@_jit
def chol_lower(a, lo):
    """Cholesky factor of ``a`` into ``lo``; False when not positive definite."""
    p = a.shape[0]
    for i in range(p):
        for j in range(p):
            lo[i, j] = 0.0
    for j in range(p):
        d = a[j, j]
        for k in range(j):
            d -= lo[j, k] * lo[j, k]
        if not (d > 0.0) or not np.isfinite(d):
            return False
        d = np.sqrt(d)
        lo[j, j] = d
        for i in range(j + 1, p):
            s = a[i, j]
            for k in range(j):
                s -= lo[i, k] * lo[j, k]
            lo[i, j] = s / d
    return True


@_jit
def inv_from_chol(lo, out):
    """Inverse of A = lo @ lo' given the lower Cholesky factor."""
    p = lo.shape[0]
    linv = np.zeros((p, p))
    for j in range(p):
        linv[j, j] = 1.0 / lo[j, j]
        for i in range(j + 1, p):
            s = 0.0
            for k in range(j, i):
                s -= lo[i, k] * linv[k, j]
            linv[i, j] = s / lo[i, i]
    for i in range(p):
        for j in range(p):
            s = 0.0
            for k in range(max(i, j), p):
                s += linv[k, i] * linv[k, j]
            out[i, j] = s


@_jit
def solve_columns(a, b):
    """Solve a @ x = b in place into ``b`` (Gauss, partial pivoting); destroys ``a``.

    Returns False on a (numerically) singular system.
    """
    n = a.shape[0]
    m = b.shape[1]
    for col in range(n):
        piv = col
        big = abs(a[col, col])
        for r in range(col + 1, n):
            v = abs(a[r, col])
            if v > big:
                big = v
                piv = r
        if not (big > 1e-300):
            return False
        if piv != col:
            for c in range(col, n):
                tmp = a[col, c]
                a[col, c] = a[piv, c]
                a[piv, c] = tmp
            for c in range(m):
                tmp = b[col, c]
                b[col, c] = b[piv, c]
                b[piv, c] = tmp
        d = a[col, col]
        for r in range(col + 1, n):
            f = a[r, col] / d
            if f != 0.0:
                for c in range(col + 1, n):
                    a[r, c] -= f * a[col, c]
                for c in range(m):
                    b[r, c] -= f * b[col, c]
            a[r, col] = 0.0
    for col in range(n - 1, -1, -1):
        d = a[col, col]
        for c in range(m):
            s = b[col, c]
            for r in range(col + 1, n):
                s -= a[col, r] * b[r, c]
            b[col, c] = s / d
    return True


@_jit
def _fill_vector(theta, const, idx, out):
    n = const.shape[0]
    for i in range(n):
        k = idx[i]
        out[i] = theta[k] if k >= 0 else const[i]


@_jit
def _fill_matrix(theta, const, idx, out):
    n, m = const.shape
    for i in range(n):
        for j in range(m):
            k = idx[i, j]
            out[i, j] = theta[k] if k >= 0 else const[i, j]


@_jit
def assemble_sample(
    theta,
    alpha_c,
    alpha_i,
    gamma_c,
    gamma_i,
    has_gamma,
    bt_c,
    bt_i,
    phi_c,
    phi_i,
    muz_i,
):
    """Fill one sample's templates at ``theta`` and reduce the recursive layer.

    Returns (ok, beta, bmat, phi, mu, rmat) where bmat is the reduced
    coefficient matrix, mu the implied mean and rmat = (I - Gamma)^(-1)
    (identity when there is no recursive layer).
    """
    p, kxi = bt_c.shape
    kz = muz_i.shape[0]
    beta = np.empty(p)
    bmat = np.empty((p, kxi))
    phi = np.empty((kxi, kxi))
    rmat = np.zeros((p, p))
    _fill_vector(theta, alpha_c, alpha_i, beta)
    _fill_matrix(theta, bt_c, bt_i, bmat)
    _fill_matrix(theta, phi_c, phi_i, phi)
    for i in range(p):
        rmat[i, i] = 1.0
    if has_gamma:
        img = np.empty((p, p))
        for r in range(p):
            for c in range(p):
                k = gamma_i[r, c]
                g = theta[k] if k >= 0 else gamma_c[r, c]
                img[r, c] = (1.0 if r == c else 0.0) - g
        if not solve_columns(img.copy(), rmat):
            return False, beta, bmat, phi, beta, rmat
        nb = np.empty(p)
        nbm = np.empty((p, kxi))
        for r in range(p):
            s = 0.0
            for k in range(p):
                s += rmat[r, k] * beta[k]
            nb[r] = s
            for c in range(kxi):
                s2 = 0.0
                for k in range(p):
                    s2 += rmat[r, k] * bmat[k, c]
                nbm[r, c] = s2
        beta = nb
        bmat = nbm
    mu = np.empty(p)
    for r in range(p):
        s = beta[r]
        for c in range(kz):
            s += bmat[r, c] * theta[muz_i[c]]
        mu[r] = s
    return True, beta, bmat, phi, mu, rmat


@_jit
def _implied_sigma(bmat, phi):
    p, kxi = bmat.shape
    bp = np.empty((p, kxi))
    for r in range(p):
        for c in range(kxi):
            s = 0.0
            for k in range(kxi):
                s += bmat[r, k] * phi[k, c]
            bp[r, c] = s
    sigma = np.empty((p, p))
    for r in range(p):
        for c in range(r + 1):
            s = 0.0
            for k in range(kxi):
                s += bp[r, k] * bmat[c, k]
            sigma[r, c] = s
            sigma[c, r] = s
    return sigma


@_jit
def _blocks_psd(phi, block_sizes):
    off = 0
    nb = block_sizes.shape[0]
    for b in range(nb):
        m = block_sizes[b]
        blk = np.empty((m, m))
        for i in range(m):
            for j in range(m):
                blk[i, j] = phi[off + i, off + j]
        lo = np.empty((m, m))
        if not chol_lower(blk, lo):
            return False
        off += m
    return True


@_jit
def implied_sample_moments(
    theta,
    alpha_c,
    alpha_i,
    gamma_c,
    gamma_i,
    has_gamma,
    bt_c,
    bt_i,
    phi_c,
    phi_i,
    muz_i,
):
    """Implied mean vector and covariance matrix for one sample."""
    ok, beta, bmat, phi, mu, rmat = assemble_sample(
        theta, alpha_c, alpha_i, gamma_c, gamma_i, has_gamma, bt_c, bt_i, phi_c, phi_i, muz_i
    )
    if not ok:
        return False, mu, np.zeros((bt_c.shape[0], bt_c.shape[0]))
    return True, mu, _implied_sigma(bmat, phi)


@_jit
def sample_discrepancy(
    theta,
    alpha_c,
    alpha_i,
    gamma_c,
    gamma_i,
    has_gamma,
    bt_c,
    bt_i,
    phi_c,
    phi_i,
    muz_i,
    block_sizes,
    require_blocks,
    ybar,
    s_mat,
    logdet_s,
    n,
):
    """One sample's pseudo-normal discrepancy contribution.

    Returns (ok, value); ok is False on an infeasible point.
    """
    p = bt_c.shape[0]
    ok, beta, bmat, phi, mu, rmat = assemble_sample(
        theta, alpha_c, alpha_i, gamma_c, gamma_i, has_gamma, bt_c, bt_i, phi_c, phi_i, muz_i
    )
    if not ok:
        return False, 0.0
    if require_blocks and not _blocks_psd(phi, block_sizes):
        return False, 0.0
    sigma = _implied_sigma(bmat, phi)
    lo = np.empty((p, p))
    if not chol_lower(sigma, lo):
        return False, 0.0
    siginv = np.empty((p, p))
    inv_from_chol(lo, siginv)
    logdet_sigma = 0.0
    for i in range(p):
        logdet_sigma += np.log(lo[i, i])
    logdet_sigma *= 2.0
    tr = 0.0
    for i in range(p):
        for j in range(p):
            tr += siginv[i, j] * s_mat[i, j]
    quad = 0.0
    for i in range(p):
        di = ybar[i] - mu[i]
        for j in range(p):
            quad += di * siginv[i, j] * (ybar[j] - mu[j])
    value = n * (tr - (logdet_s - logdet_sigma) - p + quad)
    return True, value


@_jit
def sample_discrepancy_grad(
    theta,
    alpha_c,
    alpha_i,
    gamma_c,
    gamma_i,
    has_gamma,
    bt_c,
    bt_i,
    phi_c,
    phi_i,
    muz_i,
    block_sizes,
    require_blocks,
    ybar,
    s_mat,
    logdet_s,
    n,
    grad,
):
    """Discrepancy contribution plus its analytic gradient accumulated into ``grad``.

    The gradient follows the chain rule through the template maps:
    dQ = n * [tr(W dSigma) - 2 u' dmu] with W = Sigma^-1 - Sigma^-1 S Sigma^-1
    - u u' and u = Sigma^-1 (ybar - mu).  Entries of Gamma act through
    (I - Gamma)^-1: dB = R e_r e_c' B and dbeta = R e_r e_c' beta, so each
    template slot contributes a rank-one term evaluated from cached products.
    """
    p, kxi = bt_c.shape
    kz = muz_i.shape[0]
    ok, beta, bmat, phi, mu, rmat = assemble_sample(
        theta, alpha_c, alpha_i, gamma_c, gamma_i, has_gamma, bt_c, bt_i, phi_c, phi_i, muz_i
    )
    if not ok:
        return False, 0.0
    if require_blocks and not _blocks_psd(phi, block_sizes):
        return False, 0.0
    sigma = _implied_sigma(bmat, phi)
    lo = np.empty((p, p))
    if not chol_lower(sigma, lo):
        return False, 0.0
    siginv = np.empty((p, p))
    inv_from_chol(lo, siginv)
    logdet_sigma = 0.0
    for i in range(p):
        logdet_sigma += np.log(lo[i, i])
    logdet_sigma *= 2.0

    delta = np.empty(p)
    for i in range(p):
        delta[i] = ybar[i] - mu[i]
    u = np.empty(p)
    for i in range(p):
        s = 0.0
        for j in range(p):
            s += siginv[i, j] * delta[j]
        u[i] = s

    tr = 0.0
    for i in range(p):
        for j in range(p):
            tr += siginv[i, j] * s_mat[i, j]
    quad = 0.0
    for i in range(p):
        quad += delta[i] * u[i]
    value = n * (tr - (logdet_s - logdet_sigma) - p + quad)

    # W = siginv - siginv @ S @ siginv - u u'
    sis = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            s = 0.0
            for k in range(p):
                s += siginv[i, k] * s_mat[k, j]
            sis[i, j] = s
    w = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            s = 0.0
            for k in range(p):
                s += sis[i, k] * siginv[k, j]
            w[i, j] = siginv[i, j] - s - u[i] * u[j]

    # nmat = 2 W B phi ; mmat = B' W B
    wb = np.empty((p, kxi))
    for r in range(p):
        for c in range(kxi):
            s = 0.0
            for k in range(p):
                s += w[r, k] * bmat[k, c]
            wb[r, c] = s
    nmat = np.empty((p, kxi))
    for r in range(p):
        for c in range(kxi):
            s = 0.0
            for k in range(kxi):
                s += wb[r, k] * phi[k, c]
            nmat[r, c] = 2.0 * s
    mmat = np.empty((kxi, kxi))
    for a in range(kxi):
        for b in range(kxi):
            s = 0.0
            for k in range(p):
                s += bmat[k, a] * wb[k, b]
            mmat[a, b] = s

    # alpha entries: dmu = R e_r
    for r in range(p):
        ai = alpha_i[r]
        if ai >= 0:
            if has_gamma:
                ut = 0.0
                for k in range(p):
                    ut += u[k] * rmat[k, r]
            else:
                ut = u[r]
            grad[ai] += n * (-2.0 * ut)

    # Gamma entries: dB = t v' with t = R[:, r], v = B[c, :]; dmu = t mu[c]
    if has_gamma:
        for r in range(p):
            for c in range(p):
                gi = gamma_i[r, c]
                if gi >= 0:
                    ut = 0.0
                    for k in range(p):
                        ut += u[k] * rmat[k, r]
                    s1 = 0.0
                    for a in range(p):
                        ta = rmat[a, r]
                        if ta != 0.0:
                            s2 = 0.0
                            for b in range(kxi):
                                s2 += nmat[a, b] * bmat[c, b]
                            s1 += ta * s2
                    grad[gi] += n * (s1 - 2.0 * ut * mu[c])

    # B-template entries: dB = (R e_r) e_c'
    for r in range(p):
        for c in range(kxi):
            bi = bt_i[r, c]
            if bi >= 0:
                if has_gamma:
                    ut = 0.0
                    s1 = 0.0
                    for k in range(p):
                        tk = rmat[k, r]
                        ut += u[k] * tk
                        s1 += tk * nmat[k, c]
                else:
                    ut = u[r]
                    s1 = nmat[r, c]
                g = s1
                if c < kz:
                    g -= 2.0 * ut * theta[muz_i[c]]
                grad[bi] += n * g

    # phi entries (both triangles carry the index, so off-diagonal slots
    # accumulate M[a,b] + M[b,a] as required by the symmetric placement)
    for a in range(kxi):
        for b in range(kxi):
            pi = phi_i[a, b]
            if pi >= 0:
                grad[pi] += n * mmat[a, b]

    # factor means: dmu = B[:, c]
    for c in range(kz):
        s = 0.0
        for k in range(p):
            s += bmat[k, c] * u[k]
        grad[muz_i[c]] += n * (-2.0 * s)

    return True, value
