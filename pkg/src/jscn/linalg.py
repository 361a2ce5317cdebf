"""Dense symmetric eigensolver.

Householder reduction to tridiagonal form followed by implicit-shift QL
iteration with eigenvector accumulation. Everything is float64 and dense,
which is fine for graphs up to a few thousand nodes.
"""

import math

import numpy as np
from scipy.linalg.blas import drot

from .errors import ConvergenceError

_EPS = np.finfo(np.float64).eps


def tridiagonalize(a):
    """Reduce symmetric ``a`` to tridiagonal ``T = Q^T a Q``.

    Returns ``(diag, offdiag, q)`` where ``offdiag[i] = T[i + 1, i]`` and
    ``q`` is orthogonal.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    q = np.eye(n)
    for k in range(n - 2):
        x = a[k + 1:, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        alpha = -math.copysign(norm_x, x[0])
        v = x.copy()
        v[0] -= alpha
        norm_v = np.linalg.norm(v)
        if norm_v == 0.0:
            continue
        v /= norm_v
        sub = a[k + 1:, k + 1:]
        p = sub @ v
        q_vec = p - (v @ p) * v
        sub -= 2.0 * (np.outer(v, q_vec) + np.outer(q_vec, v))
        a[k + 1:, k] = 0.0
        a[k, k + 1:] = 0.0
        a[k + 1, k] = a[k, k + 1] = alpha
        blk = q[:, k + 1:]
        blk -= 2.0 * np.outer(blk @ v, v)
    diag = np.diag(a).copy()
    offdiag = np.diag(a, -1).copy()
    return diag, offdiag, q


def tridiagonal_ql(diag, offdiag, vectors, max_iter):
    """Diagonalize a symmetric tridiagonal matrix in place.

    ``vectors`` holds the basis to rotate, one vector per ROW (row ``i``
    is the current estimate of eigenvector ``i``). Rows keep the rotations
    on contiguous memory. Returns the number of QL iterations used.
    """
    # plain lists: scalar indexing into ndarrays dominates the runtime
    d = [float(x) for x in diag]
    n = len(d)
    e = [float(x) for x in offdiag] + [0.0]
    z = vectors
    hypot = math.hypot
    rotate = z.shape[1] > 0
    total = 0
    for l in range(n):
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= _EPS * dd:
                    break
                m += 1
            if m == l:
                break
            total += 1
            if total > max_iter:
                diag[:] = d
                return -1
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            deflated = False
            for i in range(m - 1, l - 1, -1):
                f = s * e[i]
                b = c * e[i]
                r = hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                if rotate:
                    # in place: z[i+1] <- c z[i+1] + s z[i], z[i] <- c z[i] - s z[i+1]
                    drot(z[i + 1], z[i], c, s, overwrite_x=True, overwrite_y=True)
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    diag[:] = d
    return total


def eigh(a, max_iter_per_dim=100):
    """Eigen-decompose symmetric ``a``.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors
    as columns. Column signs are fixed so that the largest-magnitude entry
    of each column is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    diag, offdiag, q = tridiagonalize(a)
    rows = np.ascontiguousarray(q.T)
    used = tridiagonal_ql(diag, offdiag, rows, max_iter=max_iter_per_dim * n)
    vecs = rows.T
    if used < 0:
        residual = float(np.linalg.norm(a @ vecs - vecs * diag))
        raise ConvergenceError("eigensolver did not converge", residual)
    order = np.argsort(diag, kind="stable")
    vals = diag[order]
    vecs = np.ascontiguousarray(vecs[:, order])
    return vals, canonicalize_signs(vecs)


def canonicalize_signs(vecs):
    """Flip columns so each column's largest-|entry| is positive."""
    if vecs.size == 0:
        return vecs
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs
