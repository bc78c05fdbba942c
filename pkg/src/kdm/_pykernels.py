"""Pure numpy kernel core (fallback for the compiled ``_ckernels``).

Each entry of a result depends only on its own pair of rows, so chunking
the work never changes a value: a 1x1 call reproduces any entry of an
m x m' call bit for bit.
"""
import numpy as np

NAME = "numpy"

# elements of the temporary (rows, m', n) block per chunk
_CHUNK = 1 << 20


def _rows_per_chunk(mp, n):
    return max(1, _CHUNK // max(1, mp * n))


def sqdist(X, Y):
    m, mp, n = X.shape[0], Y.shape[0], X.shape[1]
    out = np.empty((m, mp))
    step = _rows_per_chunk(mp, n)
    for s in range(0, m, step):
        diff = X[s:s + step, None, :] - Y[None, :, :]
        np.multiply(diff, diff, out=diff)
        out[s:s + step] = diff.sum(axis=-1)
    return out


def rbf_gram_sq(X, Y, sigma, return_dist=False):
    d2 = sqdist(X, Y)
    k = np.exp(-(d2 * (1.0 / (sigma * sigma))))
    if return_dist:
        return k, d2
    return k


def _rowsq(X):
    return (X * X).sum(axis=-1)


def cos_gram_sq(X, Y):
    m, mp, n = X.shape[0], Y.shape[0], X.shape[1]
    dots = np.empty((m, mp))
    step = _rows_per_chunk(mp, n)
    for s in range(0, m, step):
        prod = X[s:s + step, None, :] * Y[None, :, :]
        dots[s:s + step] = prod.sum(axis=-1)
    nx = _rowsq(X)
    ny = _rowsq(Y)
    return (dots * dots) / (nx[:, None] * ny[None, :])
