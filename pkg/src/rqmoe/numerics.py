"""Small dense kernels shared by the quantizers.

Everything here is a pure function of numpy arrays. Matrices follow the
``out = W @ v + b`` convention, so a weight of shape ``(out, in)`` maps an
``in``-vector to an ``out``-vector. Batched helpers accept any number of
leading dimensions.
"""

import numpy as np

from .errors import ShapeError

COMPUTE_DTYPE = np.float32
ACCUM_DTYPE = np.float64


def matvec(W, v, bias=None):
    W = np.asarray(W)
    v = np.asarray(v)
    if W.ndim != 2 or v.ndim != 1:
        raise ShapeError(f"matvec expects a matrix and a vector, got {W.shape} and {v.shape}")
    if W.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: W has {W.shape[1]} columns but v has length {v.shape[0]}")
    out = W @ v
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (W.shape[0],):
            raise ShapeError(f"matvec: bias shape {bias.shape} != ({W.shape[0]},)")
        out = out + bias
    return out


def linear(x, W, b=None):
    """Apply ``W`` (out, in) and ``b`` to the last axis of ``x``."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-width {W.shape[1]}")
    lead = x.shape[:-1]
    out = (x.reshape(-1, x.shape[-1]) @ W.T).reshape(*lead, W.shape[0])
    if b is not None:
        out += b
    return out


def softmax(v, axis=-1):
    v = np.asarray(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def relu(v):
    return np.maximum(v, 0)


def argmin_l2(query, table):
    """Index and squared distance of the row of ``table`` closest to ``query``.

    Ties go to the lowest index.
    """
    query = np.asarray(query)
    table = np.asarray(table)
    if table.ndim != 2 or table.shape[0] == 0:
        raise ShapeError(f"argmin_l2 needs a non-empty 2-d table, got shape {table.shape}")
    if query.shape != (table.shape[1],):
        raise ShapeError(f"argmin_l2: query shape {query.shape} vs table width {table.shape[1]}")
    d = sq_dists(query[None, :], table)[0]
    k = int(np.argmin(d))
    return k, float(d[k])


def sq_dists(queries, table):
    """Squared L2 distances, ``queries`` (B, D) against a shared ``table`` (K, D) or
    per-query tables (B, K, D). Computed from explicit differences."""
    if table.ndim == 2:
        diff = queries[:, None, :] - table[None, :, :]
    else:
        diff = queries[:, None, :] - table
    return np.einsum("bkd,bkd->bk", diff, diff)


def batch_argmin_l2(queries, table):
    """Row-wise :func:`argmin_l2`; returns ``(indices, squared_distances)``."""
    d = sq_dists(queries, table)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(d.shape[0]), idx]


def sq_norms(x):
    """Squared norms along the last axis, accumulated in double precision."""
    x = np.asarray(x, dtype=ACCUM_DTYPE)
    return np.einsum("...d,...d->...", x, x)
