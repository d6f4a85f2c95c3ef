"""Static residual quantization: k-means, greedy RQ training, encode/decode."""

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, InvalidCodeError, ShapeError
from .numerics import ACCUM_DTYPE, batch_argmin_l2, sq_dists, sq_norms

_CHUNK = 2048


@dataclass
class StaticCodebook:
    entries: np.ndarray  # (K, D)
    step_index: int = 1
    distortion: float = float("nan")

    @property
    def K(self):
        return self.entries.shape[0]


@dataclass
class RqModel:
    codebooks: np.ndarray  # (M, K, D)

    def __post_init__(self):
        if self.codebooks.ndim != 3 or self.codebooks.shape[0] < 1 or self.codebooks.shape[1] < 1:
            raise ShapeError(f"RqModel codebooks must be (M>=1, K>=1, D), got {self.codebooks.shape}")

    @property
    def M(self):
        return self.codebooks.shape[0]

    @property
    def K(self):
        return self.codebooks.shape[1]

    @property
    def D(self):
        return self.codebooks.shape[2]

    def step(self, m):
        return StaticCodebook(self.codebooks[m - 1], step_index=m)


def code_dtype(K):
    return np.uint8 if K <= 256 else np.uint16


def _assign(X, centroids):
    labels = np.empty(X.shape[0], dtype=np.int64)
    dist = np.empty(X.shape[0], dtype=ACCUM_DTYPE)
    for s in range(0, X.shape[0], _CHUNK):
        labels[s:s + _CHUNK], dist[s:s + _CHUNK] = batch_argmin_l2(X[s:s + _CHUNK], centroids)
    return labels, dist


def _kmeanspp(X, K, rng):
    n = X.shape[0]
    centroids = np.empty((K, X.shape[1]), dtype=X.dtype)
    centroids[0] = X[rng.integers(n)]
    closest = sq_dists(X, centroids[:1])[:, 0]
    for k in range(1, K):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than K; duplicates are harmless
            centroids[k] = X[rng.integers(n)]
        else:
            centroids[k] = X[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, sq_dists(X, centroids[k:k + 1])[:, 0])
    return centroids


def kmeans_fit(data, K, max_iters=25, seed=0, tol=1e-3):
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iters`` or once fewer than ``tol`` of the points change
    cluster. An empty cluster is re-seeded with the point of the currently
    largest cluster that lies farthest from its centroid.
    """
    X = np.asarray(data, dtype=np.float64)
    n = X.shape[0]
    if n < K:
        raise InsufficientDataError(f"k-means needs at least K={K} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(X, K, rng)
    labels, dist = _assign(X, centroids)
    for _ in range(max_iters):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        counts = np.bincount(labels, minlength=K)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for k in np.flatnonzero(~nonempty):
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(dist[members])]
            centroids[k] = X[far]
            labels[far] = k
            dist[far] = 0.0
            counts[big] -= 1
            counts[k] = 1
        new_labels, dist = _assign(X, centroids)
        changed = np.count_nonzero(new_labels != labels)
        labels = new_labels
        if changed < tol * n:
            break
    out_dtype = data.dtype if np.issubdtype(np.asarray(data).dtype, np.floating) else np.float32
    return StaticCodebook(centroids.astype(out_dtype), distortion=float(dist.mean()))


def rq_train(data, M, K, seed=0, max_iters=25):
    """Greedy RQ: step m runs k-means on the residuals left by steps 1..m-1."""
    X = np.asarray(data)
    residual = X.astype(np.float64, copy=True)
    books = []
    for m in range(M):
        cb = kmeans_fit(residual, K, max_iters=max_iters, seed=seed + m)
        idx, _ = _assign(residual, cb.entries)
        residual -= cb.entries[idx]
        books.append(cb.entries)
    dtype = X.dtype if np.issubdtype(X.dtype, np.floating) else np.float32
    return RqModel(np.stack(books).astype(dtype))


def rq_encode(x, model, return_residual=False):
    """Greedy nearest-codeword encoding. Accepts one vector or a (B, D) batch."""
    x = np.asarray(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.D:
        raise ShapeError(f"rq_encode: expected width {model.D}, got shape {x.shape}")
    codes = np.empty((X.shape[0], model.M), dtype=code_dtype(model.K))
    residual = X.astype(model.codebooks.dtype, copy=True)
    for s in range(0, X.shape[0], _CHUNK):
        r = residual[s:s + _CHUNK]
        for m in range(model.M):
            idx, _ = batch_argmin_l2(r, model.codebooks[m])
            codes[s:s + _CHUNK, m] = idx
            r -= model.codebooks[m][idx]
    if single:
        codes, residual = codes[0], residual[0]
    return (codes, residual) if return_residual else codes


def check_codes(codes, M, K):
    codes = np.asarray(codes)
    if codes.shape[-1] != M:
        raise InvalidCodeError(f"code length {codes.shape[-1]} != M={M}")
    if codes.size and (codes.min() < 0 or codes.max() >= K):
        raise InvalidCodeError(f"code index out of range [0, {K})")
    return codes


def rq_decode(code, model):
    """Sum of the selected codewords, added in step order."""
    code = check_codes(code, model.M, model.K)
    out = np.zeros(code.shape[:-1] + (model.D,), dtype=model.codebooks.dtype)
    for m in range(model.M):
        out += model.codebooks[m][code[..., m]]
    return out


def rq_step_mse(data, model):
    """Mean squared residual after each step (length M), double accumulation."""
    codes = rq_encode(data, model)
    r = np.asarray(data, dtype=model.codebooks.dtype).copy()
    out = []
    for m in range(model.M):
        r -= model.codebooks[m][codes[:, m]]
        out.append(float(sq_norms(r).mean()))
    return out
