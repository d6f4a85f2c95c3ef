"""Reconstruction and retrieval metrics, perturbation studies, truncation
curves, configuration sweeps and the decode latency benchmark."""

import os
import platform
import statistics
import time

import numpy as np

from .errors import ConfigError, InvariantError, RangeError, ShapeError
from .model import (
    decode_parallel,
    decode_sequential,
    decode_truncated,
    default_workers,
    encode_batch,
    random_model,
)

STRATEGIES = ("second_nearest", "frozen_instruction", "non_accumulated")
FREEZE_AFTER = 3
_KNN_CHUNK = 256


def reconstruct(X, model, decode_fn=decode_parallel):
    codes = encode_batch(np.asarray(X), model).codes
    return decode_fn(codes, model)


def mse(test, model, decode_fn=decode_parallel):
    """Mean of ||x - decode(encode(x))||^2 accumulated in double precision."""
    X = np.asarray(test)
    if X.ndim != 2 or len(X) == 0:
        raise ShapeError("mse needs a non-empty (n, D) matrix")
    diff = X.astype(np.float64) - reconstruct(X, model, decode_fn).astype(np.float64)
    return float(np.einsum("nd,nd->n", diff, diff).mean())


# ---------------------------------------------------------------------------
# retrieval


def _sq_dists64(Q, B):
    # explicit differences in double: no cancellation from the expanded form
    Q = Q.astype(np.float64)
    B = B.astype(np.float64)
    out = np.empty((len(Q), len(B)))
    for i, q in enumerate(Q):
        diff = B - q
        out[i] = np.einsum("bd,bd->b", diff, diff)
    return out


def brute_force_knn(queries, base, k):
    """Exact k nearest base rows per query under squared L2.

    Ties are broken by the lower base index. Returns an (nq, k) int64 array.
    """
    Q, B = np.atleast_2d(queries), np.atleast_2d(base)
    if Q.shape[1] != B.shape[1]:
        raise ShapeError(f"query width {Q.shape[1]} != base width {B.shape[1]}")
    if not 1 <= k <= len(B):
        raise RangeError(f"k={k} must lie in [1, {len(B)}]")
    out = np.empty((len(Q), k), dtype=np.int64)
    for s in range(0, len(Q), _KNN_CHUNK):
        d = _sq_dists64(Q[s:s + _KNN_CHUNK], B)
        for i, row in enumerate(d):
            if k < len(B):
                kth = np.partition(row, k - 1)[k - 1]
                cand = np.flatnonzero(row <= kth)
            else:
                cand = np.arange(len(B))
            # lexsort keys: last is primary
            order = np.lexsort((cand, row[cand]))
            out[s + i] = cand[order[:k]]
    return out


def ground_truth(queries, base):
    """True nearest neighbour of every query (the recall reference)."""
    return brute_force_knn(queries, base, 1)[:, 0]


def recall_at_k(model, queries, base, gt, k_list=(1, 10, 100)):
    """Fraction of queries whose true neighbour ``gt`` is among the top-k
    reconstructed base vectors. Raw queries are compared with decoded base
    vectors; ``model=None`` searches the raw base (a lossless model)."""
    k_list = sorted(set(int(k) for k in k_list))
    base = np.asarray(base)
    if k_list[0] < 1 or k_list[-1] > len(base):
        raise RangeError(f"k values must lie in [1, {len(base)}]")
    gt = np.asarray(gt).reshape(-1)
    if len(gt) != len(queries):
        raise ShapeError("one ground-truth entry per query is required")
    searched = base if model is None else reconstruct(base, model)
    top = brute_force_knn(queries, searched, k_list[-1])
    hits = top == gt[:, None]
    return {k: float(hits[:, :k].any(axis=1).mean()) for k in k_list}


# ---------------------------------------------------------------------------
# perturbations


def perturbed_encode(x, model, strategy):
    """Encode with one stream perturbed. Returns ``(codes, sq_norms)`` where
    ``sq_norms`` is (B, M+1): ||r^1||^2 .. ||r^{M+1}||^2 per vector."""
    if strategy is None or strategy == "clean":
        res = encode_batch(np.atleast_2d(x), model)
    elif strategy == "second_nearest":
        res = encode_batch(np.atleast_2d(x), model, select="second")
    elif strategy == "frozen_instruction":
        res = encode_batch(np.atleast_2d(x), model, instruction="frozen", freeze_after=FREEZE_AFTER)
    elif strategy == "non_accumulated":
        res = encode_batch(np.atleast_2d(x), model, instruction="current")
    else:
        raise ConfigError(f"unknown perturbation strategy {strategy!r}; expected one of {STRATEGIES}")
    return res.codes, res.step_sq_norms


def stepwise_mse(X, model, strategy=None):
    """Mean squared residual after each of the M steps."""
    _, s = perturbed_encode(X, model, strategy)
    return s[:, 1:].mean(axis=0).tolist()


def perturbation_table(X, model):
    return {name: stepwise_mse(X, model, None if name == "clean" else name)
            for name in ("clean",) + STRATEGIES}


# ---------------------------------------------------------------------------
# dynamic rates


def truncation_curve(model, test, workers=None):
    """MSE of the reconstruction from the first m indices, m = 1..M."""
    X = np.asarray(test)
    codes = encode_batch(X, model).codes
    X64 = X.astype(np.float64)
    curve = []
    for m_stop in range(1, model.M + 1):
        diff = X64 - decode_truncated(codes, m_stop, model, workers=workers).astype(np.float64)
        curve.append(float(np.einsum("nd,nd->n", diff, diff).mean()))
    return curve


# ---------------------------------------------------------------------------
# latency


def hardware_info():
    try:
        usable = len(os.sched_getaffinity(0))
    except AttributeError:
        usable = os.cpu_count()
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or None,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "usable_cores": usable,
    }


def _median_us(fn, warmup, runs, batch):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) / batch * 1e6


def latency_bench(model, batch=4096, warmup=10, runs=100, seed=0, workers=None,
                  include_encode=True, encode_runs=None, blas_threads=1):
    """Median per-vector latency (microseconds) of encode, sequential decode
    and parallel decode on random codes.

    BLAS is pinned to ``blas_threads`` threads for every timed call so the
    comparison isolates the step-level parallelism of the decoder.
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    codes = rng.integers(0, model.K, size=(batch, model.M))
    workers = default_workers() if workers is None else workers
    with threadpool_limits(limits=blas_threads):
        seq = decode_sequential(codes, model)
        par = decode_parallel(codes, model, workers=workers)
        scale = max(float(np.abs(seq).max()), 1e-30)
        max_rel = float(np.abs(seq - par).max()) / scale
        if max_rel > 1e-6:
            raise InvariantError(f"parallel decode deviates from sequential by {max_rel:.3g}")
        report = {
            "batch": batch,
            "warmup": warmup,
            "runs": runs,
            "workers": workers,
            "blas_threads": blas_threads,
            "dims": model.dims(),
            "decode_sequential_us": _median_us(lambda: decode_sequential(codes, model), warmup, runs, batch),
            "decode_parallel_us": _median_us(lambda: decode_parallel(codes, model, workers=workers),
                                             warmup, runs, batch),
            "max_rel_deviation": max_rel,
        }
        if include_encode:
            X = seq + 0.01 * rng.standard_normal(seq.shape).astype(seq.dtype)
            n = runs if encode_runs is None else encode_runs
            report["encode_us"] = _median_us(lambda: encode_batch(X, model), min(warmup, n), n, batch)
    report["speedup"] = report["decode_sequential_us"] / report["decode_parallel_us"]
    report["hardware"] = hardware_info()
    return report


# ---------------------------------------------------------------------------
# sweeps


def count_params(model):
    return int(sum(v.size for v in model.params().values() if v is not None))


def sweep(configs, splits, train_config, base_dims, rq=None, bench=None):
    """Train one model per ``{N, L, De}`` override of ``base_dims`` on the
    same splits and seed; one result row per config.

    ``bench`` is an optional dict of :func:`latency_bench` keyword arguments;
    when given, each row also carries decode latencies.
    """
    from dataclasses import replace

    from .rq import rq_train
    from .training import train

    train_X = splits["train"] if isinstance(splits, dict) else splits.train
    test_X = splits["test"] if isinstance(splits, dict) else splits.test
    if rq is None:
        rq = rq_train(train_X, base_dims.M, base_dims.K, seed=train_config.seed)
    rows = []
    for cfg in configs:
        unknown = set(cfg) - {"N", "L", "De"}
        if unknown:
            raise ConfigError(f"sweep configs may only set N, L, De; got {sorted(unknown)}")
        dims = replace(base_dims, **cfg)
        model, history = train(splits, train_config, dims, rq=rq)
        row = {
            "N": dims.N,
            "L": dims.L,
            "De": model.De,
            "params": count_params(model),
            "test_mse": mse(test_X, model),
            "best_epoch": history.best_epoch,
        }
        if bench is not None:
            b = latency_bench(model, **bench)
            row.update(decode_sequential_us=b["decode_sequential_us"], decode_parallel_us=b["decode_parallel_us"])
        rows.append(row)
    return rows


def bench_model(M=16, N=4, L=2, D=32, K=64, H=64, seed=0):
    """Random model of the shape used for the decode speedup measurement."""
    return random_model(D=D, K=K, M=M, N=N, L=L, H=H, seed=seed)
