"""Training: normalized residual loss, hand-written reverse-mode gradients,
Adam, warm start from static RQ and the early-stopped epoch loop.

Codeword indices chosen by the greedy encoder are constants of the forward
pass. Gradients flow through the selected dynamic codewords into the base
codebooks and step transforms, and through the instruction vectors into the
expert codebooks of earlier steps.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InvariantError, NumericalError, ShapeError
from .model import RqMoeModel, encode_batch, transform_rows
from .numerics import sq_norms
from .rq import RqModel, rq_train

log = logging.getLogger(__name__)

LOSS_KINDS = ("nrl", "per_step_mse", "final_mse")
NRL_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 1024
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    max_epochs: int = 100
    loss: str = "nrl"
    seed: int = 0
    nrl_eps: float = NRL_EPS

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")


@dataclass
class ModelDims:
    M: int = 8
    K: int = 256
    De: int | None = None  # None means D_e = D
    N: int = 1
    L: int = 4
    H: int = 256
    transforms: bool = True


# ---------------------------------------------------------------------------
# losses


@dataclass
class NrlTerms:
    residual_sq_norms: np.ndarray  # (M+1,) or (B, M+1)
    epsilon: float = NRL_EPS


def _check_norms(s, eps):
    s = np.asarray(s, dtype=np.float64)
    if eps <= 0:
        raise InvariantError("epsilon must be > 0")
    if np.any(s < 0):
        raise InvariantError("squared residual norms must be >= 0")
    return s


def nrl_loss(terms):
    """Sum over steps of ``log(1 + |r^{m+1}|^2 / (|r^m|^2 + eps))``; batch mean
    when given a (B, M+1) array."""
    s = _check_norms(terms.residual_sq_norms, terms.epsilon)
    per = np.log1p(s[..., 1:] / (s[..., :-1] + terms.epsilon)).sum(axis=-1)
    return float(np.mean(per))


def nrl_residual_gradient(r_next, r_prev_sq_norm, eps=NRL_EPS):
    """d/dr of ``log(1 + |r|^2 / (c + eps))`` with ``c`` held constant."""
    if r_prev_sq_norm < 0:
        raise InvariantError("previous squared norm must be >= 0")
    r_next = np.asarray(r_next, dtype=np.float64)
    return 2.0 * r_next / (r_prev_sq_norm + float(r_next @ r_next) + eps)


def loss_from_norms(s, kind, eps=NRL_EPS):
    """Batch-mean loss from (B, M+1) squared residual norms."""
    s = np.asarray(s, dtype=np.float64)
    if kind == "nrl":
        return nrl_loss(NrlTerms(s, eps))
    if kind == "per_step_mse":
        return float(s[:, 1:].sum(axis=1).mean())
    if kind == "final_mse":
        return float(s[:, -1].mean())
    raise ConfigError(f"unknown loss kind {kind!r}")


def _residual_grads(residuals, s, kind, eps, stop_gradient):
    """Per-vector dloss/dr^{m+1} for m = 1..M, shape (B, M, D)."""
    G = np.zeros(residuals.shape, dtype=np.float64)
    if kind == "nrl":
        coef = 2.0 / (s[:, :-1] + eps + s[:, 1:])
        G += coef[:, :, None] * residuals
        if not stop_gradient:
            # term m+1 also depends on |r^{m+1}|^2 through its denominator
            den = s[:, 1:-1] + eps
            coef2 = -2.0 * s[:, 2:] / (den * (den + s[:, 2:]))
            G[:, :-1] += coef2[:, :, None] * residuals[:, :-1]
    elif kind == "per_step_mse":
        G += 2.0 * residuals
    elif kind == "final_mse":
        G[:, -1] = 2.0 * residuals[:, -1]
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    return G


# ---------------------------------------------------------------------------
# forward / backward


class ForwardBackward(NamedTuple):
    loss: float
    grads: dict
    codes: np.ndarray
    sq_norms: np.ndarray  # (B, M+1)


def _transform_backward(st, cache, G, g, t):
    """Accumulate parameter gradients of step transform ``t`` into ``g``;
    return gradients w.r.t. the base codeword and the instruction."""
    c, I, z, alpha = cache["c"], cache["I"], cache["z"], cache["alpha"]
    D = c.shape[-1]
    dc = G.copy()
    dz = np.zeros_like(z)
    dalpha = np.empty_like(alpha)
    for n, (h, layers) in enumerate(cache["outs"]):
        dalpha[:, n] = np.einsum("bd,bd->b", G, h)
        dh = alpha[:, n:n + 1] * G
        for l in range(len(layers) - 1, -1, -1):
            h_prev, a, u = layers[l]
            g["contract_w"][t, n, l] += dh.T @ u
            g["contract_b"][t, n, l] += dh.sum(axis=0)
            da = (dh @ st.contract_w[n, l]) * (a > 0)
            g["expand_w"][t, n, l] += da.T @ h_prev
            g["expand_b"][t, n, l] += da.sum(axis=0)
            dh = dh + da @ st.expand_w[n, l]
        dz += dh
    dlogits = alpha * (dalpha - np.einsum("bn,bn->b", alpha, dalpha)[:, None])
    g["gate_w"][t] += dlogits.T @ z
    g["gate_b"][t] += dlogits.sum(axis=0)
    dz += dlogits @ st.gate_w
    g["proj_w"][t, :, :D] += dz.T @ c
    g["proj_b"][t] += dz.sum(axis=0)
    dc += dz @ st.proj_w[:, :D]
    if I.shape[-1]:
        g["proj_w"][t, :, D:] += dz.T @ I
        dI = dz @ st.proj_w[:, D:]
    else:
        dI = np.zeros_like(I)
    return dc, dI


def forward_backward(batch, model, loss_kind="nrl", eps=NRL_EPS, codes=None, stop_gradient=True):
    """Loss and batch-averaged gradients for every model parameter.

    ``codes`` fixes the indices; by default they come from greedy encoding.
    ``stop_gradient=False`` differentiates through the NRL denominators and
    exists only to test the stop-gradient rule.
    """
    X = np.asarray(batch)
    if X.ndim != 2 or X.shape[1] != model.D:
        raise ShapeError(f"batch must be (B, {model.D}), got {X.shape}")
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    if codes is None:
        codes = encode_batch(X, model).codes
    B, M, dtype = X.shape[0], model.M, model.dtype

    r = X.astype(dtype, copy=True)
    residuals = np.empty((B, M, model.D), dtype=dtype)
    I = np.zeros((B, model.De), dtype=dtype)
    caches = [None] * M
    for m in range(M):
        idx = codes[:, m]
        c = model.base[m][idx]
        if m > 0 and model.has_transforms:
            caches[m] = {}
            c = transform_rows(model.step_transform(m + 1), c, I, caches[m])
        r = r - c
        residuals[:, m] = r
        if model.De and m + 1 < M:
            I = I + model.expert[m][idx]
    s = np.empty((B, M + 1))
    s[:, 0] = sq_norms(X.astype(dtype))
    s[:, 1:] = sq_norms(residuals)
    bad = ~np.isfinite(s).all(axis=0)
    if bad.any():
        step = int(np.argmax(bad))
        raise NumericalError(f"non-finite residual at step {step}", step=step)
    loss = loss_from_norms(s, loss_kind, eps)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss", step=M)

    Gr = _residual_grads(residuals.astype(np.float64), s, loss_kind, eps, stop_gradient)
    # r^{m+1} = x - sum_{p<=m} c~^p  =>  dL/dc~^p = -sum_{m>=p} dL/dr^{m+1}
    Gc = (-np.cumsum(Gr[:, ::-1], axis=1)[:, ::-1] / B).astype(dtype)

    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    upstream = np.zeros((B, model.De), dtype=dtype)  # sum of dL/dI over later steps
    for m in range(M - 1, -1, -1):
        idx = codes[:, m]
        if model.De:
            np.add.at(grads["expert"][m], idx, upstream)
        if m > 0 and model.has_transforms:
            dc, dI = _transform_backward(model.step_transform(m + 1), caches[m], Gc[:, m], grads, m - 1)
            upstream = upstream + dI
        else:
            dc = Gc[:, m]
        np.add.at(grads["base"][m], idx, dc)
    return ForwardBackward(loss, grads, codes, s)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``;
    the inputs are left untouched."""
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new_params, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_params[k] = (p - config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_eps)).astype(p.dtype)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# initialisation


def warm_start(rq, dims, data_std=None, seed=0, dtype=np.float32):
    """RQ-MoE model that reproduces ``rq`` exactly.

    Base codebooks are copied. Expert codebooks get small noise scaled by the
    data spread. Projections, contract layers and gate biases start at zero
    so every dynamic codeword equals its base codeword; gate and expand
    weights get fan-in scaled uniform values.
    """
    M, K, D = rq.codebooks.shape
    if (dims.M, dims.K) != (M, K):
        raise ConfigError(f"RQ model has M={M}, K={K}; dims ask for M={dims.M}, K={dims.K}")
    base = rq.codebooks.astype(dtype, copy=True)
    if not dims.transforms:
        return RqMoeModel(base, np.zeros((M, K, 0), dtype=dtype))
    De = D if dims.De is None else dims.De
    N, L, H = dims.N, dims.L, dims.H
    if min(N, L, H) < 1 or De < 0:
        raise ConfigError("N, L, H must be >= 1 and D_e >= 0")
    rng = np.random.default_rng(seed)
    std = np.ones(D) if data_std is None else np.asarray(data_std, dtype=np.float64)
    if std.ndim == 0:
        std = np.full(D, float(std))
    scale = std if De == D else np.full(De, std.mean())
    expert = (0.01 * scale * rng.standard_normal((M, K, De))).astype(dtype)
    T = M - 1

    def kaiming(*shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return RqMoeModel(
        base=base,
        expert=expert,
        proj_w=np.zeros((T, D, D + De), dtype=dtype),
        proj_b=np.zeros((T, D), dtype=dtype),
        gate_w=kaiming(T, N, D, fan_in=D),
        gate_b=np.zeros((T, N), dtype=dtype),
        expand_w=kaiming(T, N, L, H, D, fan_in=D),
        expand_b=kaiming(T, N, L, H, fan_in=D),
        contract_w=np.zeros((T, N, L, D, H), dtype=dtype),
        contract_b=np.zeros((T, N, L, D), dtype=dtype),
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class History:
    records: list = field(default_factory=list)

    def append(self, rec):
        self.records.append(rec)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    @property
    def best_epoch(self):
        return min(self.records, key=lambda r: r["valid_loss"])["epoch"]

    def relative_expert_gradients(self):
        """Per-step expert-codebook gradient norms averaged over all training
        iterations, divided by the step-1 average."""
        sums, iters = None, 0
        for rec in self.records:
            if rec.get("iterations"):
                g = np.asarray(rec["expert_grad_norm"]) * rec["iterations"]
                sums = g if sums is None else sums + g
                iters += rec["iterations"]
        if not iters:
            return []
        avg = sums / iters
        return (avg / avg[0]).tolist() if avg[0] > 0 else avg.tolist()


def evaluate_loss(data, model, kind, eps=NRL_EPS):
    res = encode_batch(np.asarray(data), model)
    return loss_from_norms(res.step_sq_norms, kind, eps), res.step_sq_norms


def train(splits, config, dims, rq=None, on_epoch=None):
    """Warm-start from RQ, then Adam on shuffled mini-batches with early
    stopping on the validation loss. Returns ``(best_model, history)``.

    ``splits`` needs ``train`` and ``valid`` arrays (attributes or keys).
    ``on_epoch`` is called with each history record as it is produced.
    """
    get = (lambda k: splits[k]) if isinstance(splits, dict) else (lambda k: getattr(splits, k))
    X = np.asarray(get("train"), dtype=np.float32)
    V = np.asarray(get("valid"), dtype=np.float32)
    if len(X) == 0 or len(V) == 0:
        raise ConfigError("train and valid splits must be non-empty")
    if rq is None:
        rq = rq_train(X, dims.M, dims.K, seed=config.seed)
    if not isinstance(rq, RqModel):
        raise ConfigError("rq must be an RqModel")
    model = warm_start(rq, dims, data_std=X.std(axis=0), seed=config.seed)
    history = History()

    def emit(rec):
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)

    valid_loss, s = evaluate_loss(V, model, config.loss, config.nrl_eps)
    emit(_record(0, None, valid_loss, s, None, 0))
    if config.max_epochs == 0:
        return model, history

    # the warm start can be returned, but patience counts trained epochs only
    best_loss, best_params = valid_loss, model.copy().params()
    trained_best, stale = math.inf, 0
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(X))
        losses, gnorm, iters = [], np.zeros(model.M), 0
        for start in range(0, len(X), config.batch_size):
            batch = X[perm[start:start + config.batch_size]]
            try:
                fb = forward_backward(batch, model, config.loss, config.nrl_eps)
            except NumericalError as exc:
                exc.snapshot.update(epoch=epoch, batch_start=start, recent_losses=losses[-5:])
                raise
            params, state = adam_step(model.params(), fb.grads, state, config)
            bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
            if bad:
                raise NumericalError(f"non-finite parameters after update: {', '.join(bad)}", snapshot={
                    "epoch": epoch, "batch_start": start, "recent_losses": (losses + [fb.loss])[-5:]})
            model = model.with_params(params)
            losses.append(fb.loss)
            gnorm += np.sqrt(np.einsum("mkd,mkd->m", fb.grads["expert"].astype(np.float64),
                                       fb.grads["expert"].astype(np.float64)))
            iters += 1
        valid_loss, s = evaluate_loss(V, model, config.loss, config.nrl_eps)
        if not math.isfinite(valid_loss):
            raise NumericalError("validation loss diverged", snapshot={"epoch": epoch})
        emit(_record(epoch, float(np.mean(losses)), valid_loss, s, gnorm / iters, iters))
        log.info("epoch %d train %.6g valid %.6g", epoch, np.mean(losses), valid_loss)
        if valid_loss < best_loss:
            best_loss, best_params = valid_loss, model.copy().params()
        if valid_loss < trained_best:
            trained_best, stale = valid_loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return model.with_params(best_params), history


def _record(epoch, train_loss, valid_loss, s, gnorm, iters):
    return {
        "epoch": epoch,
        "train_loss": train_loss,
        "valid_loss": valid_loss,
        "valid_mse": float(s[:, -1].mean()),
        "step_residual_sq": s[:, 1:].mean(axis=0).tolist(),
        "expert_grad_norm": None if gnorm is None else gnorm.tolist(),
        "iterations": iters,
    }


def config_dict(config, dims):
    return {**asdict(config), **{f"dims.{k}": v for k, v in asdict(dims).items()}}
