"""RQ-MoE model: hyper-dimensional codebooks, instruction stream, MoE codebook
transform, greedy encoding and the two decoders.

Parameters are stored as stacked arrays (one leading axis over steps) so that
training, serialization and the step-parallel decoder can work on whole
tensors. :class:`StepTransform` and :class:`BottleneckExpert` are views into
those stacks for code that wants to look at a single step or expert.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InvariantError, RangeError, ShapeError
from .numerics import linear, relu, softmax, sq_dists, sq_norms
from .rq import RqModel, check_codes, code_dtype

TRANSFORM_FIELDS = (
    "proj_w", "proj_b", "gate_w", "gate_b",
    "expand_w", "expand_b", "contract_w", "contract_b",
)
PARAM_FIELDS = ("base", "expert") + TRANSFORM_FIELDS

_ENCODE_CHUNK = 256


@dataclass
class BottleneckExpert:
    expand_w: np.ndarray  # (L, H, D)
    expand_b: np.ndarray  # (L, H)
    contract_w: np.ndarray  # (L, D, H)
    contract_b: np.ndarray  # (L, D)

    @property
    def L(self):
        return self.expand_w.shape[0]


@dataclass
class StepTransform:
    proj_w: np.ndarray  # (D, D + De)
    proj_b: np.ndarray  # (D,)
    gate_w: np.ndarray  # (N, D)
    gate_b: np.ndarray  # (N,)
    expand_w: np.ndarray  # (N, L, H, D)
    expand_b: np.ndarray  # (N, L, H)
    contract_w: np.ndarray  # (N, L, D, H)
    contract_b: np.ndarray  # (N, L, D)
    top_q: int | None = None

    @property
    def N(self):
        return self.gate_w.shape[0]

    @property
    def experts(self):
        return [
            BottleneckExpert(self.expand_w[n], self.expand_b[n], self.contract_w[n], self.contract_b[n])
            for n in range(self.N)
        ]


@dataclass
class InstructionState:
    vector: np.ndarray
    step: int = 1


@dataclass
class RqMoeModel:
    """M steps of (base, expert) codebooks plus M-1 step transforms.

    Transform arrays are ``None`` for the degenerate static model. The expert
    table of the last step is kept for a uniform layout but never read.
    """

    base: np.ndarray  # (M, K, D)
    expert: np.ndarray  # (M, K, De)
    proj_w: np.ndarray | None = None  # (M-1, D, D+De)
    proj_b: np.ndarray | None = None  # (M-1, D)
    gate_w: np.ndarray | None = None  # (M-1, N, D)
    gate_b: np.ndarray | None = None  # (M-1, N)
    expand_w: np.ndarray | None = None  # (M-1, N, L, H, D)
    expand_b: np.ndarray | None = None  # (M-1, N, L, H)
    contract_w: np.ndarray | None = None  # (M-1, N, L, D, H)
    contract_b: np.ndarray | None = None  # (M-1, N, L, D)
    top_q: int | None = field(default=None)

    def __post_init__(self):
        self.validate()

    @property
    def M(self):
        return self.base.shape[0]

    @property
    def K(self):
        return self.base.shape[1]

    @property
    def D(self):
        return self.base.shape[2]

    @property
    def De(self):
        return self.expert.shape[2]

    @property
    def has_transforms(self):
        return self.proj_w is not None

    @property
    def N(self):
        return self.gate_w.shape[1] if self.has_transforms else 0

    @property
    def L(self):
        return self.expand_w.shape[2] if self.has_transforms else 0

    @property
    def H(self):
        return self.expand_w.shape[3] if self.has_transforms else 0

    @property
    def dtype(self):
        return self.base.dtype

    def dims(self):
        return dict(D=self.D, De=self.De, K=self.K, M=self.M, N=self.N, L=self.L, H=self.H)

    def validate(self):
        if self.base.ndim != 3 or min(self.base.shape[:2]) < 1 or self.base.shape[2] < 1:
            raise InvariantError(f"base codebooks must be (M, K, D) with M, K, D >= 1, got {self.base.shape}")
        M, K, D = self.base.shape
        if self.expert.ndim != 3 or self.expert.shape[:2] != (M, K):
            raise InvariantError(f"expert codebooks must be (M={M}, K={K}, De), got {self.expert.shape}")
        present = [getattr(self, f) is not None for f in TRANSFORM_FIELDS]
        if any(present) and not all(present):
            raise InvariantError("step transforms must be all present or all absent")
        if self.has_transforms:
            De = self.expert.shape[2]
            N = self.gate_w.shape[1]
            L, H = self.expand_w.shape[2:4]
            want = {
                "proj_w": (M - 1, D, D + De), "proj_b": (M - 1, D),
                "gate_w": (M - 1, N, D), "gate_b": (M - 1, N),
                "expand_w": (M - 1, N, L, H, D), "expand_b": (M - 1, N, L, H),
                "contract_w": (M - 1, N, L, D, H), "contract_b": (M - 1, N, L, D),
            }
            for name, shape in want.items():
                if getattr(self, name).shape != shape:
                    raise InvariantError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
            if min(N, L, H) < 1:
                raise InvariantError("N, L and H must be >= 1")
            if self.top_q is not None and not 1 <= self.top_q <= N:
                raise InvariantError(f"top_q={self.top_q} outside [1, N={N}]")
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise InvariantError(f"{name} contains non-finite values")

    def params(self):
        return {f: getattr(self, f) for f in PARAM_FIELDS if getattr(self, f) is not None}

    def with_params(self, params):
        return replace(self, **params)

    def copy(self):
        return self.with_params({k: v.copy() for k, v in self.params().items()})

    def astype(self, dtype):
        return self.with_params({k: v.astype(dtype) for k, v in self.params().items()})

    def step_transform(self, m):
        """View of the transform used at step ``m`` (1-based, m >= 2)."""
        if not self.has_transforms:
            raise RangeError("model has no step transforms")
        if not 2 <= m <= self.M:
            raise RangeError(f"step transforms exist for m in [2, {self.M}], got {m}")
        t = m - 2
        return StepTransform(*(getattr(self, f)[t] for f in TRANSFORM_FIELDS), top_q=self.top_q)

    def prefix(self, m):
        """The model restricted to its first ``m`` steps (shares memory)."""
        if not 1 <= m <= self.M:
            raise RangeError(f"prefix length {m} outside [1, {self.M}]")
        kw = {"base": self.base[:m], "expert": self.expert[:m]}
        if self.has_transforms:
            kw.update({f: getattr(self, f)[:m - 1] for f in TRANSFORM_FIELDS})
        return replace(self, **kw)

    @classmethod
    def from_rq(cls, rq: RqModel):
        """The degenerate model: D_e = 0, no transforms."""
        M, K, _ = rq.codebooks.shape
        return cls(rq.codebooks.copy(), np.zeros((M, K, 0), dtype=rq.codebooks.dtype))

    def to_rq(self):
        return RqModel(self.base.copy())


def random_model(D, K, M, De=None, N=1, L=1, H=None, seed=0, scale=0.3, dtype=np.float32, top_q=None):
    """A model with every parameter drawn at random (contract layers included).

    Meant for tests and benchmarks where a non-trivial transform is needed
    without training.
    """
    De = D if De is None else De
    H = 2 * D if H is None else H
    rng = np.random.default_rng(seed)

    def u(*shape, fan_in):
        bound = scale * np.sqrt(3.0 / max(fan_in, 1))
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    T = M - 1
    return RqMoeModel(
        base=rng.standard_normal((M, K, D)).astype(dtype) / np.arange(1, M + 1, dtype=dtype)[:, None, None],
        expert=(0.3 * rng.standard_normal((M, K, De))).astype(dtype),
        proj_w=u(T, D, D + De, fan_in=D + De), proj_b=u(T, D, fan_in=D + De),
        gate_w=u(T, N, D, fan_in=D), gate_b=u(T, N, fan_in=D),
        expand_w=u(T, N, L, H, D, fan_in=D), expand_b=u(T, N, L, H, fan_in=D),
        contract_w=u(T, N, L, D, H, fan_in=H), contract_b=u(T, N, L, D, fan_in=H),
        top_q=top_q,
    )


# ---------------------------------------------------------------------------
# single-step building blocks


def instruction_update(I, chosen_expert_row):
    row = np.asarray(chosen_expert_row)
    if row.shape != I.vector.shape:
        raise ShapeError(f"expert row shape {row.shape} != instruction shape {I.vector.shape}")
    return InstructionState(I.vector + row, I.step + 1)


def expert_forward(expert, z, cache=None):
    """Stacked bottleneck residual blocks, ``h_l = h_{l-1} + W2 relu(W1 h_{l-1} + b1) + b2``."""
    if z.shape[-1] != expert.contract_w.shape[1]:
        raise ShapeError(f"expert expects width {expert.contract_w.shape[1]}, got {z.shape[-1]}")
    h = z
    for l in range(expert.L):
        a = linear(h, expert.expand_w[l], expert.expand_b[l])
        u = relu(a)
        if cache is not None:
            cache.append((h, a, u))
        h = h + linear(u, expert.contract_w[l], expert.contract_b[l])
    return h


def gate_weights(st, z):
    logits = linear(z, st.gate_w, st.gate_b)
    if st.top_q is not None and st.top_q < st.N:
        kth = np.sort(logits, axis=-1)[..., -st.top_q][..., None]
        logits = np.where(logits >= kth, logits, -np.inf)
    return softmax(logits)


def transform_rows(st, c, I, cache=None):
    """Dynamic codewords ``c + sum_n alpha_n E_n(z)`` with ``z = P [c; I] + b``.

    ``c`` (..., D) and ``I`` (..., De) broadcast against each other, so a
    shared (1, K, D) codebook against per-vector (B, 1, De) instructions
    yields (B, K, D) tables. When ``cache`` is a dict the intermediates needed
    for the backward pass are stored in it.
    """
    D = c.shape[-1]
    De = st.proj_w.shape[1] - D
    if I.shape[-1] != De:
        raise ShapeError(f"instruction width {I.shape[-1]} != D_e={De}")
    z = linear(c, st.proj_w[:, :D])
    if De:
        z = z + linear(I, st.proj_w[:, D:])
    z = z + st.proj_b
    alpha = gate_weights(st, z)
    delta = None
    outs = []
    for n, expert in enumerate(st.experts):
        ecache = [] if cache is not None else None
        h = expert_forward(expert, z, ecache)
        outs.append((h, ecache))
        term = alpha[..., n:n + 1] * h
        delta = term if delta is None else delta + term
    if cache is not None:
        cache.update(c=c, I=I, z=z, alpha=alpha, outs=outs)
    return c + delta


def transform_codebook(step_transform, base, I):
    if base.ndim != 2 or base.shape[1] != step_transform.proj_w.shape[0]:
        raise ShapeError(f"base codebook must be (K, {step_transform.proj_w.shape[0]}), got {base.shape}")
    vec = I.vector if isinstance(I, InstructionState) else np.asarray(I)
    return transform_rows(step_transform, base, vec[None, :])


def dynamic_codebook(model, m, I):
    if not 1 <= m <= model.M:
        raise RangeError(f"step {m} outside [1, {model.M}]")
    if m == 1 or not model.has_transforms:
        return model.base[0 if m == 1 else m - 1].copy()
    return transform_codebook(model.step_transform(m), model.base[m - 1], I)


# ---------------------------------------------------------------------------
# encoding


@dataclass
class EncodeResult:
    codes: np.ndarray  # (B, M)
    residual: np.ndarray  # (B, D), r^{M+1}
    step_sq_norms: np.ndarray  # (B, M+1) float64, ||r^1||^2 .. ||r^{M+1}||^2
    instructions: np.ndarray | None = None  # (B, M, De), the I^m used at each step


def _as_batch(x, D):
    x = np.asarray(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != D:
        raise ShapeError(f"expected vectors of width {D}, got shape {x.shape}")
    return X, single


def encode_batch(X, model, select="nearest", instruction="accumulate", freeze_after=3,
                 keep_instructions=False, chunk=_ENCODE_CHUNK):
    """Greedy sequential encoding of a (B, D) batch.

    ``select`` is ``"nearest"`` or ``"second"`` (second-closest dynamic
    codeword). ``instruction`` is ``"accumulate"`` (the normal stream),
    ``"frozen"`` (I^m = I^{freeze_after+1} for later steps) or ``"current"``
    (I^m = e^{m-1} only). The non-default options exist for perturbation
    studies.
    """
    if select not in ("nearest", "second"):
        raise ConfigError(f"unknown selection rule {select!r}")
    if instruction not in ("accumulate", "frozen", "current"):
        raise ConfigError(f"unknown instruction mode {instruction!r}")
    if select == "second" and model.K < 2:
        raise ConfigError("second-nearest selection needs K >= 2")
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != model.D:
        raise ShapeError(f"expected a (B, {model.D}) batch, got {X.shape}")
    B, M, De = X.shape[0], model.M, model.De
    dtype = model.dtype
    codes = np.empty((B, M), dtype=code_dtype(model.K))
    residual = X.astype(dtype, copy=True)
    norms = np.empty((B, M + 1), dtype=np.float64)
    norms[:, 0] = sq_norms(residual)
    instr = np.zeros((B, M, De), dtype=dtype) if keep_instructions else None
    transforms = [model.step_transform(m) for m in range(2, M + 1)] if model.has_transforms else []
    rows = np.arange(min(chunk, B))
    for s in range(0, B, chunk):
        r = residual[s:s + chunk]
        I = np.zeros((r.shape[0], De), dtype=dtype)
        for m in range(M):
            if keep_instructions:
                instr[s:s + chunk, m] = I
            if m == 0 or not transforms:
                table = model.base[m]
            else:
                table = transform_rows(transforms[m - 1], model.base[m][None], I[:, None, :])
            d = sq_dists(r, table)
            if select == "nearest":
                idx = np.argmin(d, axis=1)
            else:
                idx = np.argsort(d, axis=1, kind="stable")[:, 1]
            codes[s:s + chunk, m] = idx
            r -= table[idx] if table.ndim == 2 else table[rows[:r.shape[0]], idx]
            norms[s:s + chunk, m + 1] = sq_norms(r)
            if De and m + 1 < M:
                e = model.expert[m][idx]
                if instruction == "accumulate" or (instruction == "frozen" and m + 1 <= freeze_after):
                    I = I + e
                elif instruction == "current":
                    I = e.copy()
    return EncodeResult(codes, residual, norms, instr)


def encode(x, model):
    """Code(s) for one vector or a (B, D) batch."""
    X, single = _as_batch(x, model.D)
    codes = encode_batch(X, model).codes
    return codes[0] if single else codes


# ---------------------------------------------------------------------------
# decoding


def _check(code, model):
    code = check_codes(code, model.M, model.K)
    single = code.ndim == 1
    return (code[None, :] if single else code), single


def decode_sequential(code, model):
    """Step-by-step reconstruction, mirroring the encoder's order of operations."""
    codes, single = _check(code, model)
    B = codes.shape[0]
    out = np.zeros((B, model.D), dtype=model.dtype)
    I = np.zeros((B, model.De), dtype=model.dtype)
    for m in range(model.M):
        idx = codes[:, m]
        c = model.base[m][idx]
        if m > 0 and model.has_transforms:
            c = transform_rows(model.step_transform(m + 1), c, I)
        out += c
        if model.De:
            I = I + model.expert[m][idx]
    return out[0] if single else out


def instruction_prepass(codes, model):
    """All instruction vectors (M, B, De) from lookups and prefix sums only."""
    B = codes.shape[0]
    gathered = np.empty((model.M, B, model.De), dtype=model.dtype)
    gathered[0] = 0
    for m in range(1, model.M):
        gathered[m] = model.expert[m - 1][codes[:, m - 1]]
    return np.cumsum(gathered, axis=0, dtype=model.dtype)


_POOLS = {}


def _pool(workers):
    if workers not in _POOLS:
        _POOLS[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="rqmoe-decode")
    return _POOLS[workers]


def default_workers():
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def decode_parallel(code, model, workers=None):
    """Two-phase decode: instruction pre-pass, then every step's dynamic
    codeword computed as an independent task. Codewords are summed in step
    order so the result does not depend on task completion order."""
    codes, single = _check(code, model)
    B = codes.shape[0]
    instr = instruction_prepass(codes, model)

    def step_codeword(m):
        c = model.base[m][codes[:, m]]
        if m > 0 and model.has_transforms:
            c = transform_rows(model.step_transform(m + 1), c, instr[m])
        return c

    workers = default_workers() if workers is None else workers
    if workers <= 1 or model.M == 1:
        parts = [step_codeword(m) for m in range(model.M)]
    else:
        parts = list(_pool(workers).map(step_codeword, range(model.M)))
    out = np.zeros((B, model.D), dtype=model.dtype)
    for p in parts:
        out += p
    return out[0] if single else out


def decode_truncated(code, m_stop, model, workers=None):
    """Reconstruction from the first ``m_stop`` indices only."""
    if not 1 <= m_stop <= model.M:
        raise RangeError(f"m_stop={m_stop} outside [1, {model.M}]")
    code = np.asarray(code)
    return decode_parallel(code[..., :m_stop], model.prefix(m_stop), workers=workers)


# ---------------------------------------------------------------------------
# cost model


def flops_estimate(dims, phase):
    """Closed-form per-vector FLOP counts for RQ-MoE, QINCo and UNQ."""
    variant = dims.get("variant", "rqmoe")
    if phase not in ("encode", "decode"):
        raise ConfigError(f"unknown phase {phase!r}")

    def need(*names):
        vals = []
        for n in names:
            if n not in dims or dims[n] is None:
                raise ConfigError(f"{variant} needs dimension {n}")
            v = int(dims[n])
            if v < 1:
                raise ConfigError(f"dimension {n} must be >= 1, got {v}")
            vals.append(v)
        return vals

    if variant == "rqmoe":
        M, D, N, L, H = need("M", "D", "N", "L", "H")
        per_codeword = 2 * M * D * (D + N * L * H + N)
        return per_codeword * need("K")[0] if phase == "encode" else per_codeword
    if variant == "qinco":
        M, D, L, H = need("M", "D", "L", "H")
        per_codeword = 2 * M * D * (D + L * H)
        return per_codeword * need("K")[0] if phase == "encode" else per_codeword
    if variant == "unq":
        if phase == "encode":
            Hp, D, H, M, b, K = need("Hp", "D", "H", "M", "b", "K")
            return Hp * (D + H + M * b + M * K)
        Hp, b, D, M = need("Hp", "b", "D", "M")
        return Hp * (b + Hp + D + M)
    raise ConfigError(f"unknown variant {variant!r}")

