"""File formats and synthetic data.

* ``.fvecs`` / ``.bvecs`` / ``.ivecs``: per record a little-endian int32
  dimension followed by that many float32 / uint8 / int32 values.
* Model blob: ``b"RQMO"``, u16 version, seven u32 dims (D, De, K, M, N, L, H),
  u32 flags, then every tensor as little-endian float32 in declared order.
* Code blob: u64 count, u16 M, u8 bytes-per-index, then the row-major
  indices. Nothing else is stored per vector.
"""

import csv
import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ConfigError, CorruptFileError, EncodingError,
                     InvariantError, TruncationError, VersionError)
from .model import RqMoeModel

VEC_KINDS = {"fvecs": np.dtype("<f4"), "bvecs": np.dtype("u1"), "ivecs": np.dtype("<i4")}

MODEL_MAGIC = b"RQMO"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sH7II")
FLAG_TRANSFORMS = 1
_TOPQ_SHIFT = 8

_CODE_HEADER = struct.Struct("<QHB")


def _kind(path, kind):
    if kind is None:
        kind = Path(path).suffix.lstrip(".")
    if kind not in VEC_KINDS:
        raise ConfigError(f"unknown vector file kind {kind!r}; expected one of {sorted(VEC_KINDS)}")
    return kind


def read_vecs(path, kind=None):
    """Load a whole vecs file. fvecs and bvecs come back as float32, ivecs as int32."""
    kind = _kind(path, kind)
    el = VEC_KINDS[kind]
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        return np.zeros((0, 0), dtype=np.int32 if kind == "ivecs" else np.float32)
    if len(raw) < 4:
        raise TruncationError(f"{path}: file shorter than one dimension prefix")
    dim = int(np.frombuffer(raw[:4], dtype="<i4")[0])
    if dim < 0:
        raise CorruptFileError(f"{path}: negative dimension {dim}", offset=0)
    rec = 4 + dim * el.itemsize
    if len(raw) % rec:
        raise TruncationError(f"{path}: {len(raw)} bytes is not a multiple of the record size {rec}")
    n = len(raw) // rec
    rows = np.frombuffer(raw, dtype=np.dtype([("d", "<i4"), ("v", el, (dim,))]), count=n)
    bad = np.flatnonzero(rows["d"] != dim)
    if bad.size:
        raise CorruptFileError(f"{path}: record {bad[0]} has dimension {rows['d'][bad[0]]}, expected {dim}",
                               offset=int(bad[0]) * rec)
    data = rows["v"]
    if kind == "ivecs":
        return data.astype(np.int32)
    return data.astype(np.float32)


def write_vecs(matrix, path, kind=None):
    kind = _kind(path, kind)
    el = VEC_KINDS[kind]
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise EncodingError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise EncodingError("matrix contains non-finite values")
    if kind == "bvecs":
        if m.size and (m.min() < 0 or m.max() > 255 or np.any(m != np.round(m))):
            raise EncodingError("bvecs values must be integers in [0, 255]")
    elif kind == "ivecs":
        if m.size and np.any(m != np.round(m)):
            raise EncodingError("ivecs values must be integers")
    rows = np.empty(m.shape[0], dtype=np.dtype([("d", "<i4"), ("v", el, (m.shape[1],))]))
    rows["d"] = m.shape[1]
    rows["v"] = m.astype(el)
    Path(path).write_bytes(rows.tobytes())


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    n: int = 10_000
    D: int = 32
    clusters: int = 16
    intrinsic_dim: int = 8
    noise: float = 0.01
    seed: int = 0
    n_valid: int | None = None  # default n // 10
    n_test: int | None = None  # default n // 10
    n_queries: int = 100


@dataclass
class Splits:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    queries: np.ndarray

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def synth_dataset(spec):
    """Gaussian mixture in a random ``intrinsic_dim``-dimensional subspace of
    R^D plus isotropic noise.

    Each cluster gets its own randomly oriented covariance inside the
    subspace with a geometrically decaying spectrum, so the data is locally
    lower-dimensional than globally and the local orientation changes from
    cluster to cluster. All splits are disjoint draws from the same
    distribution.
    """
    if spec.n < spec.clusters or spec.clusters < 1:
        raise ConfigError("need n >= clusters >= 1")
    if not 1 <= spec.intrinsic_dim <= spec.D:
        raise ConfigError("intrinsic_dim must lie in [1, D]")
    if spec.noise < 0:
        raise ConfigError("noise must be >= 0")
    n_valid = spec.n // 10 if spec.n_valid is None else spec.n_valid
    n_test = spec.n // 10 if spec.n_test is None else spec.n_test
    if min(n_valid, n_test, spec.n_queries) < 0:
        raise ConfigError("split sizes must be >= 0")
    rng = np.random.default_rng(spec.seed)
    d = spec.intrinsic_dim
    basis, _ = np.linalg.qr(rng.standard_normal((spec.D, d)))
    centers = 2.0 * rng.standard_normal((spec.clusters, d))
    # geometric spectrum: each cluster is locally thinner than the subspace
    decay = np.exp(-0.5 * np.arange(d))
    mixing = []
    for _ in range(spec.clusters):
        rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
        mixing.append(rot * (decay * rng.uniform(0.5, 1.5, size=d)))
    mixing = np.stack(mixing)
    weights = rng.dirichlet(np.full(spec.clusters, 2.0))

    def draw(count):
        lab = rng.choice(spec.clusters, size=count, p=weights)
        latent = centers[lab] + np.einsum("nij,nj->ni", mixing[lab], rng.standard_normal((count, d)))
        x = latent @ basis.T + spec.noise * rng.standard_normal((count, spec.D))
        return x.astype(np.float32)

    return Splits(draw(spec.n), draw(n_valid), draw(n_test), draw(spec.n_queries))


def write_splits(splits, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in splits.items():
        write_vecs(arr, directory / f"{name}.fvecs")


def read_splits(directory):
    directory = Path(directory)
    return Splits(*(read_vecs(directory / f"{f.name}.fvecs") for f in fields(Splits)))


# ---------------------------------------------------------------------------
# model blobs


def _tensor_shapes(D, De, K, M, N, L, H, has_transforms):
    shapes = {"base": (M, K, D), "expert": (M, K, De)}
    if has_transforms:
        T = M - 1
        shapes.update(
            proj_w=(T, D, D + De), proj_b=(T, D), gate_w=(T, N, D), gate_b=(T, N),
            expand_w=(T, N, L, H, D), expand_b=(T, N, L, H),
            contract_w=(T, N, L, D, H), contract_b=(T, N, L, D),
        )
    return shapes


def model_to_bytes(model):
    d = model.dims()
    flags = (FLAG_TRANSFORMS if model.has_transforms else 0) | ((model.top_q or 0) << _TOPQ_SHIFT)
    parts = [_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, d["D"], d["De"], d["K"], d["M"],
                                d["N"], d["L"], d["H"], flags)]
    for name, arr in model.params().items():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def model_from_bytes(blob):
    if len(blob) < _MODEL_HEADER.size:
        raise TruncationError(f"model blob has {len(blob)} bytes, header needs {_MODEL_HEADER.size}")
    magic, version, D, De, K, M, N, L, H, flags = _MODEL_HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise VersionError(f"unsupported model format version {version}")
    has_t = bool(flags & FLAG_TRANSFORMS)
    top_q = (flags >> _TOPQ_SHIFT) & 0xFF or None
    if flags & ~(FLAG_TRANSFORMS | (0xFF << _TOPQ_SHIFT)):
        raise CorruptFileError(f"unknown flag bits {flags:#x}")
    if min(D, K, M) < 1 or (has_t and min(N, L, H) < 1):
        raise CorruptFileError(f"invalid dims D={D} K={K} M={M} N={N} L={L} H={H}")
    shapes = _tensor_shapes(D, De, K, M, N, L, H, has_t)
    need = _MODEL_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) < need:
        raise TruncationError(f"model blob has {len(blob)} bytes, expected {need}")
    if len(blob) > need:
        raise CorruptFileError(f"model blob has {len(blob) - need} trailing bytes", offset=need)
    off = _MODEL_HEADER.size
    tensors = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    try:
        return RqMoeModel(**tensors, top_q=top_q)
    except InvariantError as exc:
        raise CorruptFileError(f"model blob violates an invariant: {exc}") from exc


def save_model(model, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# code blobs


def bytes_per_index(K):
    if K <= 256:
        return 1
    if K <= 65536:
        return 2
    raise EncodingError(f"K={K} does not fit in 16-bit indices")


def codes_to_bytes(codes, K):
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise EncodingError(f"codes must be (count, M), got shape {codes.shape}")
    if codes.size and (codes.min() < 0 or codes.max() >= K):
        raise EncodingError(f"code index outside [0, {K})")
    width = bytes_per_index(K)
    payload = codes.astype("u1" if width == 1 else "<u2").tobytes()
    return _CODE_HEADER.pack(codes.shape[0], codes.shape[1], width) + payload


def codes_from_bytes(blob):
    if len(blob) < _CODE_HEADER.size:
        raise TruncationError("code blob shorter than its header")
    count, M, width = _CODE_HEADER.unpack_from(blob)
    if width not in (1, 2):
        raise CorruptFileError(f"bytes_per_index must be 1 or 2, got {width}")
    need = _CODE_HEADER.size + count * M * width
    if len(blob) < need:
        raise TruncationError(f"code blob has {len(blob)} bytes, expected {need}")
    if len(blob) > need:
        raise CorruptFileError(f"code blob has {len(blob) - need} trailing bytes", offset=need)
    dt = np.dtype("u1" if width == 1 else "<u2")
    return np.frombuffer(blob, dtype=dt, offset=_CODE_HEADER.size).reshape(count, M).astype(dt.newbyteorder("="))


def save_codes(codes, path, K):
    Path(path).write_bytes(codes_to_bytes(codes, K))


def load_codes(path):
    return codes_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# key=value config files


def _parse_value(raw, typ, key):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if raw.lower() in ("none", "") and typ is not str:
        return None
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text, schema):
    """Parse ``key = value`` lines. ``schema`` maps key -> type; unknown keys,
    duplicates and malformed lines are errors. ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value, schema[key], key)
    return out


def read_config(path, schema):
    return parse_config(Path(path).read_text(), schema)


def format_config(values):
    return "".join(f"{k} = {v}\n" for k, v in values.items())


# ---------------------------------------------------------------------------
# reports


def write_csv(rows, path):
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})


def write_jsonl(rows, path, append=False):
    with open(path, "a" if append else "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=False) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
