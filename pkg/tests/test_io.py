import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rqmoe.errors import (BadMagicError, ConfigError, CorruptFileError, EncodingError,
                          TruncationError, VersionError)
from rqmoe.io import (
    SynthSpec,
    bytes_per_index,
    codes_from_bytes,
    codes_to_bytes,
    format_config,
    load_codes,
    model_from_bytes,
    model_to_bytes,
    parse_config,
    read_jsonl,
    read_splits,
    read_vecs,
    save_codes,
    synth_dataset,
    write_csv,
    write_jsonl,
    write_splits,
    write_vecs,
)
from rqmoe.model import RqMoeModel, random_model
from rqmoe.rq import RqModel


def _hand_fvecs(rows):
    out = b""
    for r in rows:
        out += struct.pack("<i", len(r)) + struct.pack(f"<{len(r)}f", *r)
    return out


def test_fvecs_layout_matches_hand_encoding(tmp_path):
    rows = [[1.0, 2.5, -3.0], [0.0, 0.125, 7.0]]
    write_vecs(np.array(rows), tmp_path / "a.fvecs")
    assert (tmp_path / "a.fvecs").read_bytes() == _hand_fvecs(rows)
    (tmp_path / "b.fvecs").write_bytes(_hand_fvecs(rows))
    assert read_vecs(tmp_path / "b.fvecs").tolist() == rows


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_fvecs_round_trip(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("v") / "x.fvecs"
    write_vecs(m, p)
    back = read_vecs(p)
    if len(m):
        assert back.tobytes() == m.tobytes()
    else:
        assert back.size == 0


def test_bvecs_and_ivecs(tmp_path):
    b = np.array([[0, 255, 7]], dtype=np.uint8)
    write_vecs(b, tmp_path / "x.bvecs")
    assert read_vecs(tmp_path / "x.bvecs").tolist() == [[0.0, 255.0, 7.0]]
    i = np.array([[-1, 5], [3, 2]])
    write_vecs(i, tmp_path / "x.ivecs")
    back = read_vecs(tmp_path / "x.ivecs")
    assert back.dtype == np.int32 and back.tolist() == i.tolist()
    with pytest.raises(EncodingError):
        write_vecs([[256]], tmp_path / "y.bvecs")
    with pytest.raises(EncodingError):
        write_vecs([[0.5]], tmp_path / "y.ivecs")


def test_vecs_errors(tmp_path):
    good = _hand_fvecs([[1.0, 2.0], [3.0, 4.0]])
    p = tmp_path / "x.fvecs"
    p.write_bytes(good[:-2])
    with pytest.raises(TruncationError):
        read_vecs(p)
    p.write_bytes(good[:12] + struct.pack("<i", 3) + good[16:])
    with pytest.raises(CorruptFileError) as exc:
        read_vecs(p)
    assert exc.value.offset == 12
    p.write_bytes(struct.pack("<i", -1))
    with pytest.raises(CorruptFileError):
        read_vecs(p)
    with pytest.raises(ConfigError):
        read_vecs(tmp_path / "x.txt")
    with pytest.raises(EncodingError):
        write_vecs(np.array([[np.nan]]), p)
    with pytest.raises(EncodingError):
        write_vecs(np.zeros(3), p)


def test_model_blob_round_trip():
    m = random_model(D=5, K=4, M=3, De=2, N=2, L=2, H=3, seed=0, top_q=1)
    back = model_from_bytes(model_to_bytes(m))
    assert back.top_q == 1 and back.dims() == m.dims()
    for k, v in m.params().items():
        assert back.params()[k].tobytes() == v.tobytes()
    static = RqMoeModel.from_rq(RqModel(np.ones((2, 3, 4), dtype=np.float32)))
    again = model_from_bytes(model_to_bytes(static))
    assert not again.has_transforms and np.array_equal(again.base, static.base)
    assert len(model_to_bytes(static)) == 38 + 4 * 24


def test_model_blob_errors():
    blob = model_to_bytes(random_model(D=3, K=2, M=2, N=1, L=1, H=2, seed=0))
    with pytest.raises(TruncationError):
        model_from_bytes(blob[:10])
    with pytest.raises(TruncationError):
        model_from_bytes(blob[:-4])
    with pytest.raises(CorruptFileError):
        model_from_bytes(blob + b"\0")
    with pytest.raises(BadMagicError):
        model_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(VersionError):
        model_from_bytes(blob[:4] + struct.pack("<H", 9) + blob[6:])
    nan = bytearray(blob)
    nan[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(CorruptFileError):
        model_from_bytes(bytes(nan))


def test_code_blob_sizes_and_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 256, size=(1000, 8))
    blob = codes_to_bytes(codes, 256)
    assert len(blob) - 11 == 8000
    assert np.array_equal(codes_from_bytes(blob), codes)
    wide = rng.integers(0, 4096, size=(10, 3))
    save_codes(wide, tmp_path / "c.bin", 4096)
    assert (tmp_path / "c.bin").stat().st_size == 11 + 60
    assert np.array_equal(load_codes(tmp_path / "c.bin"), wide)
    assert [bytes_per_index(k) for k in (2, 256, 257, 65536)] == [1, 1, 2, 2]


def test_code_blob_errors():
    with pytest.raises(EncodingError):
        bytes_per_index(65537)
    with pytest.raises(EncodingError):
        codes_to_bytes([[0, 4]], 4)
    with pytest.raises(EncodingError):
        codes_to_bytes([0, 1], 4)
    blob = codes_to_bytes([[1, 2], [3, 0]], 4)
    with pytest.raises(TruncationError):
        codes_from_bytes(blob[:-1])
    with pytest.raises(TruncationError):
        codes_from_bytes(blob[:5])
    with pytest.raises(CorruptFileError):
        codes_from_bytes(blob + b"\0")
    with pytest.raises(CorruptFileError):
        codes_from_bytes(blob[:10] + b"\x03" + blob[11:])


def test_config_parsing():
    schema = {"lr": float, "M": int, "static": bool, "loss": str}
    text = "# comment\nlr = 0.01\nM=8  # trailing\n\nstatic = yes\nloss = nrl\n"
    cfg = parse_config(text, schema)
    assert cfg == {"lr": 0.01, "M": 8, "static": True, "loss": "nrl"}
    assert parse_config(format_config(cfg), schema) == cfg
    for bad in ("M = 8\nM = 9", "x = 1", "M 8", "M = eight", "static = maybe"):
        with pytest.raises(ConfigError):
            parse_config(bad, schema)


def test_reports(tmp_path):
    rows = [{"a": 1, "b": [1, 2]}, {"a": 2, "b": [3]}]
    write_jsonl(rows, tmp_path / "r.jsonl")
    write_jsonl(rows[:1], tmp_path / "r.jsonl", append=True)
    assert read_jsonl(tmp_path / "r.jsonl") == rows + rows[:1]
    write_csv(rows, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["a,b", '1,"[1, 2]"', "2,[3]"]


def test_synth_determinism_and_shape(tmp_path):
    spec = SynthSpec(n=500, D=12, clusters=3, intrinsic_dim=4, seed=7, n_queries=20)
    a, b = synth_dataset(spec), synth_dataset(spec)
    for (name, x), (_, y) in zip(a.items(), b.items()):
        assert x.tobytes() == y.tobytes(), name
    assert [x.shape for _, x in a.items()] == [(500, 12), (50, 12), (50, 12), (20, 12)]
    assert a.train.dtype == np.float32
    write_splits(a, tmp_path / "d1")
    write_splits(b, tmp_path / "d2")
    for name, _ in a.items():
        h1 = hashlib.sha256((tmp_path / "d1" / f"{name}.fvecs").read_bytes()).hexdigest()
        h2 = hashlib.sha256((tmp_path / "d2" / f"{name}.fvecs").read_bytes()).hexdigest()
        assert h1 == h2
    back = read_splits(tmp_path / "d1")
    assert np.array_equal(back.test, a.test)
    other = synth_dataset(SynthSpec(n=500, D=12, clusters=3, intrinsic_dim=4, seed=8))
    assert not np.array_equal(other.train, a.train)


def test_synth_intrinsic_rank():
    s = synth_dataset(SynthSpec(n=2000, D=16, clusters=4, intrinsic_dim=5, noise=0.0, seed=1))
    sv = np.linalg.svd(s.train.astype(np.float64) - s.train.mean(0), compute_uv=False)
    assert int((sv > 1e-4 * sv[0]).sum()) == 5


def test_synth_validation():
    for bad in (dict(n=2, clusters=3), dict(intrinsic_dim=0), dict(intrinsic_dim=40), dict(noise=-1.0)):
        with pytest.raises(ConfigError):
            synth_dataset(SynthSpec(**bad))
