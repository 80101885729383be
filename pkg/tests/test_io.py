import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cognilab import io
from cognilab.io import BadMagicError, DumpError, NonStochasticError, SizeMismatchError


def stochastic(rng, L=2, H=2, T=5):
    a = rng.random((L, H, T, T))
    return (a / a.sum(-1, keepdims=True)).astype(np.float32)


def test_dump_header_layout():
    att = stochastic(np.random.default_rng(0), 1, 2, 3)
    blob = io.encode_dump(att)
    assert blob[:6] == b"ATND1\x00" and blob[6:8] == b"\x00\x00"
    assert np.frombuffer(blob[8:20], "<u4").tolist() == [1, 2, 3]
    assert len(blob) == 24 + 4 * 1 * 2 * 3 * 3


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 6), st.integers(0, 1000))
def test_dump_round_trip_byte_exact(L, H, T, seed):
    att = stochastic(np.random.default_rng(seed), L, H, T)
    blob = io.encode_dump(att)
    back = io.decode_dump(blob)
    np.testing.assert_array_equal(back, att)
    assert io.encode_dump(back) == blob


def test_dump_file_and_sidecar(tmp_path):
    att = stochastic(np.random.default_rng(1))
    io.save_dump(tmp_path / "p.atnd", att, {"prompt_id": "x", "step": 3})
    back, meta = io.load_dump(tmp_path / "p.atnd")
    np.testing.assert_array_equal(back, att)
    assert meta == {"prompt_id": "x", "step": 3}


def test_malformed_dumps():
    blob = io.encode_dump(stochastic(np.random.default_rng(2)))
    with pytest.raises(BadMagicError):
        io.decode_dump(b"XXXXX" + blob[5:])
    with pytest.raises(SizeMismatchError):
        io.decode_dump(blob[:-4])
    with pytest.raises(SizeMismatchError):
        io.decode_dump(blob[:10])
    bad = np.ones((1, 1, 2, 2), np.float32)
    with pytest.raises(NonStochasticError):
        io.decode_dump(io.encode_dump(bad))
    assert io.decode_dump(io.encode_dump(bad), check_rows=False).shape == (1, 1, 2, 2)
    with pytest.raises(DumpError):
        io.encode_dump(np.ones((2, 2)))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(2.5)}
    optim = {"t": 7, "m": {"a": rng.normal(size=(3, 4))}, "v": {"a": rng.random((3, 4))}}
    io.save_checkpoint(tmp_path / "c1", params, optim, {"step": 7})
    p2, o2, man = io.load_checkpoint(tmp_path / "c1")
    for k in params:
        np.testing.assert_array_equal(p2[k], params[k])
    assert o2["t"] == 7 and man["step"] == 7
    np.testing.assert_array_equal(o2["v"]["a"], optim["v"]["a"])
    io.save_checkpoint(tmp_path / "c2", p2, o2, {"step": 7})
    for f in ("params.bin", "optim.bin", "manifest.json"):
        assert (tmp_path / "c1" / f).read_bytes() == (tmp_path / "c2" / f).read_bytes()


def test_truncated_checkpoint_rejected(tmp_path):
    io.save_checkpoint(tmp_path / "c", {"a": np.ones(10)}, None, {})
    p = tmp_path / "c" / "params.bin"
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(SizeMismatchError):
        io.load_checkpoint(tmp_path / "c")


def test_hidden_round_trip(tmp_path):
    h = [np.random.default_rng(4).normal(size=(5, 8)) for _ in range(3)]
    io.save_hidden(tmp_path / "h.npy", h)
    np.testing.assert_array_equal(io.load_hidden(tmp_path / "h.npy"), np.stack(h))


def test_checkpoint_steps(tmp_path):
    for s in (10, 2, 5):
        io.save_checkpoint(tmp_path / "checkpoints" / f"step_{s}", {"a": np.ones(1)}, None, {})
    assert io.checkpoint_steps(tmp_path) == [2, 5, 10]
