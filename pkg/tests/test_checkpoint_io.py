import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plateau_lab import checkpoint_io as cio
from plateau_lab.model import Checkpoint, init_checkpoint

from conftest import SMALL, random_mllm


def test_round_trip_bitwise(tmp_path):
    ck = random_mllm(3)
    cio.save(ck, tmp_path / "a.ckpt")
    back = cio.load(tmp_path / "a.ckpt")
    assert back.config == ck.config and back.kind == ck.kind
    assert cio.diff(ck, back).equal_bitwise


def test_resave_is_byte_identical(tmp_path):
    ck = init_checkpoint(SMALL, 1)
    cio.save(ck, tmp_path / "a.ckpt")
    cio.save(cio.load(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_permuted_maps_serialize_identically(seed):
    ck = random_mllm(seed % 50)
    names = list(ck.tensors)
    np.random.default_rng(seed).shuffle(names)
    permuted = Checkpoint(ck.config, {n: ck[n] for n in names}, ck.kind)
    assert cio.to_bytes(permuted) == cio.to_bytes(ck)
    assert cio.digest(permuted) == cio.digest(ck)


def test_header_layout():
    blob = cio.to_bytes(init_checkpoint(SMALL, 0))
    assert blob[:8] == b"PLAMCKPT"
    version, hlen = struct.unpack("<II", blob[8:16])
    assert version == 1 and blob[16:16 + hlen].startswith(b'{"config":')


def _corrupt(blob: bytes, at: int, new: bytes) -> bytes:
    return blob[:at] + new + blob[at + len(new):]


def test_corruptions_raise():
    blob = cio.to_bytes(init_checkpoint(SMALL, 0))
    with pytest.raises(cio.CheckpointFormatError, match="magic"):
        cio.from_bytes(_corrupt(blob, 0, b"X"))
    with pytest.raises(cio.CheckpointFormatError, match="version"):
        cio.from_bytes(_corrupt(blob, 8, struct.pack("<I", 2)))
    with pytest.raises(cio.CheckpointFormatError, match="truncated"):
        cio.from_bytes(blob[:-4])
    with pytest.raises(cio.CheckpointFormatError, match="trailing"):
        cio.from_bytes(blob + b"\0\0\0\0")
    with pytest.raises(cio.CheckpointFormatError):
        cio.from_bytes(blob[:10])


def _rewrite_header(blob, edit):
    import json
    hlen = struct.unpack("<II", blob[8:16])[1]
    meta = json.loads(blob[16:16 + hlen])
    edit(meta)
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return blob[:8] + struct.pack("<II", 1, len(header)) + header + blob[16 + hlen:]


def test_table_inconsistencies_raise():
    blob = cio.to_bytes(init_checkpoint(SMALL, 0))

    def dup(meta):
        meta["tensors"][1]["name"] = meta["tensors"][0]["name"]

    def gap(meta):
        meta["tensors"][1]["offset"] += 4

    def shape(meta):
        meta["tensors"][0]["shape"] = [1, 1]

    for edit, msg in ((dup, "duplicate"), (gap, "offset"), (shape, "length")):
        with pytest.raises(cio.CheckpointFormatError, match=msg):
            cio.from_bytes(_rewrite_header(blob, edit))


def test_diff_reflexive_and_single_delta():
    ck = random_mllm(0)
    assert cio.diff(ck, ck).equal_bitwise and not cio.diff(ck, ck).nonzero()
    w = ck["layers.3.attn.q"].copy()
    w[1, 2] += 1.0
    rep = cio.diff(ck, ck.replace({"layers.3.attn.q": w}))
    assert list(rep.nonzero()) == ["layers.3.attn.q"]
    assert rep.nonzero()["layers.3.attn.q"] == pytest.approx(1.0, abs=1e-6)


def test_diff_name_mismatch():
    with pytest.raises(ValueError):
        cio.diff(init_checkpoint(SMALL, 0), random_mllm(0))


def test_kv_grammar(tmp_path):
    text = "# run\nseed = 3\nmodel.num_layers=4  # trailing\n\nlr = 1e-3\n"
    assert cio.parse_kv(text) == {"seed": "3", "model.num_layers": "4", "lr": "1e-3"}
    with pytest.raises(ValueError):
        cio.parse_kv("a = 1\na = 2\n")
    with pytest.raises(ValueError):
        cio.parse_kv("no equals sign\n")
    cio.write_kv(tmp_path / "c.kv", {"x": 1, "y": "b"}, header="hello")
    assert cio.read_kv(tmp_path / "c.kv") == {"x": "1", "y": "b"}


def test_atomic_write_leaves_no_temp(tmp_path):
    cio.atomic_write_text(tmp_path / "f.txt", "hi")
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]


def test_only_f32_saved():
    ck = init_checkpoint(SMALL, 0).astype(np.float64)
    with pytest.raises(cio.CheckpointFormatError):
        cio.to_bytes(ck)
