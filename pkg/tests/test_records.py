import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gmb.records import (
    EmbeddingFile,
    PatchRecordFile,
    RecordFormatError,
    decode_patch_records,
    encode_patch_records,
    patch_key,
    read_embeddings,
    read_patch_records,
    write_embeddings,
    write_patch_records,
)


def random_records(rng, n, edge=4, um=1.0):
    origins = rng.integers(0, 10_000, size=(n, 2))
    patches = rng.integers(0, 256, size=(n, edge, edge, 3), dtype=np.uint8)
    return PatchRecordFile(edge, um, origins, patches)


@given(st.integers(0, 6), st.integers(1, 5), st.floats(0.1, 16.0), st.integers(0, 2**32 - 1))
def test_patch_roundtrip(n, edge, um, seed):
    f = random_records(np.random.default_rng(seed), n, edge, um)
    assert decode_patch_records(encode_patch_records(f)) == f


def test_layout_is_little_endian_header_then_records():
    f = PatchRecordFile(1, 0.5, [[3, 7]], np.array([[[[1, 2, 3]]]], np.uint8))
    data = encode_patch_records(f)
    assert data == b"GPR1" + struct.pack("<HHfI", 1, 1, 0.5, 1) + struct.pack("<II", 3, 7) + bytes([1, 2, 3])


def test_file_roundtrip(tmp_path, rng):
    f = random_records(rng, 5)
    write_patch_records(tmp_path / "a.gpr", f)
    assert read_patch_records(tmp_path / "a.gpr") == f


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d[:5],
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:4] + struct.pack("<H", 9) + d[6:],
        lambda d: d[:-1],
        lambda d: d + b"\0",
    ],
)
def test_corrupt_records_rejected(mutate, rng):
    data = encode_patch_records(random_records(rng, 3))
    with pytest.raises(RecordFormatError):
        decode_patch_records(mutate(data))


def test_shape_validation():
    with pytest.raises(RecordFormatError):
        PatchRecordFile(4, 1.0, np.zeros((1, 2)), np.zeros((1, 3, 3, 3), np.uint8))
    with pytest.raises(RecordFormatError):
        PatchRecordFile(2, 1.0, np.zeros((2, 2)), np.zeros((1, 2, 2, 3), np.uint8))


def test_patch_key_is_md5():
    assert patch_key(5, 9, 3) == hashlib.md5(b"5|9|3").hexdigest()
    assert len({patch_key(x, y, op) for x in range(3) for y in range(3) for op in range(8)}) == 72


def test_embedding_roundtrip_and_lookup(tmp_path, rng):
    keys = [patch_key(i, 0, op) for i in range(4) for op in range(8)]
    vec = rng.normal(size=(32, 7)).astype(np.float32)
    write_embeddings(tmp_path / "e.gem", EmbeddingFile(keys, vec))
    back = read_embeddings(tmp_path / "e.gem")
    assert back.keys == keys and np.array_equal(back.vectors, vec) and back.embed_dim == 7
    assert np.array_equal(back.lookup([keys[5], keys[0]]), vec[[5, 0]])
    with pytest.raises(KeyError):
        back.lookup([patch_key(99, 99, 0)])


def test_embedding_errors(tmp_path):
    with pytest.raises(RecordFormatError):
        EmbeddingFile(["a"], np.zeros((2, 3)))
    with pytest.raises(RecordFormatError):
        write_embeddings(tmp_path / "e.gem", EmbeddingFile(["short"], np.zeros((1, 3))))
    (tmp_path / "bad.gem").write_bytes(b"GEM1")
    with pytest.raises(RecordFormatError):
        read_embeddings(tmp_path / "bad.gem")
