import struct

import numpy as np
import pytest

from ifl.checkpoint import CheckpointError, block_from_bytes, block_to_bytes, load_block, save_block
from ifl.models import build_model, table2_specs


@pytest.mark.parametrize("cid", [1, 2, 3, 4])
def test_round_trip(cid, rng, tmp_path):
    model = build_model(table2_specs()[cid - 1], rng)
    for block in (model.base, model.modular):
        save_block(block, tmp_path / "b.mfw")
        again = load_block(tmp_path / "b.mfw")
        assert [l.kind for l in again.layers] == [l.kind for l in block.layers]
        for p, q in zip(block.params(), again.params()):
            assert p.dtype == q.dtype and p.tobytes() == q.tobytes()
        x = rng.random((2, 1, 28, 28), dtype=np.float32) if block is model.base else \
            rng.random((2, 432), dtype=np.float32)
        assert np.array_equal(block.forward(x), again.forward(x))


def test_header_layout(rng):
    block = build_model(table2_specs()[3], rng).modular
    data = block_to_bytes(block)
    assert data[:4] == b"MFW1"
    assert struct.unpack("<I", data[4:8])[0] == 1
    # dense tag, two args (432, 10), two tensors, W as 2-d (10, 432)
    assert struct.unpack("<7I", data[8:36]) == (1, 2, 432, 10, 2, 2, 10)
    assert len(data) == 8 + 4 * 5 + 4 * 3 + 4 * 4320 + 4 * 2 + 4 * 10


def test_float_data_little_endian(rng):
    block = build_model(table2_specs()[3], rng).modular
    data = block_to_bytes(block)
    W = block.params()[0]
    assert np.array_equal(np.frombuffer(data[40:40 + 4 * W.size], "<f4").reshape(W.shape), W)


def test_errors(rng):
    data = block_to_bytes(build_model(table2_specs()[3], rng).modular)
    with pytest.raises(CheckpointError, match="MFW1"):
        block_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        block_from_bytes(data[:-1])
    with pytest.raises(CheckpointError, match="trailing"):
        block_from_bytes(data + b"\0")
    bad_tag = data[:8] + struct.pack("<I", 99) + data[12:]
    with pytest.raises(CheckpointError, match="tag"):
        block_from_bytes(bad_tag)
    # tensor dims that disagree with the layer arguments
    bad_shape = data[:28] + struct.pack("<I", 11) + data[32:]
    with pytest.raises(CheckpointError):
        block_from_bytes(bad_shape)
