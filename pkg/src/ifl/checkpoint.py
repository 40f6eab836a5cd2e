"""MFW1 binary block format.

Layout, all integers little-endian uint32, all floats little-endian float32::

    b"MFW1" | layer_count
    per layer:
        kind_tag | n_args | args[n_args] | n_tensors
        per tensor: ndim | dims[ndim] | data[prod(dims)]

``args`` are the layer constructor arguments (e.g. in/out width for a dense
layer), so a block can be rebuilt from the file alone.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import Block, Conv2d, Dense, Flatten, MaxPool2d, ReLU, ShapeError

MAGIC = b"MFW1"
KIND_TAGS = {"dense": 1, "conv2d": 2, "maxpool2d": 3, "relu": 4, "flatten": 5}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


class CheckpointError(ValueError):
    pass


def _layer_args(layer) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        return (layer.in_dim, layer.out_dim)
    if isinstance(layer, Conv2d):
        return (layer.in_channels, layer.out_channels, layer.kernel, layer.stride, layer.padding)
    if isinstance(layer, MaxPool2d):
        return (layer.window,)
    return ()


def block_to_bytes(block: Block) -> bytes:
    out = [MAGIC, struct.pack("<I", len(block.layers))]
    for layer in block.layers:
        args = _layer_args(layer)
        out.append(struct.pack(f"<II{len(args)}I", KIND_TAGS[layer.kind], len(args), *args))
        out.append(struct.pack("<I", len(layer.params)))
        for p in layer.params:
            out.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
            out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated MFW1 stream")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count != 1 else vals[0]


_CLASSES = {"dense": Dense, "conv2d": Conv2d, "maxpool2d": MaxPool2d,
            "relu": ReLU, "flatten": Flatten}


def block_from_bytes(data: bytes) -> Block:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an MFW1 stream")
    layers = []
    for _ in range(r.u32()):
        tag = r.u32()
        if tag not in _TAG_KINDS:
            raise CheckpointError(f"unknown layer tag {tag}")
        n_args = r.u32()
        args = tuple(r.u32(n_args)) if n_args > 1 else ((r.u32(),) if n_args else ())
        layer = _CLASSES[_TAG_KINDS[tag]](*args)
        tensors = []
        for _ in range(r.u32()):
            ndim = r.u32()
            shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim else ())
            size = int(np.prod(shape))
            arr = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
            tensors.append(arr)
        try:
            layer.params = tensors
        except ShapeError as err:
            raise CheckpointError(f"layer {len(layers)}: {err}") from None
        layers.append(layer)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes in MFW1 stream")
    return Block(layers)


def save_block(block: Block, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(block_to_bytes(block))


def load_block(path) -> Block:
    return block_from_bytes(Path(path).read_bytes())
