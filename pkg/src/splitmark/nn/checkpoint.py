"""SMK1 checkpoint format.

Layout: ``"SMK1" | version u16 | layer count u16 | per layer: kind tag u8,
rank u8, dims u32[rank], arrays f32[...] | crc32 u32`` with the CRC taken
over everything between the magic and the CRC.  A layer's arrays are its
parameters followed by its buffers (running statistics) in enumeration
order; their shapes follow from the dims.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..binfmt import Reader, Writer, frame, unframe
from ..errors import FormatError
from .layers import LAYER_KINDS, Conv2d, Dense, Layer
from .model import Model

MAGIC = b"SMK1"


def _input_shape(layer_cls: type[Layer], dims: tuple[int, ...]) -> tuple[int, ...]:
    if layer_cls is Dense:
        return (dims[0],)
    if layer_cls is Conv2d:
        return (dims[0],) + tuple(dims[3:])
    return tuple(dims)


def write_model(w: Writer, model: Model) -> None:
    w.u16(len(model.layers))
    for layer in model.layers:
        w.u8(layer.tag).dims(layer.signature())
        for _, arr in layer.arrays():
            w.array_f32(arr)


def model_to_bytes(model: Model) -> bytes:
    w = Writer()
    write_model(w, model)
    return frame(MAGIC, w.payload())


def read_model(r: Reader, dtype=np.float32) -> Model:
    count = r.u16()
    layers: list[Layer] = []
    input_shape = shape = None
    for _ in range(count):
        tag = r.u8()
        if tag not in LAYER_KINDS:
            raise FormatError(f"unknown layer kind tag {tag}")
        cls = LAYER_KINDS[tag]
        dims = r.dims()
        layer = cls.from_signature(dims)
        in_shape = _input_shape(cls, dims)
        if input_shape is None:
            input_shape = shape = in_shape
        if in_shape != shape:
            raise FormatError(f"layer {len(layers)} expects input {in_shape}, previous output is {shape}")
        shape = layer.bind(in_shape)
        layer.init(np.random.default_rng(0), dtype)
        for _, arr in layer.arrays():
            arr[...] = r.array_f32(arr.shape)
        layers.append(layer)
    if input_shape is None:
        raise FormatError("checkpoint holds no layers")
    return Model(layers, input_shape, dtype=dtype, init=False)


def model_from_bytes(blob: bytes, dtype=np.float32) -> Model:
    r = unframe(MAGIC, blob)
    model = read_model(r, dtype)
    r.done()
    return model


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path, dtype=np.float32) -> Model:
    return model_from_bytes(Path(path).read_bytes(), dtype)
