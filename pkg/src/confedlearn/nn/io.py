"""Binary parameter file format.

Layout (all little-endian)::

    b"CFL1"
    u16   tag length, then UTF-8 tag bytes (free text, may be empty)
    u32   number of layers L, then L x u32 layer sizes
    u8    output activation (0 = sigmoid, 1 = identity)
    f64   leaky-ReLU slope
    L-2 x (u8 batch-norm flag, f64 dropout rate)
    u64   number of values V, then V x f64
"""

import struct

import numpy as np

from ..exceptions import ParseError, RejectedInputError
from .params import IDENTITY, SIGMOID, ArchSpec, ModelParams

MAGIC = b"CFL1"
_ACT_CODES = {SIGMOID: 0, IDENTITY: 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def serialize_params(params, tag=""):
    arch = params.arch
    tag_bytes = tag.encode("utf-8")
    if len(tag_bytes) > 0xFFFF:
        raise RejectedInputError("tag longer than 65535 bytes")
    parts = [MAGIC, struct.pack("<H", len(tag_bytes)), tag_bytes,
             struct.pack(f"<I{len(arch.layer_sizes)}I", len(arch.layer_sizes),
                         *arch.layer_sizes),
             struct.pack("<Bd", _ACT_CODES[arch.output_activation], arch.hidden_slope)]
    for bn, rate in zip(arch.batch_norm, arch.dropout):
        parts.append(struct.pack("<Bd", int(bn), rate))
    parts.append(struct.pack("<Q", params.values.shape[0]))
    parts.append(params.values.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ParseError(f"truncated parameter file at byte {self.pos}")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated parameter file at byte {self.pos}")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out


def parse_param_file(data):
    """Decode a parameter file into ``(ModelParams, tag)``."""
    r = _Reader(bytes(data))
    if r.raw(4) != MAGIC:
        raise ParseError("bad magic; not a CFL1 parameter file")
    (tag_len,) = r.take("<H")
    try:
        tag = r.raw(tag_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"tag is not UTF-8: {exc}") from None
    (n_layers,) = r.take("<I")
    if n_layers < 2 or n_layers > 4096:
        raise ParseError(f"implausible layer count {n_layers}")
    sizes = r.take(f"<{n_layers}I")
    act_code, slope = r.take("<Bd")
    if act_code not in _ACT_NAMES:
        raise ParseError(f"unknown activation code {act_code}")
    bn, dropout = [], []
    for _ in range(n_layers - 2):
        flag, rate = r.take("<Bd")
        bn.append(bool(flag))
        dropout.append(rate)
    try:
        arch = ArchSpec(sizes, slope, _ACT_NAMES[act_code], tuple(bn), tuple(dropout))
    except RejectedInputError as exc:
        raise ParseError(f"invalid architecture header: {exc}") from None
    (n_values,) = r.take("<Q")
    if n_values != arch.n_params:
        raise ParseError(
            f"header architecture implies {arch.n_params} values, payload declares {n_values}")
    payload = r.raw(8 * n_values)
    if r.pos != len(r.data):
        raise ParseError(f"{len(r.data) - r.pos} trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    try:
        return ModelParams(arch, values), tag
    except RejectedInputError as exc:
        raise ParseError(str(exc)) from None


def deserialize_params(data):
    return parse_param_file(data)[0]
