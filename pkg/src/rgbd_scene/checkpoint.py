"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"DSC1" | version u16 | spec length u32 | spec UTF-8 JSON
    | entry count u32
    | per entry: name length u16 | name UTF-8 | rank u8 | extents u32 * rank | float32 payload
    | CRC32 u32 of every preceding byte
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .layers import GATE_NAMES, LstmWeights
from .models import CnnLstm, FusedVideoModel, FusionHead, FusionSpec, Model, ModelSpec
from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"DSC1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(spec, tensors):
    """Serialize a spec dict and an ordered ``name -> array`` mapping to bytes."""
    blob = json.dumps(spec, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = np.asarray(t)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(tensor_to_bytes(t))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data):
    """Inverse of :func:`encode`; returns ``(spec, tensors)``."""
    if len(data) < 14 or data[:4] != MAGIC:
        raise CheckpointError("not a DSC1 checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version, blen = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    spec = json.loads(take(blen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = tensor_from_bytes(take(4 * size), shape)
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes before checksum")
    return spec, tensors


def crc_of(path):
    data = Path(path).read_bytes()
    return struct.unpack("<I", data[-4:])[0]


def save_checkpoint(path, model, extra=None):
    spec = model.describe()
    if extra:
        spec = {**spec, "extra": extra}
    Path(path).write_bytes(encode(spec, model.params))
    return path


def _build_branch(desc, tensors, prefix):
    cnn_params = {}
    for k in ModelSpec.from_dict(desc["cnn"]).param_shapes():
        cnn_params[k] = tensors[prefix + k]
    cnn = Model(ModelSpec.from_dict(desc["cnn"]), params=cnn_params)
    lstm = LstmWeights(**{n: tensors[f"{prefix}lstm.{n}"] for n in GATE_NAMES})
    head = None
    if f"{prefix}head.weight" in tensors:
        head = {"weight": tensors[f"{prefix}head.weight"], "bias": tensors[f"{prefix}head.bias"]}
    return CnnLstm(cnn, lstm.hidden, lstm=lstm, head=head, prefix=prefix)


def model_from(spec, tensors):
    kind = spec["kind"]
    if kind == "cnn":
        return Model(ModelSpec.from_dict(spec["model"]), params=tensors)
    if kind == "cnn_lstm":
        return _build_branch(spec, tensors, "")
    if kind == "fused":
        rgb = _build_branch(spec["rgb"], tensors, "rgb/")
        depth = _build_branch(spec["depth"], tensors, "depth/")
        fspec = FusionSpec(**spec["fusion"])
        fusion = FusionHead(fspec, params={k: v for k, v in tensors.items() if k.startswith("fusion.")})
        return FusedVideoModel(rgb, depth, fspec.hidden_width, fusion=fusion)
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint(path):
    """Returns ``(model, spec)``."""
    spec, tensors = decode(Path(path).read_bytes())
    return model_from(spec, tensors), spec
