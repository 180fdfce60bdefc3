"""Binary checkpoint format.

Layout: ``b"DASC"``, format version (uint32 LE), header length (uint64 LE),
UTF-8 JSON header, then every parameter as little-endian float64 in header
order.  The header records the model config, tensor names/shapes/byte
offsets (relative to the payload start), the LSTM gate order, and any extra
metadata (vocabulary, seed, epoch).  JSON keys are sorted so equal inputs
give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import SummarizerConfig, SummarizerParams

MAGIC = b"DASC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: SummarizerParams, meta: dict | None = None) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, t in params.named().items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": params.cfg.to_dict(),
        "gate_order": "i,f,o,g",
        "tensors": tensors,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def loads(blob: bytes) -> tuple[SummarizerParams, dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a DAS checkpoint (bad magic bytes)")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    payload = memoryview(blob)[start + hlen:]
    cfg = SummarizerConfig.from_dict(header["config"])
    params = SummarizerParams.init(cfg, seed=0)
    named = params.named()
    seen = set()
    end = 0
    for entry in sorted(header["tensors"], key=lambda e: e["offset"]):
        name = entry["name"]
        if name not in named:
            raise CheckpointError(f"checkpoint tensor {name!r} is not part of this model config")
        if entry["offset"] < end or entry["offset"] + entry["nbytes"] > len(payload):
            raise CheckpointError(f"tensor {name!r} overlaps another tensor or runs past the payload")
        arr = np.frombuffer(payload[entry["offset"]:entry["offset"] + entry["nbytes"]], dtype="<f8")
        shape = tuple(entry["shape"])
        if named[name].shape != shape or arr.size != int(np.prod(shape)):
            raise CheckpointError(f"tensor {name!r}: shape {shape} does not match config {named[name].shape}")
        named[name].data[...] = arr.reshape(shape)
        seen.add(name)
        end = entry["offset"] + entry["nbytes"]
    missing = set(named) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    return params, header["meta"]


def save(path, params: SummarizerParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta))


def load(path) -> tuple[SummarizerParams, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
