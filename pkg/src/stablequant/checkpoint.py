"""Binary tensor container ("SQNT") and network checkpoints.

Layout, all little-endian::

    b"SQNT" | u32 version | u32 record count
    per record: u16 name length | utf-8 name | u8 dtype tag | u8 rank
                | u32 dims[rank] | payload

Dtype tags: 0 = f32, 1 = f64, 2 = i32. Text metadata (the block specs,
the architecture fingerprint) is stored as i32 records of byte values.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .layers import BlockSpec, Network

MAGIC = b"SQNT"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode(), dtype=np.uint8).astype(np.int32)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode()


def dumps(records: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise CheckpointError(f"record {name!r}: unsupported dtype {arr.dtype}")
        key = name.encode()
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<BB", _TAG_OF[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_TAGS[_TAG_OF[arr.dtype]]).tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an SQNT file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    pos = 12
    records = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + klen].decode()
            pos += klen
            tag, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dt = _TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"record {name!r} is truncated")
            arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
            records[name] = arr.astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return records


def save_records(path, records: dict) -> None:
    atomic_write_bytes(path, dumps(records))


def load_records(path) -> dict:
    return loads(Path(path).read_bytes())


# -- networks --------------------------------------------------------------------

def specs_to_json(specs) -> str:
    return json.dumps([asdict(s) for s in specs], sort_keys=True)


def specs_from_json(text: str) -> list[BlockSpec]:
    return [BlockSpec(**d) for d in json.loads(text)]


def state_dict(net: Network) -> dict:
    """Parameters, quantizer state and pre-quantized kernels as records."""
    rec = {}
    for name, p in net.named_parameters():
        rec[name] = np.asarray(p.data, dtype=np.float64)
    for name, q in net.named_quantizers():
        rec[f"{name}.bits"] = np.asarray(q.bits, dtype=np.int32)
        rec[f"{name}.flags"] = np.asarray([q.enabled, q.initialized, q.signed], dtype=np.int32)
    for name, k in net.kernels():
        rec[f"{name}.wq"] = k.effective().astype(np.float64)
    return rec


def load_state(net: Network, rec: dict) -> None:
    for name, p in net.named_parameters():
        if name not in rec:
            raise CheckpointError(f"missing record {name!r}")
        arr = rec[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"record {name!r}: shape {arr.shape} != {p.data.shape}")
        p.data = np.array(arr, dtype=np.float64)
    for name, q in net.named_quantizers():
        q.bits = int(rec[f"{name}.bits"])
        enabled, initialized, signed = (bool(v) for v in rec[f"{name}.flags"])
        if signed != q.signed:
            raise CheckpointError(f"quantizer {name!r}: signedness differs")
        q.enabled, q.initialized = enabled, initialized


def save_checkpoint(path, net: Network, extra: dict | None = None) -> None:
    rec = {"meta.specs": encode_text(specs_to_json(net.specs)),
           "meta.fingerprint": encode_text(net.fingerprint),
           "meta.task": encode_text(net.task)}
    if net.graph is not None:
        rec["graph.n"] = np.asarray(net.graph.graph.n, dtype=np.int32)
        rec["graph.edges"] = net.graph.graph.edges.astype(np.int32)
    rec.update(state_dict(net))
    rec.update(extra or {})
    save_records(path, rec)


def read_checkpoint_specs(rec: dict) -> tuple[list[BlockSpec], str]:
    return specs_from_json(decode_text(rec["meta.specs"])), decode_text(rec["meta.task"])


def load_checkpoint(path, net: Network) -> dict:
    """Load into ``net``; refuses a checkpoint whose architecture fingerprint differs."""
    rec = load_records(path)
    fp = decode_text(rec.get("meta.fingerprint", np.zeros(0, np.int32)))
    if fp != net.fingerprint:
        raise CheckpointError("architecture fingerprint mismatch: checkpoint was saved "
                              "for a different block list")
    load_state(net, rec)
    return rec
