"""Single-file checkpoint container with bit-exact round-trips.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON
header, then the raw tensor bytes back to back. The header records the
model config, a free-form metadata dict, and for each tensor its name,
dtype, shape, and byte offset into the blob. Tensors are written in C
order, so save followed by load reproduces every array bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from flexdepth.model import ModelConfig, Parameters

MAGIC = b"FDCKPT01"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, config: ModelConfig, params: Parameters, metadata: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": {
            "enc_layers": config.enc_layers,
            "dec_layers": config.dec_layers,
            "width": config.width,
            "heads": config.heads,
            "ffn_width": config.ffn_width,
            "vocab_size": config.vocab_size,
            "max_len": config.max_len,
        },
        "metadata": metadata or {},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Returns (config, params, metadata)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (head_len,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    head_start = len(MAGIC) + 8
    body_start = head_start + head_len
    if body_start > len(data):
        raise CheckpointError(f"{path} is truncated")
    try:
        header = json.loads(data[head_start:body_start].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from None
    config = ModelConfig(**header["config"])
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        start = body_start + entry["offset"]
        end = start + dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if end > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(
            data[start:end], dtype=dtype
        ).reshape(shape).copy()
    return config, Parameters(tensors), header["metadata"]
