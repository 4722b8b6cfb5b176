"""Binary model checkpoints.

Layout: the 8-byte magic ``RAIDCKPT``, a little-endian ``uint32`` format
version, a ``uint32`` header length, a UTF-8 JSON header with sorted keys
(``N``, ``M``, ``d``, ``dtype``, optional ``meta``), then ``P`` and ``Q`` as
row-major little-endian float64. The same model and metadata always give
the same bytes.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from raid.train import EmbeddingModel

MAGIC = b"RAIDCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: EmbeddingModel, meta=None) -> bytes:
    header = {"N": model.num_users, "M": model.num_items, "d": model.dim, "dtype": "<f8"}
    if meta is not None:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(blob)),
        blob,
        np.ascontiguousarray(model.P, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.Q, dtype="<f8").tobytes(),
    ])


def loads(data: bytes):
    """Return ``(model, meta)``."""
    if data[:8] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint header")
    version, n = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + n].decode())
        N, M, d = header["N"], header["M"], header["d"]
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if (len(data) - 16 - n) % 8:
        raise CheckpointError("truncated checkpoint body")
    body = np.frombuffer(data, dtype="<f8", offset=16 + n)
    if body.size != (N + M) * d:
        raise CheckpointError(f"expected {(N + M) * d} values, found {body.size}")
    P = body[: N * d].reshape(N, d).astype(float)
    Q = body[N * d:].reshape(M, d).astype(float)
    return EmbeddingModel(P, Q), header.get("meta")


def save(path, model: EmbeddingModel, meta=None):
    """Write atomically: a crash never leaves a half-written checkpoint."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(model, meta))
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
