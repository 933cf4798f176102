"""EMB1 embedding container writer/reader.

Layout: magic "EMB1", record count and dimension (1536) as u32 LE, then per
record a u32 case-id byte length, the UTF-8 id, and 1536 float32 LE values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
DIM = 1536


def write_embeddings(path, records: list[tuple[str, np.ndarray]]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(records), DIM))
        for case_id, vec in records:
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (DIM,):
                raise ValueError(
                    f"embedding for {case_id!r} has shape {vec.shape}, need ({DIM},)"
                )
            ident = case_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(vec.tobytes())


def read_embeddings(path) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not an EMB1 file")
    count, dim = struct.unpack_from("<II", data, 4)
    if dim != DIM:
        raise ValueError(f"{path} has dim {dim}, expected {DIM}")
    pos = 12
    out = []
    for _ in range(count):
        (ilen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ident = data[pos : pos + ilen].decode("utf-8")
        pos += ilen
        vec = np.frombuffer(data, dtype="<f4", count=DIM, offset=pos).copy()
        pos += 4 * DIM
        out.append((ident, vec))
    return out
