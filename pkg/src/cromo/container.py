"""Byte-deterministic array container used for checkpoints and snapshots.

Layout: an 8-byte magic, a little-endian uint64 header length, a canonical
JSON header (sorted keys), then the raw array payloads back to back. Identical
contents always serialize to identical bytes, which run determinism checks
rely on; zip/pickle formats do not give that guarantee.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ARRC0001"
FORMAT_VERSION = 1


class ContainerError(RuntimeError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable meta dict."""
    entries = {}
    offset = 0
    ordered = sorted(arrays)
    for name in ordered:
        a = np.ascontiguousarray(arrays[name])
        entries[name] = {"dtype": a.dtype.str, "shape": list(a.shape),
                         "offset": offset, "nbytes": int(a.nbytes)}
        offset += a.nbytes
    header = {"version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in ordered:
            fh.write(np.ascontiguousarray(arrays[name]).tobytes())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta); raises ContainerError on malformed files."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ContainerError(f"{path}: not an array container (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported container version "
                                 f"{header.get('version')!r}")
        payload = fh.read()
    arrays = {}
    for name, ent in header["arrays"].items():
        start = ent["offset"]
        buf = payload[start:start + ent["nbytes"]]
        if len(buf) != ent["nbytes"]:
            raise ContainerError(f"{path}: truncated payload for {name!r}")
        arrays[name] = np.frombuffer(buf, dtype=np.dtype(ent["dtype"])) \
                         .reshape(ent["shape"]).copy()
    return arrays, header["meta"]


def save_embeddings(path: str | Path, embeddings: np.ndarray,
                    labels: np.ndarray, task_ids: np.ndarray,
                    meta: dict | None = None) -> None:
    """Embedding dump: float32 [N, D] matrix with parallel label/task arrays."""
    z = np.ascontiguousarray(embeddings, dtype=np.float32)
    if z.ndim != 2:
        raise ContainerError("embeddings must be [N, D]")
    if len(labels) != z.shape[0] or len(task_ids) != z.shape[0]:
        raise ContainerError("labels/task_ids length must match embeddings")
    header = dict(meta or {})
    header.update({"n": int(z.shape[0]), "dim": int(z.shape[1]), "dtype": "<f4"})
    save_arrays(path, {
        "embeddings": z,
        "labels": np.asarray(labels, dtype=np.int64),
        "task_ids": np.asarray(task_ids, dtype=np.int64),
    }, meta=header)


def load_embeddings(path: str | Path):
    arrays, meta = load_arrays(path)
    return arrays["embeddings"], arrays["labels"], arrays["task_ids"], meta
