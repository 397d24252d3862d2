"""Binary and text artifact formats.

Three binary containers are used throughout the package:

* ``LFMX`` -- a dense little-endian float32 matrix (node features, hop
  features, precomputed edge features, cached logit matrices).
* ``LFSP`` -- an edge split (positives for train/valid/test plus the fixed
  evaluation negatives).
* ``LFCK`` -- a named-parameter checkpoint with a JSON metadata block.

All writers go through :func:`atomic_write` so that a crash never leaves a
truncated file behind.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MATRIX_MAGIC = b"LFMX"
MATRIX_VERSION = 1
SPLIT_MAGIC = b"LFSP"
SPLIT_VERSION = 1
CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not match the expected binary layout."""


def atomic_write(path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# LFMX matrices
# ---------------------------------------------------------------------------

_MATRIX_HEADER = struct.Struct("<4sIQQ")


def matrix_to_bytes(mat) -> bytes:
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {mat.shape}")
    rows, cols = mat.shape
    header = _MATRIX_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, rows, cols)
    return header + np.ascontiguousarray(mat, dtype="<f4").tobytes()


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _MATRIX_HEADER.size:
        raise FormatError("truncated matrix header")
    magic, version, rows, cols = _MATRIX_HEADER.unpack_from(buf)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MATRIX_MAGIC!r}")
    if version != MATRIX_VERSION:
        raise FormatError(f"unsupported matrix version {version}")
    expected = _MATRIX_HEADER.size + rows * cols * 4
    if len(buf) != expected:
        raise FormatError(f"payload size {len(buf)} does not match header ({expected})")
    data = np.frombuffer(buf, dtype="<f4", offset=_MATRIX_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float32)


def write_matrix(path, mat) -> None:
    atomic_write(path, matrix_to_bytes(mat))


def read_matrix(path) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# LFSP edge splits
# ---------------------------------------------------------------------------


def _pack_array(out: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<i8")
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.write(arr.tobytes())


def _unpack_array(view: memoryview, pos: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<B", view, pos)
    pos += 1
    shape = struct.unpack_from(f"<{ndim}Q", view, pos)
    pos += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(view, dtype="<i8", count=count, offset=pos).reshape(shape)
    return arr.astype(np.int64), pos + 8 * count


def split_to_bytes(split) -> bytes:
    out = io.BytesIO()
    out.write(SPLIT_MAGIC)
    out.write(struct.pack("<IQ", SPLIT_VERSION, split.seed))
    out.write(struct.pack("<3d", *split.ratios))
    out.write(struct.pack("<Q", split.num_eval_neg))
    for arr in (split.train_pos, split.valid_pos, split.test_pos, split.valid_neg, split.test_neg):
        _pack_array(out, arr)
    return out.getvalue()


def split_from_bytes(buf: bytes):
    from .graph import EdgeSplit

    view = memoryview(buf)
    if bytes(view[:4]) != SPLIT_MAGIC:
        raise FormatError("bad split magic")
    version, seed = struct.unpack_from("<IQ", view, 4)
    if version != SPLIT_VERSION:
        raise FormatError(f"unsupported split version {version}")
    pos = 16
    ratios = struct.unpack_from("<3d", view, pos)
    pos += 24
    (num_eval_neg,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    arrays = []
    for _ in range(5):
        arr, pos = _unpack_array(view, pos)
        arrays.append(arr)
    if pos != len(buf):
        raise FormatError("trailing bytes in split file")
    train, valid, test, valid_neg, test_neg = arrays
    return EdgeSplit(
        train_pos=train,
        valid_pos=valid,
        test_pos=test,
        valid_neg=valid_neg,
        test_neg=test_neg,
        seed=seed,
        ratios=tuple(ratios),
        num_eval_neg=int(num_eval_neg),
    )


def write_split(path, split) -> None:
    atomic_write(path, split_to_bytes(split))


def read_split(path):
    return split_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# LFCK checkpoints
# ---------------------------------------------------------------------------


def checkpoint_to_bytes(params: Mapping[str, np.ndarray], metadata: dict | None = None,
                        optimizer: Mapping[str, np.ndarray] | None = None) -> bytes:
    """Serialize named float32 arrays plus JSON metadata.

    Parameters are written in sorted-name order so the byte stream depends only
    on the content, never on dict insertion order.
    """
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<Q", len(meta)))
    out.write(meta)
    for table in (params, optimizer or {}):
        out.write(struct.pack("<Q", len(table)))
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f4")
            raw = name.encode("utf-8")
            out.write(struct.pack("<H", len(raw)))
            out.write(raw)
            out.write(struct.pack("<B", arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.write(arr.tobytes())
    return out.getvalue()


def checkpoint_from_bytes(buf: bytes) -> tuple[dict, dict, dict]:
    """Inverse of :func:`checkpoint_to_bytes`: ``(params, metadata, optimizer)``."""
    view = memoryview(buf)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 8
    (meta_len,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    metadata = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
    pos += meta_len
    tables = []
    for _ in range(2):
        (count,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        table = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape)
            table[name] = arr.astype(np.float32)
            pos += 4 * size
        tables.append(table)
    if pos != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return tables[0], metadata, tables[1]
