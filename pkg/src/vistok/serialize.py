"""Binary formats: tensor container, token stream, checkpoint.

All integers little-endian. Writes go through a temp file plus rename so
a crash never leaves a half-written artifact, and the byte layout is a
pure function of the content (no timestamps, no dict-order dependence),
which is what makes same-seed runs file-identical.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from vistok.errors import FormatError

TENSOR_MAGIC = b"OTSR"
TOKENS_MAGIC = b"OTTK"
CHECKPOINT_MAGIC = b"OTCK"
VERSION = 1
COND_NONE = 0xFFFFFFFF

_DTYPES = {"f32": ("<f4", 0), "i64": ("<i8", 1)}
_DTYPE_BY_CODE = {code: (name, np_dt) for name, (np_dt, code) in _DTYPES.items()}


def atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated file while reading {what}")
    return raw


# -- tensor container --------------------------------------------------------

def save_tensor(path: str, arr: np.ndarray) -> None:
    # asarray keeps 0-d inputs 0-d where ascontiguousarray would promote to (1,)
    arr = np.asarray(arr, dtype=np.float32, order="C")
    if arr.ndim > 255:
        raise FormatError(f"too many dimensions: {arr.ndim}")
    head = TENSOR_MAGIC + struct.pack("<HBB", VERSION, 0, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    atomic_write(path, head + dims + arr.astype("<f4").tobytes())


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != TENSOR_MAGIC:
            raise FormatError(f"{path}: not a tensor container")
        version, dtype, ndim = struct.unpack("<HBB", _read_exact(fh, 4, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if dtype != 0:
            raise FormatError(f"{path}: unsupported dtype code {dtype}")
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims")) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = _read_exact(fh, 4 * count, "payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


# -- token stream -------------------------------------------------------------

def save_tokens(path: str, indices: np.ndarray, codebook_size: int, cond=None) -> None:
    idx = np.asarray(indices)
    if idx.ndim != 3:
        raise FormatError(f"token grid must be (slots, h, w), got {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise FormatError(f"token indices must be integers, got {idx.dtype}")
    if codebook_size < 1 or codebook_size > COND_NONE:
        raise FormatError(f"bad codebook size {codebook_size}")
    if idx.size and (idx.min() < 0 or idx.max() >= codebook_size):
        raise FormatError("token index out of range for the codebook")
    if any(s > 0xFFFF for s in idx.shape):
        raise FormatError(f"grid {idx.shape} exceeds the u16 dims")
    if cond is not None and not (0 <= int(cond) < COND_NONE):
        raise FormatError(f"bad condition id {cond}")
    wide = codebook_size > 0x10000
    head = TOKENS_MAGIC + struct.pack(
        "<HIHHHI", VERSION, codebook_size, idx.shape[0], idx.shape[1], idx.shape[2],
        COND_NONE if cond is None else int(cond),
    )
    payload = idx.astype("<u4" if wide else "<u2").tobytes()
    atomic_write(path, head + payload)


def load_tokens(path: str):
    """Returns (indices (slots,h,w) int64, codebook_size, cond-or-None)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != TOKENS_MAGIC:
            raise FormatError(f"{path}: not a token stream")
        version, k, s, h, w, cond = struct.unpack("<HIHHHI", _read_exact(fh, 16, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        wide = k > 0x10000
        width = 4 if wide else 2
        payload = _read_exact(fh, width * s * h * w, "indices")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    idx = np.frombuffer(payload, dtype="<u4" if wide else "<u2").astype(np.int64)
    idx = idx.reshape(s, h, w)
    if idx.size and idx.max() >= k:
        raise FormatError(f"{path}: token index {int(idx.max())} out of range for K={k}")
    return idx, int(k), None if cond == COND_NONE else int(cond)


# -- checkpoint ----------------------------------------------------------------

def save_checkpoint(path: str, meta: dict, arrays: dict) -> None:
    """meta: json-able dict; arrays: name -> float32/int64 ndarray."""
    manifest = []
    blobs = []
    for key in sorted(arrays):
        arr = arrays[key]
        if arr.dtype == np.float32:
            dname = "f32"
        elif arr.dtype == np.int64:
            dname = "i64"
        else:
            raise FormatError(f"checkpoint array {key}: unsupported dtype {arr.dtype}")
        np_dt, _ = _DTYPES[dname]
        manifest.append({"key": key, "dtype": dname, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).astype(np_dt).tobytes())
    doc = json.dumps({"meta": meta, "arrays": manifest},
                     sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = CHECKPOINT_MAGIC + struct.pack("<HQ", VERSION, len(doc))
    atomic_write(path, head + doc + b"".join(blobs))


def load_checkpoint(path: str):
    """Returns (meta, arrays)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        version, doc_len = struct.unpack("<HQ", _read_exact(fh, 10, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        try:
            doc = json.loads(_read_exact(fh, doc_len, "manifest").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad manifest: {exc}") from None
        if not isinstance(doc, dict) or "meta" not in doc or "arrays" not in doc:
            raise FormatError(f"{path}: manifest missing meta/arrays")
        arrays = {}
        for entry in doc["arrays"]:
            np_dt, _ = _DTYPES[entry["dtype"]]
            shape = tuple(int(x) for x in entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            width = np.dtype(np_dt).itemsize
            raw = _read_exact(fh, width * count, entry["key"])
            arrays[entry["key"]] = np.frombuffer(raw, dtype=np_dt).reshape(shape).copy()
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after arrays")
    return doc["meta"], arrays
