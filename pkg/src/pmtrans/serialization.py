"""PMTN tensor files and PMTC checkpoint archives.

PMTN layout::

    b"PMTN" | version 0x01 | dtype byte | rank byte | 0x00 | rank * u32 LE dims | payload LE

dtype byte 0x01 is float32, 0x02 is uint8. A PMTC archive is ``b"PMTC"``, a
u32 LE entry count, then per entry a u16 LE name length, the UTF-8 name and
an embedded PMTN blob.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"PMTN"
ARCHIVE_MAGIC = b"PMTC"
VERSION = 0x01
DTYPE_CODES = {0x01: np.dtype("<f4"), 0x02: np.dtype("u1")}
_CODE_FOR = {np.dtype("float32"): 0x01, np.dtype("uint8"): 0x02}


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        code = 0x02
    elif np.issubdtype(arr.dtype, np.floating):
        code = 0x01
        arr = arr.astype("<f4")
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = TENSOR_MAGIC + bytes([VERSION, code, arr.ndim, 0])
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr).tobytes(order="C")


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated stream")
    return b


def read_tensor_from(f: BinaryIO) -> np.ndarray:
    head = _read_exact(f, 8)
    if head[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {head[:4]!r}")
    version, code, rank, reserved = head[4:8]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code:#x}")
    if reserved != 0:
        raise FormatError("reserved byte must be zero")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(f, count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def decode_tensor(blob: bytes) -> np.ndarray:
    return read_tensor_from(io.BytesIO(blob))


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor_from(f)


def encode_archive(entries: Mapping[str, np.ndarray]) -> bytes:
    out = [ARCHIVE_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(encode_tensor(arr))
    return b"".join(out)


def decode_archive(blob: bytes) -> dict[str, np.ndarray]:
    f = io.BytesIO(blob)
    if _read_exact(f, 4) != ARCHIVE_MAGIC:
        raise FormatError("bad archive magic")
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, n).decode("utf-8")
        entries[name] = read_tensor_from(f)
    return entries


def save_archive(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_archive(entries))


def load_archive(path) -> dict[str, np.ndarray]:
    return decode_archive(Path(path).read_bytes())


def text_to_bytes(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def bytes_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")
