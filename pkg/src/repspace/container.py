"""Low-level reader/writer for the FBN1 binary container.

Layout: 4 magic bytes ``FBN1``, a little-endian uint32 header length, a UTF-8
header of ``key: value`` lines, then a raw array payload whose dtype and
layout are declared in the header. Writes go through a temp file and an
atomic rename so a partially written container is never observable.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

MAGIC = b"FBN1"

_DTYPES = {
    "f32le": np.dtype("<f4"),
    "f64le": np.dtype("<f8"),
}


class ContainerError(ValueError):
    """Malformed or unreadable container file."""


def encode_header(fields: dict[str, str]) -> bytes:
    lines = []
    for key, value in fields.items():
        if ":" in key or "\n" in key or "\n" in value:
            raise ContainerError(f"illegal header field {key!r}")
        lines.append(f"{key}: {value}\n")
    return "".join(lines).encode("utf-8")


def decode_header(raw: bytes) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in raw.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ContainerError(f"malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def write_container(path: str | os.PathLike, fields: dict[str, str], payload: np.ndarray) -> None:
    """Write header fields plus a flat array payload atomically.

    ``fields`` must include ``dtype`` (``f32le`` or ``f64le``); the payload is
    cast to it and stored row-major.
    """
    dtype = fields.get("dtype")
    if dtype not in _DTYPES:
        raise ContainerError(f"unsupported dtype {dtype!r}")
    header = encode_header(fields)
    data = np.ascontiguousarray(payload, dtype=_DTYPES[dtype])
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".fbn-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header).to_bytes(4, "little"))
            fh.write(header)
            fh.write(data.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path: str | os.PathLike) -> tuple[dict[str, str], np.ndarray]:
    """Read (header fields, flat float64 payload) from an FBN1 file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            if magic[:3] == MAGIC[:3] and len(magic) == 4:
                raise ContainerError(
                    f"container version mismatch: got {magic!r}, expected {MAGIC!r}"
                )
            raise ContainerError(f"bad magic {magic!r} in {path}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise ContainerError(f"truncated header length in {path}")
        header_len = int.from_bytes(raw_len, "little")
        header = fh.read(header_len)
        if len(header) != header_len:
            raise ContainerError(f"truncated header in {path}")
        fields = decode_header(header)
        dtype = fields.get("dtype")
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype!r} in {path}")
        blob = fh.read()
    itemsize = _DTYPES[dtype].itemsize
    if len(blob) % itemsize:
        raise ContainerError(f"payload of {path} is not a whole number of {dtype} items")
    values = np.frombuffer(blob, dtype=_DTYPES[dtype])
    return fields, values.astype(np.float64)
