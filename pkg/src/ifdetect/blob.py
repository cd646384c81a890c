"""Binary artifacts: a JSON header followed by a little-endian float64 payload.

Layout::

    magic      4 bytes (ASCII tag, one per artifact kind)
    hlen       uint64 little-endian, length of the header in bytes
    header     UTF-8 JSON, keys sorted
    payload    float64 little-endian, count given by header["count"]
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ifdetect.errors import FormatError


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_blob(path: str | Path, magic: bytes, header: dict, payload: np.ndarray) -> None:
    assert len(magic) == 4
    flat = np.ascontiguousarray(payload, dtype="<f8").ravel()
    header = dict(header, count=int(flat.size))
    hbytes = canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(flat.tobytes())


def read_blob(path: str | Path, magic: bytes) -> tuple[dict, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen])
    body = raw[12 + hlen :]
    if len(body) != 8 * header["count"]:
        raise FormatError(f"{path}: payload is {len(body)} bytes, header declares {header['count']} floats")
    return header, np.frombuffer(body, dtype="<f8").astype(np.float64)
