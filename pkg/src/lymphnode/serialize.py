"""Versioned binary container for model weights and plugin sections.

Layout: magic ``LYMF`` | u16 version | u32 header length | UTF-8 JSON
header | raw payload. The header carries an index of named float32
tensors and named byte sections, each with an offset into the payload.
All multi-byte integers are little-endian; tensor payloads are raw
little-endian float32 in index order.
"""

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"LYMF"
VERSION = 1

F32 = np.float32
_LE_F32 = np.dtype("<f4")


def write_container(path, meta, tensors, sections=None):
    """Write tensors (name -> float32 array) plus raw byte sections.

    ``meta`` is an arbitrary JSON-serializable dict merged into the
    header. ``sections`` maps tag -> (bytes, secret_flag).
    """
    sections = sections or {}
    payload = bytearray()
    tensor_index = {}
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_LE_F32)
        tensor_index[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": len(payload),
        }
        payload += arr.tobytes()
    section_index = {}
    for tag, (blob, secret) in sections.items():
        section_index[tag] = {
            "offset": len(payload),
            "length": len(blob),
            "secret": bool(secret),
        }
        payload += blob
    header = dict(meta)
    header["tensors"] = tensor_index
    header["sections"] = section_index
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def read_container(path):
    """Read back (meta, tensors, sections). Raises FormatError on damage."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10:
        raise FormatError("container truncated before header")
    if raw[:4] != MAGIC:
        raise FormatError("bad magic")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    (header_len,) = struct.unpack("<I", raw[6:10])
    if len(raw) < 10 + header_len:
        raise FormatError("container truncated inside header")
    try:
        header = json.loads(raw[10 : 10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    payload = raw[10 + header_len :]
    tensors = {}
    for name, entry in header.get("tensors", {}).items():
        if entry.get("dtype") != "f32":
            raise FormatError(f"tensor {name}: unsupported dtype {entry.get('dtype')}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise FormatError(f"tensor {name}: payload truncated")
        tensors[name] = (
            np.frombuffer(payload[start:end], dtype=_LE_F32).astype(F32).reshape(shape)
        )
    sections = {}
    for tag, entry in header.get("sections", {}).items():
        start, length = entry["offset"], entry["length"]
        if start + length > len(payload):
            raise FormatError(f"section {tag}: payload truncated")
        sections[tag] = payload[start : start + length]
    meta = {k: v for k, v in header.items() if k not in ("tensors", "sections")}
    return meta, tensors, sections
