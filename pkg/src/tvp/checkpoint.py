"""Sectioned little-endian checkpoint container with a SHA-256 trailer.

Layout::

    magic b"TVPCKPT\\x00" | u32 version | u32 n_sections
    n_sections x ( u16 name_len | name | u64 payload_len | payload )
    sha256(all preceding bytes)  (32 bytes)

Payloads are either UTF-8 JSON or tensor tables. A tensor table is
``u32 count`` followed by ``u16 name_len | name | u8 dtype | u8 ndim |
ndim x u64 | raw little-endian data`` per tensor, in insertion order.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, IntegrityError

MAGIC = b"TVPCKPT\x00"
VERSION = 1
_DTYPES = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.uint8, "u1"),
    4: (torch.bool, "u1"),
    5: (torch.int32, "<i4"),
}
_CODES = {t: c for c, (t, _) in _DTYPES.items()}


def pack_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise FormatError(f"cannot serialize dtype {t.dtype} ({name})")
        code = _CODES[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        arr = t.numpy()
        buf.write(arr.astype(_DTYPES[code][1], copy=False).tobytes())
    return buf.getvalue()


def unpack_tensors(blob: bytes) -> dict[str, torch.Tensor]:
    out = {}
    try:
        (count,), off = struct.unpack_from("<I", blob, 0), 4
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + n].decode()
            off += n
            code, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", blob, off)
            off += 8 * ndim
            dtype, np_dtype = _DTYPES[code]
            numel = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, np_dtype, numel, off).reshape(shape)
            off += arr.nbytes
            t = torch.from_numpy(arr.copy())
            out[name] = t.bool() if dtype is torch.bool else t.to(dtype)
    except (struct.error, ValueError, KeyError) as exc:
        raise FormatError("malformed tensor table") from exc
    return out


def write_container(path: str | Path, sections: dict[str, bytes]) -> str:
    """Write sections; returns the hex SHA-256 trailer (the file digest)."""
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(sections)))
    for name, payload in sections.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload)
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)
    return digest.hex()


def read_container(path: str | Path) -> tuple[dict[str, bytes], str]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise IntegrityError(f"{path} is not a checkpoint (bad magic or truncated)")
    body, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise IntegrityError(f"checkpoint {path} failed its SHA-256 check (truncated or corrupted)")
    version, n = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off, sections = len(MAGIC) + 8, {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + ln].decode()
        off += ln
        (size,) = struct.unpack_from("<Q", body, off)
        off += 8
        sections[name] = body[off : off + size]
        off += size
    return sections, trailer.hex()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode()


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"{idx}.{k}"] = v if torch.is_tensor(v) else torch.tensor(v)
    return tensors, {"param_groups": sd["param_groups"]}


def load_optimizer(opt: torch.optim.Optimizer, tensors: dict, meta: dict):
    state: dict = {}
    for key, v in tensors.items():
        idx, k = key.split(".", 1)
        state.setdefault(int(idx), {})[k] = v
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
