"""Image and float-sidecar file formats.

Sidecar layout (little-endian): ``b"ABRDFRAW"``, a ``uint32`` header length,
a UTF-8 JSON header ``{"dtype": "<f4", "shape": [...]}`` and the raw array
bytes in C order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import cv2
import numpy as np

from abrdf.errors import DatasetError

SIDECAR_MAGIC = b"ABRDFRAW"
HDR_GAMMA = 2.2


def read_image(path, gamma: float = HDR_GAMMA) -> np.ndarray:
    """Decode a PNG to float RGB in ``[0, 1]``.

    8-bit files are taken as already tonemapped; 16-bit files are linear HDR
    and are tonemapped with ``gamma`` here.
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"cannot read image {path}")
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=-1)
    elif raw.shape[-1] == 4:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB)
    else:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0
    if raw.dtype == np.uint16:
        return np.clip((raw.astype(np.float64) / 65535.0) ** (1.0 / gamma), 0.0, 1.0)
    raise DatasetError(f"unsupported pixel type {raw.dtype} in {path}")


def read_mask(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"cannot read mask {path}")
    if raw.ndim == 3:
        raw = raw[..., :3].max(axis=-1)
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return raw.astype(np.float64) / scale >= 0.5


def to_uint8(x) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img, bits: int = 8) -> Path:
    """Write ``[0,1]`` grey ``(H,W)`` or RGB ``(H,W,3)`` data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.asarray(img, dtype=np.float64)
    if bits == 8:
        data = to_uint8(x)
    elif bits == 16:
        data = np.clip(np.round(x * 65535.0), 0, 65535).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), data):
        raise DatasetError(f"failed to write {path}")
    return path


def write_normal_png(path, normals) -> Path:
    """16-bit PNG with ``n`` mapped to ``(n + 1) / 2``."""
    return write_png(path, (np.asarray(normals) + 1.0) / 2.0, bits=16)


def write_sidecar(path, array, dtype: str = "<f4") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(array).astype(np.dtype(dtype)))
    header = json.dumps({"dtype": np.dtype(dtype).str, "shape": list(arr.shape)}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())
    return path


def read_sidecar(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(SIDECAR_MAGIC):
        raise DatasetError(f"{path}: not a float sidecar")
    off = len(SIDECAR_MAGIC)
    (hlen,) = struct.unpack("<I", data[off:off + 4])
    header = json.loads(data[off + 4:off + 4 + hlen].decode("utf-8"))
    body = data[off + 4 + hlen:]
    return np.frombuffer(body, dtype=np.dtype(header["dtype"])).reshape(header["shape"]).copy()
