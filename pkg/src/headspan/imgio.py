"""Image and raster I/O.

8-bit PNGs go through Pillow. Normal maps are 16-bit RGB PNGs encoding
n * 0.5 + 0.5; Pillow cannot write 16-bit RGB, so a minimal PNG codec
(filter 0, fixed zlib level) lives here. Depth/normal dumps use a raw
little-endian float32 format with a dimensions header.
"""

import struct
import zlib

import numpy as np
from PIL import Image

from .errors import InvalidParameterError

F32_MAGIC = b"HSF1"


def save_png_u8(path, img: np.ndarray):
    """float image in [0, 1] (H, W) or (H, W, 3) -> 8-bit PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """8-bit PNG -> float image in [0, 1]."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise InvalidParameterError(f"{path} is not an 8-bit PNG")
    return arr.astype(np.float64) / 255.0


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def save_png16_rgb(path, img: np.ndarray):
    """float (H, W, 3) in [0, 1] -> 16-bit RGB PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidParameterError("expected an (H, W, 3) image")
    h, w = arr.shape[:2]
    samples = np.round(arr * 65535.0).astype(">u2")
    raw = b"".join(b"\x00" + samples[r].tobytes() for r in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 16, 2, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(_png_chunk(b"IHDR", ihdr))
        f.write(_png_chunk(b"IDAT", zlib.compress(raw, 6)))
        f.write(_png_chunk(b"IEND", b""))


def load_png16_rgb(path) -> np.ndarray:
    """16-bit RGB PNG (filter 0 rows) -> float (H, W, 3) in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise InvalidParameterError(f"{path} is not a PNG")
    pos = 8
    idat = b""
    w = h = depth = color = None
    while pos < len(data):
        (ln,) = struct.unpack_from(">I", data, pos)
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + ln]
        pos += 12 + ln
        if tag == b"IHDR":
            w, h, depth, color = struct.unpack_from(">IIBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if depth != 16 or color != 2:
        raise InvalidParameterError(f"{path} is not a 16-bit RGB PNG")
    raw = zlib.decompress(idat)
    stride = 1 + w * 6
    out = np.empty((h, w, 3), dtype=np.uint16)
    for r in range(h):
        row = raw[r * stride:(r + 1) * stride]
        if row[0] != 0:
            raise InvalidParameterError("unsupported PNG row filter")
        out[r] = np.frombuffer(row[1:], dtype=">u2").reshape(w, 3)
    return out.astype(np.float64) / 65535.0


def encode_normal_map(normals: np.ndarray) -> np.ndarray:
    """Unit (or zero) vectors -> [0, 1] encoding n * 0.5 + 0.5."""
    return np.asarray(normals) * 0.5 + 0.5


def decode_normal_map(encoded: np.ndarray) -> np.ndarray:
    return np.asarray(encoded) * 2.0 - 1.0


def save_f32(path, arr: np.ndarray):
    """Raw little-endian float32 dump: magic, ndim, dims, row-major data."""
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(F32_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != F32_MAGIC:
        raise InvalidParameterError(f"{path} is not a float32 dump")
    (ndim,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    off = 8 + 4 * ndim
    return np.frombuffer(data, dtype="<f4", offset=off).reshape(dims).astype(
        np.float64)
