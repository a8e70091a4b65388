"""Binary netpbm IO: P6 (RGB) images and P5 (gray) masks/maps."""

from __future__ import annotations

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_pgm", "read_pgm"]


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0),
                   0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"write_ppm expects (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(image).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (H, W) float map in [0, 1] as binary P5 (x255 quantized)."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"write_pgm expects (H, W), got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(gray).tobytes())


def _read_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    vals = []
    while len(vals) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated netpbm header")
        body = line.split(b"#", 1)[0]
        vals.extend(int(t) for t in body.split())
    w, h, maxval = vals[:3]
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file to an (H, W, 3) float32 array in [0, 1]."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return (np.frombuffer(raw, dtype=np.uint8)
            .reshape(h, w, 3).astype(np.float32) / 255.0)


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file to an (H, W) float32 array in [0, 1]."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return (np.frombuffer(raw, dtype=np.uint8)
            .reshape(h, w).astype(np.float32) / 255.0)
