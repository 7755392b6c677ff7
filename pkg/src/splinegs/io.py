"""File formats: 8-bit PNG, little-endian PFM depth maps, raw float64 dumps."""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_png(path, img: np.ndarray) -> None:
    """img: (H, W) or (H, W, 3) floats in [0, 1], quantized to 8 bits."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path) -> np.ndarray:
    """Returns floats in [0, 1], shape (H, W) for grayscale or (H, W, 3)."""
    img = np.asarray(Image.open(path))
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    return img.astype(np.float64) / 255.0


def save_pfm(path, data: np.ndarray) -> None:
    """Grayscale PFM, little-endian float32, bottom-up row order."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM writer handles single-channel maps only")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")  # negative scale = little endian
        fh.write(arr[::-1].tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        count = w * h
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(f"{path}: truncated PFM payload")
        data = np.frombuffer(raw, dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w)[::-1].astype(np.float64)


def save_raw(path, data: np.ndarray) -> None:
    """Raw planar dump: int64 ndim + shape, then float64 little-endian values."""
    arr = np.ascontiguousarray(data, dtype="<f8")
    with open(path, "wb") as fh:
        shape = np.array([arr.ndim, *arr.shape], dtype="<i8")
        fh.write(shape.tobytes())
        fh.write(arr.tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (ndim,) = np.frombuffer(fh.read(8), dtype="<i8")
        shape = np.frombuffer(fh.read(8 * int(ndim)), dtype="<i8")
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(tuple(int(s) for s in shape)).copy()
