"""RGB image helpers: float arrays in [0, 1], 8-bit PNG/PPM files, area resampling."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_png(image: np.ndarray, path: str | Path) -> None:
    # no ancillary chunks, so identical pixels give identical bytes
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def save_ppm(image: np.ndarray, path: str | Path) -> None:
    data = to_uint8(image)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def save_image(image: np.ndarray, path: str | Path) -> None:
    if str(path).lower().endswith(".ppm"):
        save_ppm(image, path)
    else:
        save_png(image, path)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    out = []
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = max(((i + 1) * n_in) // n_out, lo + 1)
        out.append((lo, min(hi, n_in)))
    return out


def resample_area(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Box-filter resample. Upsampling degenerates to nearest-neighbour."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValidationError(f"expected an HxWxC image, got shape {img.shape}")
    h, w, _ = img.shape
    if h % out_h == 0 and w % out_w == 0:
        return img.reshape(out_h, h // out_h, out_w, w // out_w, -1).mean(axis=(1, 3))
    rows = _bins(h, out_h)
    cols = _bins(w, out_w)
    out = np.empty((out_h, out_w, img.shape[2]))
    for i, (r0, r1) in enumerate(rows):
        band = img[r0:r1]
        for j, (c0, c1) in enumerate(cols):
            out[i, j] = band[:, c0:c1].mean(axis=(0, 1))
    return out


def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(image)
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    cols = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return img[rows][:, cols]
