"""8-bit PNG I/O and float-image resampling helpers."""

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Float [0,1] -> rounded uint8; values outside [0,1] are clipped."""
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    """Float [0,1] image to PNG: (H,W,3) color or (H,W) grayscale."""
    data = to_uint8(img)
    assert data.ndim in (2, 3)
    Image.fromarray(data).save(path)


def load_png(path, grayscale: bool = False) -> np.ndarray:
    """PNG to float64 in [0,1]; color images come back (H,W,3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L" if grayscale else "RGB"), dtype=np.float64)
    return arr / 255.0


def save_mask_png(path, mask: np.ndarray) -> None:
    save_png(path, np.asarray(mask, dtype=np.float64))


def load_mask_png(path) -> np.ndarray:
    return load_png(path, grayscale=True) > 0.5


def resize_image(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resample of a float image, channels independent."""
    arr = np.asarray(img, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[:, :, None]
    out = np.empty((height, width, arr.shape[2]))
    for c in range(arr.shape[2]):
        ch = Image.fromarray(arr[:, :, c].astype(np.float32), mode="F")
        out[:, :, c] = np.asarray(ch.resize((width, height), Image.BILINEAR),
                                  dtype=np.float64)
    return out[:, :, 0] if single else out


def encode_normal_map(normal: np.ndarray) -> np.ndarray:
    """Unit-normal image [-1,1] -> displayable [0,1] RGB."""
    return (np.asarray(normal, dtype=np.float64) + 1.0) * 0.5


def encode_depth_map(depth: np.ndarray, alpha: np.ndarray | None = None) -> np.ndarray:
    """Depth to [0,1] grayscale, near bright; empty pixels black."""
    d = np.asarray(depth, dtype=np.float64)
    covered = d > 0.0 if alpha is None else np.asarray(alpha) > 0.5
    if not np.any(covered):
        return np.zeros_like(d)
    lo = float(d[covered].min())
    hi = float(d[covered].max())
    span = hi - lo if hi > lo else 1.0
    out = np.zeros_like(d)
    out[covered] = 1.0 - (d[covered] - lo) / span * 0.9
    return out
