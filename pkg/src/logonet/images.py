"""Decoding and resampling images into model input tensors.

PNG/JPEG parsing is delegated to Pillow; everything numeric after the raw
pixels (luminance conversion, bilinear resampling, [0,1] scaling) is defined
here so results are identical wherever the files came from.
"""

import io

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor

# Rec. 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """[H,W,3] -> [H,W], 0.299R + 0.587G + 0.114B."""
    return rgb @ _LUMA


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample [C,H,W] with half-pixel-center sampling.

    Source coordinate for output x is (x+0.5)*scale - 0.5, clamped; at equal
    sizes this is the identity, bit for bit.
    """
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    tl = img[:, y0][:, :, x0]
    tr = img[:, y0][:, :, x1]
    bl = img[:, y1][:, :, x0]
    br = img[:, y1][:, :, x1]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


def _to_tensor(pil_image, channels: int, size: int) -> Tensor:
    rgb = np.asarray(pil_image.convert("RGB"), dtype=np.float64) / 255.0
    if channels == 1:
        planes = luminance(rgb)[None, :, :]
    elif channels == 3:
        planes = rgb.transpose(2, 0, 1)
    else:
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    resized = bilinear_resize(planes, size, size)
    return Tensor(np.clip(resized, 0.0, 1.0).astype(np.float32))


def decode_image(path, channels: int = 1, size: int = 64) -> Tensor:
    """Decode a PNG/JPEG file to a [channels,size,size] tensor in [0,1]."""
    try:
        with Image.open(path) as im:
            return _to_tensor(im, channels, size)
    except FileNotFoundError:
        raise ValueError(f"image file not found: {path}") from None
    except UnidentifiedImageError:
        raise ValueError(f"cannot decode image: {path}") from None


def decode_image_bytes(data: bytes, channels: int = 1, size: int = 64) -> Tensor:
    """Same as decode_image for an in-memory payload."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            return _to_tensor(im, channels, size)
    except UnidentifiedImageError:
        raise ValueError("cannot decode image payload") from None


def save_png(path, pixels: np.ndarray):
    """Write [H,W] or [H,W,3] float [0,1] as an 8-bit PNG."""
    arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")
