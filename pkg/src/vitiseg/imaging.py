"""PNG I/O, resizing, normalization and seeded training augmentation.

Images are ``H x W x 3`` arrays (uint8 on disk, float64 once preprocessed);
masks and confidence maps are ``H x W`` uint8 arrays. The training pipeline
is resize -> augment (on the 0..255 float image) -> normalize.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ImageIOError, UsageError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
NORM_MIN_STD = 1e-6
MASK_THRESHOLD = 128

TP_COLOR = (255, 0, 0)
FP_COLOR = (255, 105, 180)
FN_COLOR = (0, 0, 255)


# ---------------------------------------------------------------- I/O

def _png_header(path: Path) -> tuple[int, int]:
    """Return (bit depth, color type) from the IHDR chunk."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(33)
    except FileNotFoundError:
        raise ImageIOError(path, "file not found") from None
    except OSError as exc:
        raise ImageIOError(path, f"cannot read: {exc.strerror}") from None
    if len(head) < 33 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageIOError(path, "not a PNG file")
    return head[24], head[25]


def _open(path, allowed_modes: tuple) -> Image.Image:
    path = Path(path)
    depth, _ = _png_header(path)
    if depth != 8:
        raise ImageIOError(path, f"unsupported bit depth {depth} (only 8-bit PNG is accepted)")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(path, f"malformed PNG: {exc}") from None
    if img.mode == "P":
        img = img.convert("RGBA" if "transparency" in img.info else "RGB")
    if img.mode not in allowed_modes:
        raise ImageIOError(path, f"unsupported PNG mode {img.mode}")
    return img


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG as an ``H x W x 3`` uint8 RGB array (alpha dropped, gray expanded)."""
    img = _open(path, ("RGB", "RGBA", "L", "LA"))
    return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def load_mask(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG as ``H x W`` uint8; values are not binarized."""
    img = _open(path, ("L",))
    return np.asarray(img, dtype=np.uint8).copy()


def _save(arr: np.ndarray, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        Image.fromarray(arr).save(tmp, format="PNG")
        os.replace(tmp, path)
    except OSError as exc:
        raise ImageIOError(path, f"cannot write: {exc.strerror or exc}") from None


def save_image(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise UsageError(f"save_image expects H x W x 3 uint8, got {img.dtype} {img.shape}")
    _save(np.ascontiguousarray(img), path)


def save_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.dtype != np.uint8 or mask.ndim != 2:
        raise UsageError(f"save_mask expects H x W uint8, got {mask.dtype} {mask.shape}")
    _save(np.ascontiguousarray(mask), path)


# ---------------------------------------------------------------- preprocessing

def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _nearest_axis(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp), n_in - 1)


def resize(img: np.ndarray, w: int, h: int, method: str | None = None) -> np.ndarray:
    """Resize to ``w x h``: bilinear for 3-channel images, nearest for 2-D masks.

    ``method`` ("bilinear" or "nearest") overrides the choice. uint8 input
    yields uint8 output (round half up); float input stays float.
    """
    if w <= 0 or h <= 0:
        raise UsageError(f"target size must be positive, got {w}x{h}")
    img = np.asarray(img)
    method = method or ("bilinear" if img.ndim == 3 else "nearest")
    in_h, in_w = img.shape[:2]
    if (in_w, in_h) == (w, h):
        return img.copy()
    if method == "nearest":
        return img[_nearest_axis(in_h, h)][:, _nearest_axis(in_w, w)]
    if method != "bilinear":
        raise UsageError(f"unknown resize method {method!r}")
    y0, y1, fy = _bilinear_axis(in_h, h)
    x0, x1, fx = _bilinear_axis(in_w, w)
    src = img.astype(np.float64)
    if src.ndim == 2:
        src = src[..., None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy[:, None, None]) + bottom * fy[:, None, None]
    if img.ndim == 2:
        out = out[..., 0]
    return _to_uint8(out) if img.dtype == np.uint8 else out


def normalize(img: np.ndarray) -> np.ndarray:
    """Per-channel z-score; channels with std below 1e-6 become all zeros."""
    x = np.asarray(img, dtype=np.float64)
    mean = x.mean(axis=(0, 1))
    std = x.std(axis=(0, 1))
    safe = np.where(std < NORM_MIN_STD, 1.0, std)
    out = (x - mean) / safe
    out[..., std < NORM_MIN_STD] = 0.0
    return out


def binarize_mask(gray: np.ndarray, threshold: int = MASK_THRESHOLD) -> np.ndarray:
    """Values >= threshold become 255, everything else 0."""
    return np.where(np.asarray(gray) >= threshold, 255, 0).astype(np.uint8)


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    rotation_deg_max: float = 180.0
    shift_frac: float = 0.05
    h_flip: bool = True
    v_flip: bool = True
    zoom_range: tuple = (0.8, 1.2)
    brightness_range: tuple = (0.7, 1.3)

    def __post_init__(self):
        object.__setattr__(self, "zoom_range", tuple(float(v) for v in self.zoom_range))
        object.__setattr__(self, "brightness_range", tuple(float(v) for v in self.brightness_range))
        for name in ("zoom_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if not lo <= 1.0 <= hi or lo <= 0:
                raise ConfigError(f"{name} must be positive and contain 1.0, got {(lo, hi)}")
        if not 0.0 <= self.shift_frac < 0.5:
            raise ConfigError(f"shift_frac must be in [0, 0.5), got {self.shift_frac}")
        if self.rotation_deg_max < 0:
            raise ConfigError("rotation_deg_max must be nonnegative")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(0.0, 0.0, False, False, (1.0, 1.0), (1.0, 1.0))


@dataclass(frozen=True)
class AugmentDraw:
    """One sampled transform. Shifts are in pixels."""

    angle_deg: float
    shift_x: float
    shift_y: float
    h_flip: bool
    v_flip: bool
    zoom: float
    brightness: float


def sample_augment(params: AugmentParams, height: int, width: int, rng: np.random.Generator) -> AugmentDraw:
    # Every draw is taken regardless of params so the stream stays aligned.
    angle = rng.uniform(0.0, params.rotation_deg_max)
    sx = rng.uniform(-params.shift_frac, params.shift_frac) * width
    sy = rng.uniform(-params.shift_frac, params.shift_frac) * height
    hf = bool(rng.random() < 0.5) and params.h_flip
    vf = bool(rng.random() < 0.5) and params.v_flip
    zoom = rng.uniform(*params.zoom_range)
    brightness = rng.uniform(*params.brightness_range)
    return AugmentDraw(angle, sx, sy, hf, vf, zoom, brightness)


def _source_coords(draw: AugmentDraw, h: int, w: int):
    """Inverse-map every output pixel center to input coordinates."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xx - cx - draw.shift_x
    dy = yy - cy - draw.shift_y
    t = np.deg2rad(draw.angle_deg)
    c, s = np.cos(t), np.sin(t)
    # undo rotation, then zoom, then flips
    ux = (c * dx + s * dy) / draw.zoom
    uy = (-s * dx + c * dy) / draw.zoom
    if draw.h_flip:
        ux = -ux
    if draw.v_flip:
        uy = -uy
    return uy + cy, ux + cx


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    padded = np.zeros((h + 2, w + 2) + img.shape[2:], dtype=np.float64)
    padded[1:-1, 1:-1] = img
    # Points farther than one pixel outside only touch the zero border.
    ys = np.clip(ys + 1, 0, h + 1)
    xs = np.clip(xs + 1, 0, w + 1)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w)
    fy, fx = ys - y0, xs - x0
    if img.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    top = padded[y0, x0] * (1 - fx) + padded[y0, x0 + 1] * fx
    bottom = padded[y0 + 1, x0] * (1 - fx) + padded[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bottom * fy


def _sample_nearest(mask: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    iy = np.floor(ys + 0.5).astype(np.intp)
    ix = np.floor(xs + 0.5).astype(np.intp)
    inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros((h, w), dtype=mask.dtype)
    out[inside] = mask[iy[inside], ix[inside]]
    return out


def apply_augment(img: np.ndarray, mask: np.ndarray, draw: AugmentDraw):
    h, w = mask.shape
    ys, xs = _source_coords(draw, h, w)
    warped = _sample_bilinear(np.asarray(img, dtype=np.float64), ys, xs)
    warped = np.clip(warped * draw.brightness, 0.0, 255.0)
    return warped, _sample_nearest(np.asarray(mask), ys, xs)


def augment(img: np.ndarray, mask: np.ndarray, params: AugmentParams, rng: np.random.Generator):
    """Apply one random geometric transform to both arrays, brightness to the image only.

    ``img`` is on the 0..255 scale (uint8 or float); the result is float64
    clamped to [0, 255]. Regions mapped from outside the frame are 0.
    """
    img = np.asarray(img)
    mask = np.asarray(mask)
    if img.shape[:2] != mask.shape:
        raise UsageError(f"image {img.shape[:2]} and mask {mask.shape} differ in size")
    return apply_augment(img, mask, sample_augment(params, *mask.shape, rng))


def derive_rng(seed: int, image_id: str, epoch: int = 0) -> np.random.Generator:
    """Independent per-item stream from (global seed, image id, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(image_id.encode("utf-8")), epoch]))


# ---------------------------------------------------------------- overlay

def overlay(img: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Tint true positives red, false positives pink, false negatives blue at alpha 0.5."""
    img = np.asarray(img, dtype=np.uint8)
    t, p = np.asarray(truth) > 0, np.asarray(pred) > 0
    if not (img.shape[:2] == t.shape == p.shape):
        raise UsageError("overlay inputs must share dimensions")
    out = img.copy()
    for where, color in ((t & p, TP_COLOR), (~t & p, FP_COLOR), (t & ~p, FN_COLOR)):
        blended = (img[where].astype(np.uint16) + np.array(color, dtype=np.uint16) + 1) // 2
        out[where] = blended.astype(np.uint8)
    return out
