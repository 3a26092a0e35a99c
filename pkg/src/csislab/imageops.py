"""Image I/O, geometric augmentation, syntactic variations and compositing.

Images are numpy arrays of floats in [0, 1], either (H, W) luminance or
(H, W, 3) RGB. Functions return new arrays and never modify their input.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np
from PIL import Image

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ImageOpsError(ValueError):
    pass


class EmptyReferenceSet(ImageOpsError):
    pass


class InvalidFraction(ImageOpsError):
    pass


def check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ImageOpsError(f"expected (H, W) or (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min(initial=0) < 0 or arr.max(initial=0) > 1:
        raise ImageOpsError("pixel values must be finite and inside [0, 1]")
    return arr


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA_WEIGHTS if img.ndim == 3 else img


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("L", "RGB"):
            arr = np.asarray(im)
        elif im.mode in ("I;16", "I", "F", "1", "LA"):
            arr = np.asarray(im.convert("L"))
        else:
            arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.float64) / 255.0


def save_png(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def jpeg_roundtrip(img: np.ndarray, quality: int = 80) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im).astype(np.float64) / 255.0


def resize(img: np.ndarray, factor: float) -> np.ndarray:
    h, w = img.shape[:2]
    size = (max(1, round(w * factor)), max(1, round(h * factor)))
    interp = cv2.INTER_AREA if factor < 1 else cv2.INTER_LINEAR
    return np.clip(cv2.resize(img.astype(np.float32), size, interpolation=interp).astype(np.float64), 0, 1)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    h, w = img.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), degrees, 1.0)
    out = cv2.warpAffine(img.astype(np.float32), m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return np.clip(out.astype(np.float64), 0, 1)


def warp(img: np.ndarray, homography: np.ndarray, size: tuple[int, int] | None = None) -> np.ndarray:
    """Warp with a 3x3 homography mapping source -> destination, edge-replicated."""
    h, w = img.shape[:2]
    out_w, out_h = size or (w, h)
    if size is None and np.allclose(homography, np.eye(3), atol=0, rtol=0):
        return img.copy()
    out = cv2.warpPerspective(img.astype(np.float32), homography.astype(np.float64), (out_w, out_h),
                              flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return np.clip(out.astype(np.float64), 0, 1)


# ----------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    target_count: int = 100_000
    rotation: float = 15.0          # degrees, symmetric
    translation: float = 0.10       # fraction of width/height, symmetric
    scale: tuple[float, float] = (0.8, 1.2)
    shear: float = 5.0              # degrees, symmetric
    perspective: float = 0.05       # max corner jitter, fraction of size
    seed: int = 0

    @classmethod
    def identity(cls, target_count: int, seed: int = 0) -> "AugmentationConfig":
        return cls(target_count, 0.0, 0.0, (1.0, 1.0), 0.0, 0.0, seed)


def random_homography(rng: np.random.Generator, w: int, h: int, cfg: AugmentationConfig) -> np.ndarray:
    rot = math.radians(rng.uniform(-cfg.rotation, cfg.rotation)) if cfg.rotation else 0.0
    shear = math.radians(rng.uniform(-cfg.shear, cfg.shear)) if cfg.shear else 0.0
    lo, hi = cfg.scale
    s = rng.uniform(lo, hi) if hi > lo else lo
    tx = rng.uniform(-cfg.translation, cfg.translation) * w if cfg.translation else 0.0
    ty = rng.uniform(-cfg.translation, cfg.translation) * h if cfg.translation else 0.0
    cx, cy = (w - 1) / 2, (h - 1) / 2
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
    c, si = math.cos(rot), math.sin(rot)
    linear = np.array([[c, -si, 0], [si, c, 0], [0, 0, 1.0]]) @ np.array([[1, math.tan(shear), 0], [0, 1, 0], [0, 0, 1.0]])
    affine = back @ np.diag([s, s, 1.0]) @ linear @ to_origin
    if not cfg.perspective:
        return affine
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float32)
    jitter = rng.uniform(-cfg.perspective, cfg.perspective, size=(4, 2)) * np.array([w, h])
    persp = cv2.getPerspectiveTransform(corners, (corners + jitter).astype(np.float32))
    return persp @ affine


def iter_augment(reference: Sequence[np.ndarray], cfg: AugmentationConfig) -> Iterator[np.ndarray]:
    """Yield the originals, then seeded random warps of uniformly drawn originals."""
    if len(reference) == 0:
        raise EmptyReferenceSet("augment needs at least one reference image")
    if cfg.target_count < len(reference):
        raise ImageOpsError("target_count must be at least the number of reference images")
    yield from (np.array(img, dtype=np.float64) for img in reference)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.target_count - len(reference)):
        src = reference[int(rng.integers(len(reference)))]
        h, w = src.shape[:2]
        yield quantize8(warp(src, random_homography(rng, w, h, cfg)))


def augment(reference: Sequence[np.ndarray], cfg: AugmentationConfig) -> list[np.ndarray]:
    return list(iter_augment(reference, cfg))


# ----------------------------------------------------------------------------
# syntactic variations


@dataclass(frozen=True)
class VariationLevel:
    level: str
    brightness: tuple[float, float]
    contrast: tuple[float, float]
    saturation: tuple[float, float]
    crop: tuple[float, float]

    @classmethod
    def named(cls, level: str) -> "VariationLevel":
        try:
            return VARIATION_LEVELS[level]
        except KeyError:
            raise ImageOpsError(f"unknown variation level {level!r}") from None

    @classmethod
    def identity(cls) -> "VariationLevel":
        return cls("identity", (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0))


VARIATION_LEVELS = {
    "low": VariationLevel("low", (0.9, 1.1), (0.9, 1.1), (0.9, 1.1), (0.9, 1.0)),
    "medium": VariationLevel("medium", (0.7, 1.3), (0.7, 1.3), (0.7, 1.3), (0.7, 1.0)),
    "high": VariationLevel("high", (0.5, 1.5), (0.5, 1.5), (0.5, 1.5), (0.5, 1.0)),
}


@dataclass(frozen=True)
class VariationFactors:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    crop: float = 1.0


def sample_variation(level: VariationLevel, rng: np.random.Generator) -> VariationFactors:
    draw = lambda r: float(rng.uniform(*r)) if r[1] > r[0] else float(r[0])  # noqa: E731
    return VariationFactors(draw(level.brightness), draw(level.contrast), draw(level.saturation), draw(level.crop))


def center_crop(img: np.ndarray, fraction: float) -> np.ndarray:
    h, w = img.shape[:2]
    ch, cw = max(1, round(h * fraction)), max(1, round(w * fraction))
    top, left = (h - ch) // 2, (w - cw) // 2
    return img[top:top + ch, left:left + cw].copy()


def apply_factors(img: np.ndarray, f: VariationFactors) -> np.ndarray:
    """Brightness, then contrast, then saturation, then center crop."""
    out = np.array(img, dtype=np.float64)
    if f.brightness != 1.0:
        out = np.clip(out * f.brightness, 0, 1)
    if f.contrast != 1.0:
        mean = to_luma(out).mean()
        out = np.clip((out - mean) * f.contrast + mean, 0, 1)
    if f.saturation != 1.0 and out.ndim == 3:
        grey = to_luma(out)[..., None]
        out = np.clip((out - grey) * f.saturation + grey, 0, 1)
    if f.crop != 1.0:
        out = center_crop(out, f.crop)
    return out


def apply_variation(img: np.ndarray, level: VariationLevel, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return apply_factors(img, sample_variation(level, rng))


# ----------------------------------------------------------------------------
# foreground occlusion


def composite_foreground(scene: np.ndarray, occluder: np.ndarray, fov_fraction: float) -> np.ndarray:
    """Paste the occluder, horizontally centred and bottom-aligned.

    The occluder is resized to sqrt(fov_fraction) of the scene's width and
    height, so its area is fov_fraction of the frame up to pixel rounding.
    """
    if not 0.0 <= fov_fraction <= 1.0:
        raise InvalidFraction(f"fov_fraction must lie in [0, 1], got {fov_fraction}")
    out = np.array(scene, dtype=np.float64)
    if fov_fraction == 0.0:
        return out
    h, w = out.shape[:2]
    side = math.sqrt(fov_fraction)
    oh, ow = max(1, round(h * side)), max(1, round(w * side))
    patch = cv2.resize(np.asarray(occluder, dtype=np.float32), (ow, oh), interpolation=cv2.INTER_AREA
                       if ow < occluder.shape[1] else cv2.INTER_LINEAR).astype(np.float64)
    if out.ndim == 3 and patch.ndim == 2:
        patch = np.repeat(patch[..., None], 3, axis=2)
    elif out.ndim == 2 and patch.ndim == 3:
        patch = to_luma(patch)
    left = (w - ow) // 2
    out[h - oh:, left:left + ow] = np.clip(patch, 0, 1)
    return out
