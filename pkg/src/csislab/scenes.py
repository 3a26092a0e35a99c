"""Procedural scenes and stand-in corpora.

A scene is a wide RGB panorama of a room-like space (wall, floor, furniture,
pictures) under a spatially varying illumination field. Views are random
homographies of the panorama, so two captures of one scene share structure
but differ by a viewpoint change, as handheld photographs would.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np

from .imageops import load_image, quantize8

log = logging.getLogger(__name__)

PANORAMA = (256, 384)  # rows, cols
VIEW_SIZE = 128
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
CORPUS_ROLES = ("illicit-standin", "benign", "delivery-pool")


class InsufficientImages(ValueError):
    pass


class DecodeFailure(ValueError):
    pass


def _seed_words(*parts) -> list[int]:
    """Turn mixed str/int parts into entropy words for SeedSequence."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(_seed_words(*parts)))


# ----------------------------------------------------------------------------
# low-level drawing helpers


def smooth_noise(rng, shape, cells: int) -> np.ndarray:
    """Zero-mean noise with roughly `cells` features across the larger side."""
    h, w = shape
    gh, gw = max(2, round(cells * h / max(h, w))), max(2, round(cells * w / max(h, w)))
    grid = rng.standard_normal((gh, gw)).astype(np.float32)
    return cv2.resize(grid, (w, h), interpolation=cv2.INTER_CUBIC).astype(np.float64)


def _colour(rng, lo=0.1, hi=0.9) -> np.ndarray:
    return rng.uniform(lo, hi, 3)


def _fill_poly(canvas, pts, colour):
    cv2.fillPoly(canvas, [np.round(np.asarray(pts) * 16).astype(np.int32)], tuple(map(float, colour)),
                 lineType=cv2.LINE_AA, shift=4)


def _fill_ellipse(canvas, centre, axes, angle, colour):
    c = tuple(int(round(v * 16)) for v in centre)
    a = tuple(max(1, int(round(v * 16))) for v in axes)
    cv2.ellipse(canvas, c, a, angle, 0, 360, tuple(map(float, colour)), -1, cv2.LINE_AA, 4)


def _rect(canvas, x0, y0, x1, y1, colour):
    _fill_poly(canvas, [(x0, y0), (x1, y0), (x1, y1), (x0, y1)], colour)


# ----------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class Condition:
    kind: str = "base"   # base | lighting | layout
    variant: int = 0

    @classmethod
    def parse(cls, label: "str | Condition") -> "Condition":
        if isinstance(label, Condition):
            return label
        if label in ("", "base"):
            return cls()
        kind, _, variant = label.partition("-")
        if kind not in ("lighting", "layout") or not variant.isdigit():
            raise ValueError(f"condition must be 'base', 'lighting-N' or 'layout-N', got {label!r}")
        return cls(kind, int(variant))

    @property
    def label(self) -> str:
        return "base" if self.kind == "base" else f"{self.kind}-{self.variant}"


def _draw_object(canvas, rng, x, floor_y, h_px):
    kind = rng.choice(["cabinet", "table", "plant", "lamp", "box"])
    col = _colour(rng)
    w_px = h_px * rng.uniform(0.4, 1.2)
    if kind == "cabinet":
        _rect(canvas, x, floor_y - h_px, x + w_px, floor_y, col)
        for k in range(1, int(rng.integers(2, 5))):
            y = floor_y - h_px * k / 4
            _rect(canvas, x + 2, y - 1, x + w_px - 2, y + 1, col * 0.6)
    elif kind == "table":
        top = floor_y - h_px * 0.55
        _rect(canvas, x, top, x + w_px * 1.4, top + 6, col)
        _rect(canvas, x + 3, top, x + 8, floor_y, col * 0.7)
        _rect(canvas, x + w_px * 1.4 - 8, top, x + w_px * 1.4 - 3, floor_y, col * 0.7)
    elif kind == "plant":
        _rect(canvas, x + w_px * 0.3, floor_y - h_px * 0.3, x + w_px * 0.7, floor_y, col * 0.6)
        leaf = np.array([0.15, rng.uniform(0.4, 0.7), 0.15])
        for _ in range(6):
            _fill_ellipse(canvas, (x + w_px * rng.uniform(0.1, 0.9), floor_y - h_px * rng.uniform(0.4, 0.9)),
                          (w_px * 0.25, h_px * 0.12), rng.uniform(0, 180), leaf * rng.uniform(0.7, 1.2))
    elif kind == "lamp":
        _rect(canvas, x + w_px * 0.45, floor_y - h_px, x + w_px * 0.55, floor_y, col * 0.5)
        _fill_poly(canvas, [(x, floor_y - h_px * 0.8), (x + w_px, floor_y - h_px * 0.8),
                            (x + w_px * 0.75, floor_y - h_px), (x + w_px * 0.25, floor_y - h_px)], col)
    else:
        _rect(canvas, x, floor_y - h_px * 0.5, x + w_px, floor_y, col)
        _fill_poly(canvas, [(x, floor_y - h_px * 0.5), (x + w_px, floor_y - h_px * 0.5),
                            (x + w_px * 1.15, floor_y - h_px * 0.6), (x + w_px * 0.15, floor_y - h_px * 0.6)], col * 1.2)


def _draw_wall_item(canvas, rng, x, y, w_px, h_px):
    kind = rng.choice(["picture", "window", "clock", "shelf"])
    col = _colour(rng)
    if kind == "picture":
        _rect(canvas, x, y, x + w_px, y + h_px, col * 0.5)
        inner = canvas[int(y + 4):int(y + h_px - 4), int(x + 4):int(x + w_px - 4)]
        if inner.size:
            base = _colour(rng)
            inner[:] = np.clip(base + 0.25 * smooth_noise(rng, inner.shape[:2], 4)[..., None] * _colour(rng, -1, 1), 0, 1)
    elif kind == "window":
        _rect(canvas, x, y, x + w_px, y + h_px, np.full(3, 0.95))
        _rect(canvas, x + w_px / 2 - 2, y, x + w_px / 2 + 2, y + h_px, col * 0.4)
        _rect(canvas, x, y + h_px / 2 - 2, x + w_px, y + h_px / 2 + 2, col * 0.4)
    elif kind == "clock":
        r = min(w_px, h_px) / 2
        _fill_ellipse(canvas, (x + r, y + r), (r, r), 0, col)
        _fill_ellipse(canvas, (x + r, y + r), (r * 0.8, r * 0.8), 0, np.full(3, 0.9))
    else:
        _rect(canvas, x, y + h_px - 5, x + w_px * 1.5, y + h_px, col * 0.6)
        for k in range(int(rng.integers(3, 7))):
            bw = w_px * 1.5 / 8
            _rect(canvas, x + k * bw * 1.2, y + h_px * rng.uniform(0.2, 0.6), x + k * bw * 1.2 + bw, y + h_px - 5, _colour(rng))


def _layout(base_seed: int, variant: int) -> np.ndarray:
    h, w = PANORAMA
    rng = rng_for("scene", base_seed)
    wall = _colour(rng, 0.45, 0.85)
    floor = _colour(rng, 0.2, 0.6)
    horizon = h * rng.uniform(0.6, 0.7)
    canvas = np.empty((h, w, 3))
    canvas[:] = wall
    canvas *= 1 + 0.08 * smooth_noise(rng, (h, w), 12)[..., None]
    canvas[int(horizon):] = floor
    # floorboards converging to a vanishing point
    vx = w * rng.uniform(0.3, 0.7)
    for k in range(-12, 13):
        xb = vx + k * w / 8
        _fill_poly(canvas, [(vx + k * 6, horizon), (vx + k * 6 + 1.5, horizon), (xb + 4, h), (xb, h)], floor * 0.75)
    _rect(canvas, 0, horizon - 3, w, horizon + 1, wall * 0.6)
    # the object set belongs to the scene; a layout variant reshuffles placement
    items = [(rng_for("wall-item", base_seed, i), rng.uniform(30, 70), rng.uniform(30, 60)) for i in range(5)]
    objects = [(rng_for("object", base_seed, i), rng.uniform(50, 110)) for i in range(4)]
    place = rng_for("layout", base_seed, variant)
    wall_x = np.sort(place.uniform(0, w - 70, len(items))) if variant else np.linspace(10, w - 80, len(items))
    if variant:
        place.shuffle(items)
    for (irng, iw, ih), x in zip(items, wall_x):
        _draw_wall_item(canvas, irng, x, horizon * place.uniform(0.15, 0.45) if variant else horizon * 0.3, iw, ih)
    obj_x = place.uniform(0, w - 90, len(objects)) if variant else np.linspace(0, w - 100, len(objects)) + 15
    for (orng, oh), x in zip(objects, obj_x):
        _draw_object(canvas, orng, x, horizon + (place.uniform(5, 40) if variant else 20), oh)
    return np.clip(canvas, 0, 1)


def _illumination(base_seed: int, variant: int) -> np.ndarray:
    """Multiplicative light field: ambient term plus two soft lamps."""
    h, w = PANORAMA
    rng = rng_for("light", base_seed, variant)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # variants dim the ambient term so the lamps dominate the shading
    field = np.full((h, w, 3), rng.uniform(0.1, 0.25) if variant else rng.uniform(0.35, 0.55))
    for _ in range(2):
        cx, cy = rng.uniform(0, w), rng.uniform(-0.2 * h, 0.6 * h)
        spread = rng.uniform(0.25, 0.6) * w
        tint = rng.uniform(0.8, 1.2, 3) if variant else np.ones(3)
        strength = rng.uniform(0.8, 1.5) if variant else rng.uniform(0.5, 1.0)
        field += strength * tint * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * spread ** 2))[..., None]
    return field / field.mean()


def render_scene(base_seed: int, condition="base") -> np.ndarray:
    cond = Condition.parse(condition)
    layout = _layout(base_seed, cond.variant if cond.kind == "layout" else 0)
    light = _illumination(base_seed, cond.variant if cond.kind == "lighting" else 0)
    return np.clip(layout * light * 0.85, 0, 1)


@dataclass(frozen=True)
class ViewJitter:
    """Capture jitter. Offsets are fractions of the view size."""
    shift: float = 0.05
    zoom: float = 0.05
    roll: float = 2.0         # degrees (std dev)
    keystone: float = 0.03
    gain: float = 0.1
    noise: float = 2.0 / 255
    view_fraction: float = 0.7  # view height / panorama height


def view_homography(rng: np.random.Generator, jitter: ViewJitter, out: int = VIEW_SIZE) -> np.ndarray:
    h, w = PANORAMA
    side = h * jitter.view_fraction * (1 + rng.normal(0, jitter.zoom))
    cx = w / 2 + rng.normal(0, jitter.shift) * side
    cy = h / 2 + rng.normal(0, jitter.shift) * side
    roll = math.radians(rng.normal(0, jitter.roll))
    half = side / 2
    quad = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    quad += rng.normal(0, jitter.keystone, quad.shape) * side
    rot = np.array([[math.cos(roll), -math.sin(roll)], [math.sin(roll), math.cos(roll)]])
    quad = quad @ rot.T + (cx, cy)
    dst = np.array([[0, 0], [out - 1, 0], [out - 1, out - 1], [0, out - 1]], dtype=np.float32)
    return cv2.getPerspectiveTransform(quad.astype(np.float32), dst)


def capture(panorama: np.ndarray, rng: np.random.Generator, jitter: ViewJitter, out: int = VIEW_SIZE) -> np.ndarray:
    m = view_homography(rng, jitter, out)
    view = cv2.warpPerspective(panorama.astype(np.float32), m, (out, out), flags=cv2.INTER_AREA,
                               borderMode=cv2.BORDER_REPLICATE).astype(np.float64)
    view *= 1 + rng.uniform(-jitter.gain, jitter.gain)
    view += rng.normal(0, jitter.noise, view.shape)
    return quantize8(view)


@dataclass(frozen=True)
class SceneDataset:
    reference: tuple
    user: tuple
    condition: str
    seed: int


def synth_scene(base_seed: int, condition="base", n_reference: int = 50, n_user: int = 20,
                jitter: ViewJitter = ViewJitter()) -> SceneDataset:
    if n_reference < 1 or n_user < 1:
        raise ValueError("n_reference and n_user must be at least 1")
    cond = Condition.parse(condition)
    pano = render_scene(base_seed, cond)
    ref_rng = rng_for("capture", base_seed, cond.label, "reference")
    user_rng = rng_for("capture", base_seed, cond.label, "user")
    reference = tuple(capture(pano, ref_rng, jitter) for _ in range(n_reference))
    user = tuple(capture(pano, user_rng, jitter) for _ in range(n_user))
    return SceneDataset(reference, user, cond.label, base_seed)


# ----------------------------------------------------------------------------
# stand-in corpora


@dataclass(frozen=True)
class CorpusSpec:
    role: str
    count: int
    seed: int = 0
    size: int = 128

    def __post_init__(self):
        if self.role not in CORPUS_ROLES:
            raise ValueError(f"role must be one of {CORPUS_ROLES}, got {self.role!r}")
        if self.count < 0:
            raise ValueError("count must be non-negative")


def _organic(rng, canvas, n):
    s = canvas.shape[0]
    warm = np.array([0.75, 0.5, 0.3])
    for _ in range(n):
        body = np.clip(warm * rng.uniform(0.4, 1.3) + rng.normal(0, 0.1, 3), 0, 1)
        cx, cy = rng.uniform(0.15, 0.85, 2) * s
        _fill_ellipse(canvas, (cx, cy), rng.uniform(0.08, 0.3, 2) * s, rng.uniform(0, 180), body)
        for _ in range(int(rng.integers(1, 4))):
            ang = rng.uniform(0, 2 * math.pi)
            r = rng.uniform(0.1, 0.25) * s
            _fill_ellipse(canvas, (cx + r * math.cos(ang), cy + r * math.sin(ang)),
                          rng.uniform(0.03, 0.1, 2) * s, rng.uniform(0, 180), body * rng.uniform(0.7, 1.1))


def _angular(rng, canvas, n):
    s = canvas.shape[0]
    cool = np.array([0.35, 0.5, 0.7])
    for _ in range(n):
        col = np.clip(cool * rng.uniform(0.4, 1.4) + rng.normal(0, 0.12, 3), 0, 1)
        if rng.random() < 0.6:
            x0, y0 = rng.uniform(0, 0.8, 2) * s
            x1, y1 = x0 + rng.uniform(0.1, 0.5) * s, y0 + rng.uniform(0.1, 0.5) * s
            _rect(canvas, x0, y0, x1, y1, col)
        else:
            pts = rng.uniform(0, 1, (int(rng.integers(3, 6)), 2)) * s
            _fill_poly(canvas, pts, col)


def corpus_image(spec: CorpusSpec, index: int) -> np.ndarray:
    """Deterministic image `index` of a synthetic corpus.

    Stand-ins and the delivery pool share the organic style (one category);
    the benign corpus uses an angular man-made style. Seeds never overlap.
    """
    rng = rng_for("corpus", spec.role, spec.seed, index)
    s = spec.size
    a, b = _colour(rng), _colour(rng)
    ang = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:s, 0:s] / s
    ramp = (math.cos(ang) * xx + math.sin(ang) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    canvas = a * (1 - ramp[..., None]) + b * ramp[..., None]
    canvas += 0.15 * smooth_noise(rng, (s, s), 4)[..., None]
    canvas = np.clip(canvas, 0, 1)
    if spec.role == "benign":
        _angular(rng, canvas, int(rng.integers(3, 9)))
    else:
        _organic(rng, canvas, int(rng.integers(1, 4)))
    canvas += 0.04 * smooth_noise(rng, (s, s), 16)[..., None]
    canvas = cv2.GaussianBlur(canvas.astype(np.float32), (0, 0), 0.6).astype(np.float64)
    canvas += rng.normal(0, 0.01, canvas.shape)
    return quantize8(canvas)


def iter_corpus(spec: CorpusSpec, start: int = 0) -> Iterator[np.ndarray]:
    for i in range(start, spec.count):
        yield corpus_image(spec, i)


def synth_corpus(spec: CorpusSpec) -> list[np.ndarray]:
    return list(iter_corpus(spec))


def list_images(path) -> list[Path]:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"not a directory: {root}")
    return sorted((p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=lambda p: p.name)


def load_corpus(path, spec: CorpusSpec, skip_bad: bool = True) -> list[np.ndarray]:
    """Load `spec.count` images from a directory in filename order.

    With path None the synthetic corpus for `spec` is generated instead.
    Undecodable files are logged and skipped, or raise if skip_bad is False.
    """
    if path is None:
        return synth_corpus(spec)
    images = []
    for p in list_images(path):
        if len(images) == spec.count:
            break
        try:
            images.append(load_image(p))
        except Exception as exc:  # PIL raises a zoo of types
            if not skip_bad:
                raise DecodeFailure(f"{p}: {exc}") from exc
            log.warning("skipping undecodable image %s: %s", p, exc)
    if len(images) < spec.count:
        raise InsufficientImages(f"{path}: wanted {spec.count} images, found {len(images)}")
    return images


def write_manifest(path, records) -> None:
    """One JSON object per line: {path, role, condition, split}."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec.get(k) for k in ("path", "role", "condition", "split")}) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def person_image(seed: int, index: int, size: int = 128) -> np.ndarray:
    """A standing figure on its own background, used as a foreground occluder."""
    rng = rng_for("person", seed, index)
    canvas = np.empty((size, size, 3))
    canvas[:] = _colour(rng, 0.3, 0.8)
    canvas = np.clip(canvas + 0.1 * smooth_noise(rng, (size, size), 4)[..., None], 0, 1)
    cx = size * rng.uniform(0.4, 0.6)
    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.5, 1.1)
    top, legs = _colour(rng), _colour(rng, 0.05, 0.5)
    head = size * 0.09
    _fill_ellipse(canvas, (cx, size * 0.14), (head * 0.85, head), 0, skin)
    _fill_poly(canvas, [(cx - size * 0.17, size * 0.26), (cx + size * 0.17, size * 0.26),
                        (cx + size * 0.14, size * 0.62), (cx - size * 0.14, size * 0.62)], top)
    for side in (-1, 1):
        _fill_poly(canvas, [(cx + side * size * 0.17, size * 0.27), (cx + side * size * 0.24, size * 0.3),
                            (cx + side * size * 0.22, size * 0.6), (cx + side * size * 0.16, size * 0.58)], top * 0.85)
        _fill_poly(canvas, [(cx + side * size * 0.02, size * 0.62), (cx + side * size * 0.13, size * 0.62),
                            (cx + side * size * 0.12, size), (cx + side * size * 0.03, size)], legs)
    return quantize8(canvas)
