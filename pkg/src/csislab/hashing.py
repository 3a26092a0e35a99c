"""Perceptual hash functions and hash distances.

Two hash families are provided:

* ``pdq``: a port of the PDQ photo hash (256 bits). The bit path reproduces the
  reference float32 arithmetic (Jarosz tent filter, 64x64 decimation, 16x16
  low-frequency DCT, median threshold) so results match the reference C++
  implementation bit for bit on losslessly decoded input.
* ``surrogate-projection``: a seeded random-projection hash over a 32x32
  area-averaged grid. Its pre-sign scores are linear in the pixels, which makes
  exact white-box gradients available.

Bits are stored most-significant-bit first, which is also the order used by the
hex serialization.
"""
from __future__ import annotations

import enum
import functools
import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PDQ_BITS = 256
SURROGATE_GRID = 32
SURROGATE_WINDOW = 5
MIN_PDQ_DIM = 64

LUMA_R = np.float32(0.299)
LUMA_G = np.float32(0.587)
LUMA_B = np.float32(0.114)


class HashError(ValueError):
    pass


class ImageTooSmall(HashError):
    pass


class LengthMismatch(HashError):
    pass


class HashKind(str, enum.Enum):
    PDQ = "pdq"
    SURROGATE = "surrogate-projection"


class DistanceMetric(str, enum.Enum):
    HAMMING = "hamming"
    NORMALIZED_L1 = "normalized-l1"


class PerceptualHash:
    """Fixed-length bit vector plus an optional quality score.

    ``quality`` is the PDQ image-domain quality in [0, 100]; 0 marks a
    degenerate (flat) input whose hash carries no information.
    """

    __slots__ = ("bits", "quality")

    def __init__(self, bits, quality: int | None = None):
        arr = np.array(bits, dtype=np.uint8).reshape(-1)
        if arr.size == 0 or arr.max(initial=0) > 1:
            raise HashError("bits must be a non-empty 0/1 vector")
        arr.setflags(write=False)
        self.bits = arr
        self.quality = quality

    def __len__(self) -> int:
        return self.bits.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, PerceptualHash):
            return NotImplemented
        return self.bits.size == other.bits.size and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash(self.bits.tobytes())

    def __repr__(self) -> str:
        q = "" if self.quality is None else f", quality={self.quality}"
        return f"PerceptualHash({self.hex()!r}{q})"

    @property
    def degenerate(self) -> bool:
        return self.quality == 0

    def hex(self) -> str:
        return bits_to_hex(self.bits)

    @classmethod
    def from_hex(cls, text: str, quality: int | None = None) -> "PerceptualHash":
        return cls(hex_to_bits(text), quality)

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, n_bits: int) -> "PerceptualHash":
        return cls(np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:n_bits])


def bits_to_hex(bits: np.ndarray) -> str:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 4:
        raise HashError("hex serialization needs a bit length divisible by 4")
    nibbles = bits.reshape(-1, 4) @ np.array([8, 4, 2, 1])
    return "".join("0123456789abcdef"[v] for v in nibbles)


def hex_to_bits(text: str) -> np.ndarray:
    text = text.strip().lower()
    try:
        values = [int(c, 16) for c in text]
    except ValueError as exc:
        raise HashError(f"malformed hex hash {text!r}") from exc
    if not values:
        raise HashError("empty hex hash")
    return ((np.array(values)[:, None] >> np.array([3, 2, 1, 0])) & 1).astype(np.uint8).reshape(-1)


def as_bit_matrix(hashes) -> np.ndarray:
    """Stack hashes (or pass through an (N, n) 0/1 array) as a uint8 matrix."""
    if isinstance(hashes, np.ndarray):
        mat = hashes.astype(np.uint8, copy=False)
        if mat.ndim == 1:
            mat = mat[None, :]
        return mat
    hashes = list(hashes)
    if not hashes:
        raise HashError("no hashes given")
    lengths = {len(h) for h in hashes}
    if len(lengths) != 1:
        raise LengthMismatch(f"mixed hash lengths {sorted(lengths)}")
    return np.stack([h.bits for h in hashes])


# ----------------------------------------------------------------------------
# distances


def hamming(a: PerceptualHash, b: PerceptualHash) -> int:
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} bits")
    return int(np.count_nonzero(a.bits != b.bits))


def distance(a: PerceptualHash, b: PerceptualHash, metric=DistanceMetric.NORMALIZED_L1) -> float:
    d = hamming(a, b)
    if DistanceMetric(metric) is DistanceMetric.HAMMING:
        return d
    return d / len(a)


def hamming_matrix(a, b, chunk: int = 4096) -> np.ndarray:
    """All-pairs hamming distances between two bit matrices, as int32.

    Computed as |a| + |b| - 2 a.b with float32 BLAS; every intermediate is an
    integer below 2**24 so the result is exact.
    """
    a = as_bit_matrix(a)
    b = as_bit_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise LengthMismatch(f"{a.shape[1]} vs {b.shape[1]} bits")
    bf = b.astype(np.float32)
    bw = bf.sum(axis=1)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int32)
    for start in range(0, a.shape[0], chunk):
        af = a[start:start + chunk].astype(np.float32)
        d = af.sum(axis=1)[:, None] + bw[None, :] - 2.0 * (af @ bf.T)
        out[start:start + chunk] = np.rint(d).astype(np.int32)
    return out


def min_hamming(queries, database, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Minimum hamming distance from each query to the database, and its argmin."""
    q = as_bit_matrix(queries)
    db = as_bit_matrix(database)
    best = np.empty(q.shape[0], dtype=np.int32)
    arg = np.empty(q.shape[0], dtype=np.int64)
    for start in range(0, q.shape[0], chunk):
        d = hamming_matrix(q[start:start + chunk], db)
        arg[start:start + chunk] = d.argmin(axis=1)
        best[start:start + chunk] = d[np.arange(d.shape[0]), arg[start:start + chunk]]
    return best, arg


def to_metric(ham, n_bits: int, metric) -> np.ndarray | float:
    if DistanceMetric(metric) is DistanceMetric.HAMMING:
        return ham
    return np.asarray(ham, dtype=np.float64) / n_bits


# ----------------------------------------------------------------------------
# hash function specs


@dataclass(frozen=True)
class HashFunctionSpec:
    kind: HashKind = HashKind.PDQ
    output_bits: int = PDQ_BITS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", HashKind(self.kind))
        if self.kind is HashKind.PDQ and self.output_bits != PDQ_BITS:
            raise HashError("pdq always produces 256 bits")
        if self.kind is HashKind.SURROGATE and not 64 <= self.output_bits <= 512:
            raise HashError("surrogate output_bits must be in [64, 512]")

    @classmethod
    def pdq(cls) -> "HashFunctionSpec":
        return cls(HashKind.PDQ, PDQ_BITS, 0)

    @classmethod
    def surrogate(cls, output_bits: int = 64, seed: int = 0) -> "HashFunctionSpec":
        return cls(HashKind.SURROGATE, output_bits, seed)


# ----------------------------------------------------------------------------
# image plumbing shared by both hashes


def _luma255(image) -> np.ndarray:
    """Float32 luma on the 0..255 scale, following the reference conversion.

    Accepts (H, W) or (H, W, 3) arrays, either uint8 or floats in [0, 1]; a
    leading batch axis is allowed (4-D for colour).
    """
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        chan = arr.astype(np.float32)
    else:
        chan = (arr.astype(np.float64) * 255.0).astype(np.float32)
    if arr.ndim >= 3 and arr.shape[-1] == 3:
        return (LUMA_R * chan[..., 0] + LUMA_G * chan[..., 1]) + LUMA_B * chan[..., 2]
    if arr.ndim >= 3 and arr.shape[-1] == 1:
        return chan[..., 0]
    return chan


def _image_hw(image) -> tuple[int, int]:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[-1] in (1, 3):
        return arr.shape[0], arr.shape[1]
    if arr.ndim == 2:
        return arr.shape
    raise HashError(f"unsupported image shape {arr.shape}")


# ----------------------------------------------------------------------------
# PDQ, reference-exact path


def jarosz_window(old: int, new: int = 64) -> int:
    return (old + 2 * new - 1) // (2 * new)


def _box1d_f32(x: np.ndarray, window: int) -> np.ndarray:
    """Box filter along the last axis with the reference's float32 running sum."""
    length = x.shape[-1]
    half = (window + 2) // 2
    phases = (half - 1, window - half + 1, length - window, half - 1)
    out = np.empty_like(x)
    acc = np.zeros(x.shape[:-1], dtype=np.float32)
    li = ri = oi = 0
    size = 0
    for _ in range(phases[0]):
        acc += x[..., ri]
        size += 1
        ri += 1
    for _ in range(phases[1]):
        acc += x[..., ri]
        size += 1
        out[..., oi] = acc / np.float32(size)
        ri += 1
        oi += 1
    for _ in range(phases[2]):
        acc += x[..., ri]
        acc -= x[..., li]
        out[..., oi] = acc / np.float32(size)
        li += 1
        ri += 1
        oi += 1
    for _ in range(phases[3]):
        acc -= x[..., li]
        size -= 1
        out[..., oi] = acc / np.float32(size)
        li += 1
        oi += 1
    return out


def _decimation_index(old: int, new: int = 64) -> np.ndarray:
    return np.array([int(((i + 0.5) * old) / new) for i in range(new)])


@functools.lru_cache(maxsize=None)
def _dct_matrix_f32() -> np.ndarray:
    scale = float(np.float32(np.sqrt(2.0 / 64.0)))
    i = np.arange(1, 17, dtype=np.float64)[:, None]
    j = np.arange(64, dtype=np.float64)[None, :]
    return (scale * np.cos(((np.pi / 2.0 / 64.0) * i) * (2 * j + 1))).astype(np.float32)


def _downsample64_f32(luma: np.ndarray) -> np.ndarray:
    h, w = luma.shape[-2:]
    if (h, w) == (64, 64):
        return luma.copy()
    wr, wc = jarosz_window(w), jarosz_window(h)
    buf = luma
    for _ in range(2):
        buf = _box1d_f32(buf, wr)
        buf = np.swapaxes(_box1d_f32(np.swapaxes(buf, -1, -2), wc), -1, -2)
    ri, ci = _decimation_index(h), _decimation_index(w)
    return buf[..., ri[:, None], ci[None, :]]


def _dct16_f32(a: np.ndarray) -> np.ndarray:
    d = _dct_matrix_f32()
    t = np.zeros(a.shape[:-2] + (16, 64), dtype=np.float32)
    for k in range(64):
        t += d[:, k][:, None] * a[..., k, :][..., None, :]
    b = np.zeros(a.shape[:-2] + (16, 16), dtype=np.float32)
    for k in range(64):
        b += t[..., :, k][..., :, None] * d[:, k][None, :]
    return b


def _quality_f32(a: np.ndarray) -> np.ndarray:
    dv = np.trunc(((a[..., :-1, :] - a[..., 1:, :]) * np.float32(100)) / np.float32(255))
    dh = np.trunc(((a[..., :, :-1] - a[..., :, 1:]) * np.float32(100)) / np.float32(255))
    total = np.abs(dv).astype(np.int64).sum(axis=(-1, -2)) + np.abs(dh).astype(np.int64).sum(axis=(-1, -2))
    return np.minimum(total // 90, 100)


def _block_to_bits(block: np.ndarray) -> np.ndarray:
    """16x16 coefficient blocks -> MSB-first bit rows (bit k = index i*16+j)."""
    flat = block.reshape(block.shape[:-2] + (256,))
    median = np.sort(flat, axis=-1)[..., 127:128]
    return (flat > median).astype(np.uint8)[..., ::-1]


def pdq_float_block(image) -> tuple[np.ndarray, int]:
    """The 16x16 pre-quantization DCT block and quality, reference arithmetic."""
    h, w = _image_hw(image)
    if h < MIN_PDQ_DIM or w < MIN_PDQ_DIM:
        raise ImageTooSmall(f"PDQ needs at least {MIN_PDQ_DIM}x{MIN_PDQ_DIM}, got {h}x{w}")
    a = _downsample64_f32(_luma255(image))
    return _dct16_f32(a), int(_quality_f32(a))


def pdq_hash(image) -> PerceptualHash:
    block, quality = pdq_float_block(image)
    return PerceptualHash(_block_to_bits(block), quality)


def pdq_hash_batch(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hash a stack of same-sized images; returns (bits (N, 256), quality (N,))."""
    images = np.asarray(images)
    h, w = _image_hw(images[0])
    if h < MIN_PDQ_DIM or w < MIN_PDQ_DIM:
        raise ImageTooSmall(f"PDQ needs at least {MIN_PDQ_DIM}x{MIN_PDQ_DIM}, got {h}x{w}")
    a = _downsample64_f32(_luma255(images))
    return _block_to_bits(_dct16_f32(a)), _quality_f32(a)


# ----------------------------------------------------------------------------
# PDQ as a linear operator (float64), used by the collision attacks


def _box_matrix(length: int, window: int) -> np.ndarray:
    eye = np.eye(length, dtype=np.float32)
    return _box1d_f32(eye.T.copy(), window).T.astype(np.float64)


@functools.lru_cache(maxsize=32)
def pdq_operator(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Matrices (A, B) with DCT block = A @ luma255 @ B.T for an h x w image."""
    d = _dct_matrix_f32().astype(np.float64)
    if (h, w) == (64, 64):
        return d.copy(), d.copy()

    def side(n: int) -> np.ndarray:
        f = _box_matrix(n, jarosz_window(n))
        return d @ (f @ f)[_decimation_index(n)]

    return side(h), side(w)


def pdq_block_linear(luma255: np.ndarray) -> np.ndarray:
    """Float64 DCT block(s) for (..., H, W) luma on the 0..255 scale."""
    a, b = pdq_operator(*luma255.shape[-2:])
    return np.einsum("ih,...hw,jw->...ij", a, luma255, b, optimize=True)


# ----------------------------------------------------------------------------
# surrogate projection hash


def _area_matrix(n: int, out: int) -> np.ndarray:
    """Row-stochastic area-averaging matrix mapping n samples to out bins."""
    edges = np.linspace(0.0, n, out + 1)
    m = np.zeros((out, n))
    for r in range(out):
        lo, hi = edges[r], edges[r + 1]
        for c in range(int(np.floor(lo)), int(np.ceil(hi))):
            m[r, c] = min(hi, c + 1) - max(lo, c)
        m[r] /= hi - lo
    return m


def _local_mean_matrix(n: int, window: int) -> np.ndarray:
    """1-D moving average with mirrored borders (abc|cba), as an n x n matrix."""
    m = np.zeros((n, n))
    half = window // 2
    for i in range(n):
        for j in range(i - half, i + half + 1):
            j = -j - 1 if j < 0 else (2 * n - j - 1 if j >= n else j)
            m[i, j] += 1.0 / window
    return m


@functools.lru_cache(maxsize=32)
def _projection(n_bits: int, seed: int) -> np.ndarray:
    """Seeded projection applied to the flattened grid.

    Each row is a Gaussian direction composed with a high-pass filter (grid
    minus its 5x5 local mean), so the hash reads local contrast rather than
    overall brightness.
    """
    digest = hashlib.sha256(f"surrogate-projection:{n_bits}:{seed}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    w = rng.standard_normal((n_bits, SURROGATE_GRID * SURROGATE_GRID))
    local = _local_mean_matrix(SURROGATE_GRID, SURROGATE_WINDOW)
    w = w @ (np.eye(SURROGATE_GRID ** 2) - np.kron(local, local))
    w.setflags(write=False)
    return w


class ProjectionHasher:
    """Seeded random-projection hash; the matrix is immutable once built."""

    def __init__(self, spec: HashFunctionSpec):
        if spec.kind is not HashKind.SURROGATE:
            raise HashError("ProjectionHasher needs a surrogate-projection spec")
        self.spec = spec
        self.weights = _projection(spec.output_bits, spec.seed)

    @staticmethod
    @functools.lru_cache(maxsize=32)
    def grid_operator(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        return _area_matrix(h, SURROGATE_GRID), _area_matrix(w, SURROGATE_GRID)

    def scores(self, image, batch: bool = False) -> np.ndarray:
        """Pre-sign projection scores; luma is taken on the [0, 1] scale.

        With batch=True the first axis indexes images.
        """
        h, w = _image_hw(np.asarray(image)[0] if batch else image)
        if h < SURROGATE_GRID or w < SURROGATE_GRID:
            raise ImageTooSmall(f"surrogate hash needs at least {SURROGATE_GRID}px per side")
        luma = _luma255(image).astype(np.float64) / 255.0
        ah, aw = self.grid_operator(luma.shape[-2], luma.shape[-1])
        grid = np.einsum("ih,...hw,jw->...ij", ah, luma, aw, optimize=True)
        return grid.reshape(grid.shape[:-2] + (-1,)) @ self.weights.T

    def score_gradient(self, image_shape: tuple[int, int], d_scores: np.ndarray) -> np.ndarray:
        """Back-propagate d loss / d scores to d loss / d luma (on [0, 1])."""
        ah, aw = self.grid_operator(*image_shape)
        d_grid = (d_scores @ self.weights).reshape(d_scores.shape[:-1] + (SURROGATE_GRID, SURROGATE_GRID))
        return np.einsum("ih,...ij,jw->...hw", ah, d_grid, aw, optimize=True)

    def hash(self, image) -> PerceptualHash:
        return PerceptualHash((self.scores(image) > 0).astype(np.uint8))

    def hash_batch(self, images) -> np.ndarray:
        return (self.scores(np.asarray(images), batch=True) > 0).astype(np.uint8)


def surrogate_hash(image, spec: HashFunctionSpec) -> PerceptualHash:
    return ProjectionHasher(spec).hash(image)


# ----------------------------------------------------------------------------
# dispatch


def hash_image(image, spec: HashFunctionSpec = HashFunctionSpec()) -> PerceptualHash:
    if spec.kind is HashKind.PDQ:
        return pdq_hash(image)
    return surrogate_hash(image, spec)


def hash_many(images: Sequence | Iterable, spec: HashFunctionSpec = HashFunctionSpec(), chunk: int = 256) -> np.ndarray:
    """Hash a sequence of images into an (N, n) bit matrix.

    Consecutive images of identical shape are hashed together in chunks.
    """
    hasher = ProjectionHasher(spec) if spec.kind is HashKind.SURROGATE else None
    rows: list[np.ndarray] = []
    pending: list[np.ndarray] = []

    def flush():
        if not pending:
            return
        stack = np.stack(pending)
        rows.append(pdq_hash_batch(stack)[0] if hasher is None else hasher.hash_batch(stack))
        pending.clear()

    for img in images:
        img = np.asarray(img)
        if pending and (img.shape != pending[0].shape or len(pending) >= chunk):
            flush()
        pending.append(img)
    flush()
    if not rows:
        return np.zeros((0, spec.output_bits), dtype=np.uint8)
    return np.concatenate(rows)
