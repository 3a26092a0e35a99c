"""Crafting delivery images whose hash lands on a chosen poison hash.

The perturbation is a single luminance offset per pixel, added to every
channel of the source, kept inside an L-infinity ball. Two optimisers:
NES (antithetic Gaussian queries, black-box) for any hash, and signed
projected gradient descent through the surrogate projection hash.
"""
from __future__ import annotations

import functools
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hashing import (HashFunctionSpec, HashKind, ProjectionHasher, as_bit_matrix, bits_to_hex, hash_image,
                      pdq_operator)
from .imageops import LUMA_WEIGHTS, quantize8, save_png

MODES = ("nes", "projected-gradient")


class AttackError(ValueError):
    pass


class TargetLengthMismatch(AttackError):
    pass


class PoolExhausted(AttackError):
    pass


class BudgetZero(UserWarning):
    pass


@dataclass(frozen=True)
class NESConfig:
    sigma: float = 0.1
    eta: float = 0.01
    pairs_per_step: int = 50
    total_samples: int = 10_000
    momentum: float = 0.9
    # exploration noise lives in this half-open band of 2-D DCT frequencies
    # (per axis, relative to the image extent); None draws white pixel noise
    noise_band: tuple[int, int] | None = (1, 17)

    def __post_init__(self):
        if self.pairs_per_step < 1 or self.total_samples < 2 or self.total_samples % 2:
            raise AttackError("NES needs a positive, even sample budget and at least one pair per step")
        if not 0 <= self.momentum < 1:
            raise AttackError("momentum must lie in [0, 1)")
        if self.noise_band is not None:
            lo, hi = self.noise_band
            if not 0 <= lo < hi:
                raise AttackError("noise_band must satisfy 0 <= lo < hi")
            object.__setattr__(self, "noise_band", (int(lo), int(hi)))

    @property
    def steps(self) -> int:
        return max(1, self.total_samples // (2 * self.pairs_per_step))


@dataclass(frozen=True)
class PGConfig:
    iterations: int = 1000
    step_size: float = 1e-4


@dataclass(frozen=True)
class AttackConfig:
    linf_budget: float = 8 / 255
    mode: str = "nes"
    nes: NESConfig = NESConfig()
    pg: PGConfig = PGConfig()
    margin: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.linf_budget <= 1:
            raise AttackError("linf_budget must lie in [0, 1]")
        if self.mode not in MODES:
            raise AttackError(f"mode must be one of {MODES}, got {self.mode!r}")
        if isinstance(self.nes, dict):
            object.__setattr__(self, "nes", NESConfig(**self.nes))
        if isinstance(self.pg, dict):
            object.__setattr__(self, "pg", PGConfig(**self.pg))


@dataclass
class CollisionResult:
    image: np.ndarray = field(repr=False)
    target: str
    initial_distance: float
    final_distance: float
    linf_actual: float
    l2_distance: float
    queries_used: int
    trace: list = field(default_factory=list, repr=False)   # (loss, hamming) of each iterate

    def record(self, **extra) -> dict:
        rec = {k: v for k, v in asdict(self).items() if k not in ("image", "trace")}
        rec.update(extra)
        return rec


# ----------------------------------------------------------------------------
# collision loss


class CollisionLoss:
    """Margin loss between an image's pre-quantization values and a target hash.

    For PDQ the values are the 256 DCT coefficients centred on the midpoint
    of their two central order statistics; for the surrogate they are the
    projection scores. The loss is zero only when every value sits on the
    target side with at least `margin` to spare, which forces an exact match.
    """

    def __init__(self, target_bits, spec: HashFunctionSpec, margin: float = 1.0, rgb: bool = False):
        target = np.asarray(target_bits, dtype=np.uint8).reshape(-1)
        if target.size != spec.output_bits:
            raise TargetLengthMismatch(f"target has {target.size} bits, hash produces {spec.output_bits}")
        self.spec = spec
        self.margin = margin
        self.rgb = rgb
        self.target = target
        if spec.kind is HashKind.PDQ:
            # hash bits are the coefficient block read in reverse order
            self.sign = 2.0 * target[::-1].astype(np.float64) - 1.0
            self.hasher = None
        else:
            self.sign = 2.0 * target.astype(np.float64) - 1.0
            self.hasher = ProjectionHasher(spec)

    def values(self, images: np.ndarray) -> np.ndarray:
        """Centred pre-quantization values for a batch (..., H, W[, 3]) on [0, 1]."""
        luma = images @ LUMA_WEIGHTS.astype(images.dtype) if self.rgb else images
        if self.hasher is None:
            a, b = pdq_operator(*luma.shape[-2:])
            block = np.einsum("ih,...hw,jw->...ij", a.astype(luma.dtype), luma * 255, b.astype(luma.dtype),
                              optimize=True)
            flat = block.reshape(block.shape[:-2] + (256,))
            part = np.partition(flat, (127, 128), axis=-1)
            return flat - 0.5 * (part[..., 127:128] + part[..., 128:129])
        return self.hasher.scores(luma, batch=luma.ndim > 2)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return np.maximum(0.0, self.margin - self.sign * self.values(images)).sum(axis=-1)

    def luma_gradient(self, image: np.ndarray) -> np.ndarray:
        """Exact d loss / d luma for the surrogate hash."""
        if self.hasher is None:
            raise AttackError("exact gradients are only available for the surrogate hash")
        luma = image @ LUMA_WEIGHTS if self.rgb else image
        active = (self.margin - self.sign * self.hasher.scores(luma)) > 0
        return self.hasher.score_gradient(luma.shape[-2:], -self.sign * active)


def collision_loss(image, target, hash_spec: HashFunctionSpec, margin: float = 1.0) -> float:
    image = np.asarray(image, dtype=np.float64)
    bits = target.bits if hasattr(target, "bits") else target
    return float(CollisionLoss(bits, hash_spec, margin, rgb=image.ndim == 3)(image))


# ----------------------------------------------------------------------------
# optimisers


def _hamming_to(image: np.ndarray, target: np.ndarray, spec: HashFunctionSpec) -> int:
    return int(np.count_nonzero(hash_image(image, spec).bits != target))


def _render(source: np.ndarray, delta: np.ndarray) -> np.ndarray:
    d = delta[..., None] if source.ndim == delta.ndim + 1 else delta
    out = source + d
    return np.clip(out, 0.0, 1.0, out=out)


@functools.lru_cache(maxsize=16)
def _dct_rows(n: int, lo: int, hi: int) -> np.ndarray:
    """Orthonormal DCT-II basis vectors lo..hi-1 for length n, as rows."""
    k = np.arange(lo, min(hi, n))[:, None]
    rows = np.cos(np.pi * k * (2 * np.arange(n)[None, :] + 1) / (2 * n)) * np.sqrt(2.0 / n)
    rows[k[:, 0] == 0] /= np.sqrt(2.0)
    return rows


def _noise(rng: np.random.Generator, count: int, shape: tuple[int, int], band) -> np.ndarray:
    """Unit-variance-per-pixel Gaussian noise, optionally confined to a DCT band."""
    if band is None:
        return rng.standard_normal((count,) + shape)
    rh, rw = _dct_rows(shape[0], *band), _dct_rows(shape[1], *band)
    z = rng.standard_normal((count, rh.shape[0], rw.shape[0]))
    return np.einsum("ih,nij,jw->nhw", rh, z, rw, optimize=True) * np.sqrt(shape[0] * shape[1] / z[0].size)


class _Tracker:
    """Best-so-far bookkeeping on the 8-bit quantized iterate."""

    def __init__(self, source, target, spec, loss):
        self.source, self.target, self.spec, self.loss = source, target, spec, loss
        self.best = (_hamming_to(source, target, spec), float(loss(source)), source)
        self.trace = [(self.best[1], self.best[0])]

    def offer(self, delta) -> bool:
        cand = quantize8(_render(self.source, delta))
        ham = _hamming_to(cand, self.target, self.spec)
        value = float(self.loss(cand))
        self.trace.append((value, ham))
        if (ham, value) < self.best[:2]:
            self.best = (ham, value, cand)
        return ham == 0 and value == 0.0


def _nes(source, loss, tracker, cfg: AttackConfig, rng) -> int:
    nes = cfg.nes
    shape = source.shape[:2]
    # queries only steer the search, so they run in float32; accepted
    # iterates are re-checked exactly by the tracker
    src32 = source.astype(np.float32)[None]
    delta = np.zeros(shape)
    velocity = np.zeros(shape)
    eps = cfg.linf_budget
    queries = 0
    for _ in range(nes.steps):
        u = _noise(rng, nes.pairs_per_step, shape, nes.noise_band)
        u = u.astype(np.float32)
        d32 = delta.astype(np.float32)
        batch = np.concatenate([d32 + nes.sigma * u, d32 - nes.sigma * u])
        values = loss(_render(src32, batch)).astype(np.float64)
        queries += len(batch)
        diff = values[:nes.pairs_per_step] - values[nes.pairs_per_step:]
        grad = np.tensordot(diff, u.astype(np.float64), axes=1) / (2 * nes.sigma * nes.pairs_per_step)
        velocity = nes.momentum * velocity + (1 - nes.momentum) * grad
        delta = np.clip(delta - nes.eta * np.sign(velocity), -eps, eps)
        queries += 1
        if tracker.offer(delta):
            break
    return queries


def _pgd(source, loss: CollisionLoss, tracker, cfg: AttackConfig) -> int:
    delta = np.zeros(source.shape[:2])
    eps = cfg.linf_budget
    for it in range(cfg.pg.iterations):
        grad = loss.luma_gradient(_render(source, delta))
        delta = np.clip(delta - cfg.pg.step_size * np.sign(grad), -eps, eps)
        if tracker.offer(delta):
            return it + 1
    return cfg.pg.iterations


def craft_delivery(source, target, hash_spec: HashFunctionSpec, cfg: AttackConfig = AttackConfig(),
                   rng: np.random.Generator | None = None) -> CollisionResult:
    source = np.asarray(source, dtype=np.float64)
    target_bits = np.asarray(target.bits if hasattr(target, "bits") else target, dtype=np.uint8).reshape(-1)
    n = hash_spec.output_bits
    if target_bits.size != n:
        raise TargetLengthMismatch(f"target has {target_bits.size} bits, hash produces {n}")
    if cfg.mode == "projected-gradient" and hash_spec.kind is not HashKind.SURROGATE:
        raise AttackError("projected-gradient needs the surrogate hash")
    loss = CollisionLoss(target_bits, hash_spec, cfg.margin, rgb=source.ndim == 3)
    tracker = _Tracker(source, target_bits, hash_spec, loss)
    initial = tracker.best[0]
    hexed = bits_to_hex(target_bits)
    if cfg.linf_budget == 0:
        warnings.warn("zero perturbation budget; returning the source unchanged", BudgetZero, stacklevel=2)
    if cfg.linf_budget == 0 or initial == 0:
        return CollisionResult(source.copy(), hexed, initial / n, initial / n, 0.0, 0.0, 1, tracker.trace)
    rng = rng or np.random.default_rng(cfg.seed)
    if cfg.mode == "nes":
        queries = _nes(source, loss, tracker, cfg, rng)
    else:
        queries = _pgd(source, loss, tracker, cfg)
    ham, _, image = tracker.best
    diff = image - source
    return CollisionResult(image, hexed, initial / n, ham / n, float(np.abs(diff).max()),
                           float(np.sqrt((diff ** 2).sum())), queries, tracker.trace)


# ----------------------------------------------------------------------------
# greedy batch assignment


@dataclass
class Assignment:
    poison_index: int
    source_index: int
    result: CollisionResult
    candidates: list  # (source_index, final_distance) for every attacked candidate


def attack_rng(seed: int, poison_index: int, source_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, poison_index, source_index]))


def craft_batch(sources, poisons, hash_spec: HashFunctionSpec, cfg: AttackConfig = AttackConfig(),
                candidates_per_poison: int | None = None) -> list[Assignment]:
    """For each poison in order, attack pool images, keep the closest, remove it.

    With candidates_per_poison set, each poison attacks that many images drawn
    uniformly without replacement from the remaining pool (seeded per poison),
    taken in ascending pool order.
    """
    targets = as_bit_matrix(poisons.bits if hasattr(poisons, "bits") else poisons)
    if len(sources) < len(targets):
        raise PoolExhausted(f"pool has {len(sources)} images for {len(targets)} poisons")
    remaining = list(range(len(sources)))
    out = []
    for p, target in enumerate(targets):
        pool = remaining
        if candidates_per_poison is not None and candidates_per_poison < len(remaining):
            pick = np.random.default_rng([cfg.seed, p]).choice(len(remaining), candidates_per_poison, replace=False)
            pool = [remaining[i] for i in np.sort(pick)]
        results = [(s, craft_delivery(sources[s], target, hash_spec, cfg, attack_rng(cfg.seed, p, s))) for s in pool]
        src, best = min(results, key=lambda sr: (sr[1].final_distance, sr[0]))
        remaining.remove(src)
        out.append(Assignment(p, src, best, [(s, r.final_distance) for s, r in results]))
    return out


def write_results(out_dir, assignments: list[Assignment], source_names=None) -> Path:
    """Save crafted PNGs and a line-delimited result log; returns the log path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "results.jsonl"
    with open(log_path, "w") as fh:
        for a in assignments:
            name = f"delivery_{a.poison_index:05d}.png"
            save_png(out / name, a.result.image)
            src = source_names[a.source_index] if source_names else a.source_index
            fh.write(json.dumps(a.result.record(poison_index=a.poison_index, source=src, image=name)) + "\n")
    return log_path
