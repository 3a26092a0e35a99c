"""Hash database, threshold matching and threshold calibration."""
from __future__ import annotations

import enum
import math
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .hashing import (DistanceMetric, HashFunctionSpec, HashKind, LengthMismatch, PDQ_BITS, as_bit_matrix,
                      hamming_matrix, min_hamming)

MAGIC = b"CSDB"
FORMAT_VERSION = 1
_HEADER = struct.Struct(">4sHHQ")


class MatcherError(ValueError):
    pass


class EmptyDatabase(MatcherError):
    pass


class EmptyDatabaseWarning(UserWarning):
    pass


class UnreachableTarget(MatcherError):
    pass


class Provenance(enum.IntEnum):
    LEGITIMATE = 0
    POISON = 1


@dataclass(frozen=True, eq=False)
class HashDatabase:
    bits: np.ndarray            # (N, n) uint8, unique rows
    tags: np.ndarray            # (N,) uint8 Provenance values
    hash_spec: HashFunctionSpec
    duplicates: int = 0

    def __post_init__(self):
        self.bits.setflags(write=False)
        self.tags.setflags(write=False)

    def __len__(self) -> int:
        return self.bits.shape[0]

    @property
    def n_bits(self) -> int:
        return self.bits.shape[1]

    @property
    def poison_count(self) -> int:
        return int(np.count_nonzero(self.tags == Provenance.POISON))

    @property
    def poison_fraction(self) -> Fraction:
        return Fraction(self.poison_count, len(self))

    def with_poisons(self, poison_bits) -> "HashDatabase":
        poison_bits = as_bit_matrix(poison_bits)
        return db_build(np.concatenate([self.bits, poison_bits]),
                        np.concatenate([self.tags, np.full(len(poison_bits), Provenance.POISON, np.uint8)]),
                        self.hash_spec)

    def legitimate(self) -> "HashDatabase":
        keep = self.tags == Provenance.LEGITIMATE
        return HashDatabase(self.bits[keep].copy(), self.tags[keep].copy(), self.hash_spec)

    def same_entries(self, other: "HashDatabase") -> bool:
        return (self.bits.shape == other.bits.shape and np.array_equal(self.bits, other.bits)
                and np.array_equal(self.tags, other.tags))


def default_spec(n_bits: int) -> HashFunctionSpec:
    return HashFunctionSpec.pdq() if n_bits == PDQ_BITS else HashFunctionSpec.surrogate(n_bits)


def db_build(hashes, tags=None, hash_spec: HashFunctionSpec | None = None) -> HashDatabase:
    """Deduplicate hashes into a database. Duplicates keep the first tag seen."""
    try:
        bits = as_bit_matrix(hashes)
    except LengthMismatch:          # already specific; only wrap generic parse errors
        raise
    except ValueError as exc:
        raise MatcherError(str(exc)) from exc
    if bits.shape[0] == 0:
        raise EmptyDatabase("cannot build a database from zero hashes")
    hash_spec = hash_spec or default_spec(bits.shape[1])
    if bits.shape[1] != hash_spec.output_bits:
        raise LengthMismatch(f"hashes have {bits.shape[1]} bits, spec says {hash_spec.output_bits}")
    tags = np.zeros(len(bits), np.uint8) if tags is None else np.asarray(
        [Provenance(t) if not isinstance(t, str) else Provenance[t.upper()] for t in tags], np.uint8)
    if len(tags) != len(bits):
        raise MatcherError("tags and hashes differ in length")
    _, first = np.unique(np.packbits(bits, axis=1), axis=0, return_index=True)
    keep = np.sort(first)
    return HashDatabase(bits[keep].copy(), tags[keep].copy(), hash_spec, len(bits) - len(keep))


def merge(dbs) -> HashDatabase:
    dbs = list(dbs)
    if not dbs:
        raise EmptyDatabase("nothing to merge")
    if len({d.n_bits for d in dbs}) != 1:
        raise LengthMismatch("databases have different bit lengths")
    merged = db_build(np.concatenate([d.bits for d in dbs]), np.concatenate([d.tags for d in dbs]), dbs[0].hash_spec)
    return merged


def stats(db: HashDatabase) -> dict:
    return {
        "entries": len(db),
        "bits": db.n_bits,
        "hash_kind": db.hash_spec.kind.value,
        "poison": db.poison_count,
        "legitimate": len(db) - db.poison_count,
        "poison_fraction": float(db.poison_fraction),
        "duplicates_collapsed": db.duplicates,
    }


def save_db(path, db: HashDatabase) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    packed = np.packbits(db.bits, axis=1)
    body = np.concatenate([packed, db.tags[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, db.n_bits, len(db)))
        fh.write(body.tobytes())


def load_db(path, hash_spec: HashFunctionSpec | None = None) -> HashDatabase:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MatcherError(f"{path}: truncated header")
    magic, version, n_bits, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MatcherError(f"{path}: not a hash database (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise MatcherError(f"{path}: unsupported format version {version}")
    stride = (n_bits + 7) // 8 + 1
    body = np.frombuffer(data, np.uint8, offset=_HEADER.size)
    if body.size != count * stride:
        raise MatcherError(f"{path}: expected {count} entries of {stride} bytes, found {body.size} bytes")
    body = body.reshape(count, stride)
    bits = np.unpackbits(body[:, :-1], axis=1, count=n_bits)
    hash_spec = hash_spec or default_spec(n_bits)
    return HashDatabase(bits, body[:, -1].copy(), hash_spec)


# ----------------------------------------------------------------------------
# matching


@dataclass(frozen=True)
class MatchConfig:
    metric: DistanceMetric = DistanceMetric.NORMALIZED_L1
    threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "metric", DistanceMetric(self.metric))
        if self.threshold < 0 or not math.isfinite(self.threshold):
            raise MatcherError("threshold must be finite and non-negative")
        if self.metric is DistanceMetric.NORMALIZED_L1 and self.threshold > 1:
            raise MatcherError("normalized threshold must lie in [0, 1]")
        if self.metric is DistanceMetric.HAMMING and self.threshold != int(self.threshold):
            raise MatcherError("hamming threshold must be an integer")

    def max_hamming(self, n_bits: int) -> int:
        """Largest hamming distance that still flags."""
        if self.metric is DistanceMetric.HAMMING:
            return min(int(self.threshold), n_bits)
        ks = np.arange(n_bits + 1)
        return int(ks[ks / n_bits <= self.threshold].max())


@dataclass(frozen=True)
class MatchResult:
    flagged: bool
    best_distance: float
    best_entry_provenance: Provenance | None
    best_index: int = -1


def _check_lengths(queries: np.ndarray, db: HashDatabase):
    if queries.shape[1] != db.n_bits:
        raise LengthMismatch(f"query has {queries.shape[1]} bits, database {db.n_bits}")


def nearest(queries, db: HashDatabase) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimum hamming distance to the database and the matching row."""
    q = as_bit_matrix(queries)
    _check_lengths(q, db)
    if len(db) == 0:
        return np.full(len(q), np.iinfo(np.int32).max, np.int32), np.full(len(q), -1)
    return min_hamming(q, db.bits)


def flag(image_hash, db: HashDatabase, cfg: MatchConfig) -> MatchResult:
    q = as_bit_matrix(image_hash.bits if hasattr(image_hash, "bits") else image_hash)
    _check_lengths(q, db)
    if len(db) == 0:
        warnings.warn("flag() against an empty database", EmptyDatabaseWarning, stacklevel=2)
        return MatchResult(False, math.inf, None)
    best, arg = min_hamming(q, db.bits)
    ham, idx = int(best[0]), int(arg[0])
    dist = ham if cfg.metric is DistanceMetric.HAMMING else ham / db.n_bits
    return MatchResult(ham <= cfg.max_hamming(db.n_bits), dist, Provenance(int(db.tags[idx])), idx)


def flag_many(queries, db: HashDatabase, cfg: MatchConfig) -> np.ndarray:
    best, _ = nearest(queries, db)
    return best <= cfg.max_hamming(db.n_bits)


def fpr(benign, db: HashDatabase, cfg: MatchConfig) -> float:
    q = as_bit_matrix(benign)
    if len(q) == 0:
        raise MatcherError("empty benign set")
    return float(np.count_nonzero(flag_many(q, db, cfg))) / len(q)


def threshold_grid(n_bits: int, metric=DistanceMetric.NORMALIZED_L1) -> np.ndarray:
    ks = np.arange(n_bits + 1)
    return ks if DistanceMetric(metric) is DistanceMetric.HAMMING else ks / n_bits


def flag_rate_curve(min_ham: np.ndarray, n_bits: int) -> np.ndarray:
    """Fraction of items with min distance <= k, for k = 0..n."""
    counts = np.bincount(np.minimum(min_ham, n_bits + 1), minlength=n_bits + 2)[:n_bits + 1]
    return np.cumsum(counts) / len(min_ham)


@dataclass(frozen=True)
class Calibration:
    threshold: float
    hamming: int
    target_fpr: float
    achieved_fpr: float
    thresholds: np.ndarray = field(repr=False)
    fpr: np.ndarray = field(repr=False)


def calibrate_threshold(benign, db: HashDatabase, target_fpr: float,
                        metric=DistanceMetric.NORMALIZED_L1) -> Calibration:
    """Largest grid threshold whose benign flag rate stays at or below target_fpr."""
    if not 0 <= target_fpr <= 1:
        raise MatcherError("target_fpr must lie in [0, 1]")
    q = as_bit_matrix(benign)
    if len(q) == 0:
        raise MatcherError("empty benign set")
    best, _ = nearest(q, db)
    counts = np.cumsum(np.bincount(np.minimum(best, db.n_bits), minlength=db.n_bits + 1))
    allowed = math.floor(target_fpr * len(q) + 1e-9)
    ok = np.flatnonzero(counts <= allowed)
    if ok.size == 0:
        raise UnreachableTarget(f"{counts[0]} of {len(q)} benign hashes sit at distance 0 from the database")
    k = int(ok.max())
    grid = threshold_grid(db.n_bits, metric)
    curve = counts / len(q)
    return Calibration(float(grid[k]), k, target_fpr, float(curve[k]), grid, curve)


@dataclass(frozen=True)
class PairwiseCurve:
    mode: str
    pairs: int
    thresholds: np.ndarray
    rate: np.ndarray        # fraction of pairs within each threshold


def pairwise_curve(hashes, mode: str = "all", n_pairs: int = 100_000, seed: int = 0,
                   metric=DistanceMetric.NORMALIZED_L1, chunk: int = 1024) -> PairwiseCurve:
    """Distribution of pairwise distances within a benign set, as a flag rate per threshold.

    mode "all" uses every unordered pair; mode "random" samples n_pairs
    pairs of distinct indices with replacement.
    """
    bits = as_bit_matrix(hashes)
    n, nb = bits.shape
    if n < 2:
        raise MatcherError("need at least two hashes")
    hist = np.zeros(nb + 1, np.int64)
    if mode == "all":
        for s in range(0, n, chunk):
            d = hamming_matrix(bits[s:s + chunk], bits[s:])
            rows, cols = np.triu_indices(d.shape[0], k=1, m=d.shape[1])
            hist += np.bincount(d[rows, cols], minlength=nb + 1)
    elif mode == "random":
        rng = np.random.default_rng(seed)
        i = rng.integers(n, size=n_pairs)
        j = (i + rng.integers(1, n, size=n_pairs)) % n
        hist += np.bincount(np.count_nonzero(bits[i] != bits[j], axis=1), minlength=nb + 1)
    else:
        raise MatcherError(f"mode must be 'all' or 'random', got {mode!r}")
    total = int(hist.sum())
    return PairwiseCurve(mode, total, threshold_grid(nb, metric), np.cumsum(hist) / total)
