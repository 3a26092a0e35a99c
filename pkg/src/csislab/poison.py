"""Poison-hash selection: k-modes over binary codes and the random baseline.

The objective for a poison set U over scene hashes s_1..s_N is
sum_i min_{h in U} hamming(h, s_i); k-modes minimises it locally.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .hashing import LengthMismatch, as_bit_matrix, bits_to_hex, hamming_matrix, hex_to_bits, min_hamming

STRATEGIES = ("kmodes", "random")


class InsufficientDistinctHashes(ValueError):
    pass


class NonConvergence(RuntimeWarning):
    pass


@dataclass(frozen=True)
class KModesConfig:
    k: int
    restarts: int = 5
    max_iterations: int = 100
    seed: int = 0
    swap_limit: int = 2000       # swap refinement when distinct hashes <= this, medoid polish above

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class PoisonSet:
    bits: np.ndarray                 # (k, n) uint8
    source_index: np.ndarray         # (k,) row of the scene hash each poison equals
    objective: int                   # sum of per-image min hamming distances
    strategy: str
    converged: bool = True
    trace: list = field(default_factory=list, repr=False)  # per-restart objective logs
    restart_objectives: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.bits.shape[0]

    def hexes(self) -> list[str]:
        return [bits_to_hex(b) for b in self.bits]


def _distinct_rows(bits: np.ndarray) -> np.ndarray:
    """Indices of the first occurrence of each distinct row, in input order."""
    _, first = np.unique(np.packbits(bits, axis=1), axis=0, return_index=True)
    return np.sort(first)


def _multiplicity(points: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """How many input rows equal each distinct row listed in candidates."""
    _, first, counts = np.unique(np.packbits(points, axis=1), axis=0, return_index=True, return_counts=True)
    by_first = dict(zip(first.tolist(), counts.tolist()))
    return np.array([by_first[int(c)] for c in candidates], np.int64)


def objective(poisons, scene_hashes) -> tuple[int, np.ndarray]:
    """Exact objective and the per-image minimum distances."""
    p = as_bit_matrix(poisons.bits if isinstance(poisons, PoisonSet) else poisons)
    s = as_bit_matrix(scene_hashes)
    if p.shape[1] != s.shape[1]:
        raise LengthMismatch(f"poisons have {p.shape[1]} bits, scene hashes {s.shape[1]}")
    best, _ = min_hamming(s, p)
    return int(best.sum(dtype=np.int64)), best


def _majority(points: np.ndarray, assign: np.ndarray, modes: np.ndarray) -> np.ndarray:
    k = modes.shape[0]
    onehot = np.zeros((points.shape[0], k), np.float32)
    onehot[np.arange(points.shape[0]), assign] = 1
    ones = onehot.T @ points.astype(np.float32)
    sizes = onehot.sum(axis=0)[:, None]
    new = modes.copy()
    new[2 * ones > sizes] = 1
    new[2 * ones < sizes] = 0
    return new


def _kmodes_run(points: np.ndarray, candidates: np.ndarray, k: int, rng: np.random.Generator,
                max_iterations: int) -> tuple[np.ndarray, np.ndarray, list[int], bool]:
    modes = points[rng.choice(candidates, size=k, replace=False)].copy()
    log: list[int] = []
    converged = False
    for _ in range(max_iterations):
        d = hamming_matrix(points, modes)
        assign = d.argmin(axis=1)
        nearest = d[np.arange(len(points)), assign]
        log.append(int(nearest.sum(dtype=np.int64)))
        new = _majority(points, assign, modes)
        sizes = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(sizes == 0):
            # reseed an empty cluster at the worst-served point
            far = int(nearest.argmax())
            new[j] = points[far]
            nearest[far] = -1
        if np.array_equal(new, modes):
            converged = True
            break
        modes = new
    d = hamming_matrix(points, modes)
    return modes, d.argmin(axis=1), log, converged


def snap_modes(modes: np.ndarray, points: np.ndarray, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Replace each mode by the nearest distinct input hash, closest pairs first."""
    d = hamming_matrix(modes, points[candidates]).astype(np.int64)
    chosen = np.full(len(modes), -1)
    snap = np.zeros(len(modes), np.int64)
    used = np.zeros(len(candidates), bool)
    for j in np.argsort(d.min(axis=1), kind="stable"):
        row = np.where(used, np.iinfo(np.int64).max, d[j])
        c = int(row.argmin())
        used[c] = True
        chosen[j] = candidates[c]
        snap[j] = d[j, c]
    return chosen, snap


def _second_best(dm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.argsort(dm, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(dm))
    nearest = dm[rows, order[:, 0]]
    second = dm[rows, order[:, 1]] if dm.shape[1] > 1 else np.full(len(dm), np.iinfo(np.int32).max // 2)
    return order[:, 0], nearest, second


def refine_medoids(points: np.ndarray, chosen: np.ndarray, candidates: np.ndarray, swap: bool,
                   max_passes: int = 20) -> np.ndarray:
    """Local search over poison sets drawn from the distinct input hashes.

    With swap=True, try replacing each poison by every other distinct hash and
    keep any exchange that lowers the objective (eager, one pass per sweep over
    candidates). Otherwise move each poison to the best member of its own
    cluster until nothing changes. Both only ever lower the objective.
    """
    uniq = points[candidates]
    w = _multiplicity(points, candidates)
    pos = {int(c): i for i, c in enumerate(candidates)}
    med = np.array([pos[int(c)] for c in chosen])
    if swap:
        d = hamming_matrix(uniq, uniq).astype(np.int32)
        assign, near, second = _second_best(d[:, med])
        for _ in range(max_passes):
            improved = False
            in_set = np.zeros(len(uniq), bool)
            in_set[med] = True
            for c in range(len(uniq)):
                if in_set[c]:
                    continue
                dc = d[:, c]
                gain_all = np.minimum(dc, near) - near
                base = int(w @ gain_all)
                per = np.bincount(assign, weights=w * (np.minimum(dc, second) - np.minimum(dc, near)),
                                  minlength=len(med))
                j = int(per.argmin())
                if base + per[j] < 0:
                    in_set[med[j]] = False
                    in_set[c] = True
                    med[j] = c
                    assign, near, second = _second_best(d[:, med])
                    improved = True
            if not improved:
                break
    else:
        for _ in range(max_passes):
            assign = hamming_matrix(uniq, uniq[med]).argmin(axis=1)
            new = med.copy()
            for j in range(len(med)):
                members = np.flatnonzero(assign == j)
                cost = hamming_matrix(uniq[members], uniq[members]).astype(np.int64) @ w[members]
                best = members[cost.argmin()]
                if cost.min() < cost[np.flatnonzero(members == med[j])[0]]:
                    new[j] = best
            if np.array_equal(new, med) or len(set(new.tolist())) < len(new):
                break
            med = new
    return candidates[med]


def kmodes_select(scene_hashes, cfg: KModesConfig) -> PoisonSet:
    points = as_bit_matrix(scene_hashes)
    candidates = _distinct_rows(points)
    if len(candidates) < cfg.k:
        raise InsufficientDistinctHashes(f"k={cfg.k} but only {len(candidates)} distinct hashes")
    swap = len(candidates) <= cfg.swap_limit
    # restart r uses the r-th child seed, so a 1-restart run is restart 0 of any longer run
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    best = None
    traces, finals = [], []
    all_converged = True
    for r, child in enumerate(children):
        modes, assign, log, converged = _kmodes_run(points, candidates, cfg.k, np.random.default_rng(child),
                                                    cfg.max_iterations)
        all_converged &= converged
        source, _ = snap_modes(modes, points, candidates)
        source = refine_medoids(points, source, candidates, swap)
        obj, _ = objective(points[source], points)
        traces.append(log)
        finals.append(obj)
        if best is None or obj < best[0]:
            best = (obj, source, converged)
    if not all_converged:
        warnings.warn(f"k-modes hit max_iterations={cfg.max_iterations} in some restarts", NonConvergence,
                      stacklevel=2)
    obj, source, converged = best
    return PoisonSet(points[source].copy(), source, obj, "kmodes", converged, traces, finals)


def random_select(scene_hashes, k: int, seed: int = 0) -> PoisonSet:
    points = as_bit_matrix(scene_hashes)
    candidates = _distinct_rows(points)
    if len(candidates) < k:
        raise InsufficientDistinctHashes(f"k={k} but only {len(candidates)} distinct hashes")
    source = np.random.default_rng(seed).choice(candidates, size=k, replace=False)
    obj, _ = objective(points[source], points)
    return PoisonSet(points[source].copy(), source, obj, "random")


def select(scene_hashes, strategy: str, k: int, seed: int = 0, restarts: int = 5,
           max_iterations: int = 100) -> PoisonSet:
    if strategy == "kmodes":
        return kmodes_select(scene_hashes, KModesConfig(k, restarts, max_iterations, seed))
    if strategy == "random":
        return random_select(scene_hashes, k, seed)
    raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")


@dataclass(frozen=True)
class MarkovReport:
    empirical_miss_rate: Fraction
    expected_min_over_t: Fraction
    holds: bool


def markov_bound_check(poisons, scene_hashes, t) -> MarkovReport:
    """Compare P(min distance >= t) with E[min distance] / t, exactly.

    t is in the same units as the distances: an integer or float hamming
    count, or a Fraction. Normalized thresholds should be multiplied by n.
    """
    t = Fraction(t)
    if t <= 0:
        raise ValueError("t must be positive")
    _, mins = objective(poisons, scene_hashes)
    n = len(mins)
    # distances are integers, so m >= t exactly when m >= ceil(t)
    miss = Fraction(int(np.count_nonzero(mins >= math.ceil(t))), n)
    expected = Fraction(int(mins.sum(dtype=np.int64)), n) / t
    return MarkovReport(miss, expected, miss <= expected)


def save_poisons(path, poisons: PoisonSet) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for hx, src in zip(poisons.hexes(), poisons.source_index.tolist()):
            fh.write(json.dumps({"hash": hx, "source_index": int(src), "strategy": poisons.strategy}) + "\n")


def load_poisons(path, scene_hashes=None) -> PoisonSet:
    """Read a poison file; the objective is recomputed when scene hashes are given."""
    with open(path) as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    if not recs:
        raise ValueError(f"{path}: no poison records")
    bits = np.stack([hex_to_bits(r["hash"]) for r in recs])
    source = np.array([r["source_index"] for r in recs], dtype=np.int64)
    obj = objective(bits, scene_hashes)[0] if scene_hashes is not None else -1
    return PoisonSet(bits, source, obj, recs[0]["strategy"])
