"""Metrics and sweeps: surveillance rate, false positives, detection under variations.

A scenario is the pair (corpora, scene): a clean illicit-hash database with a
benign set and a threshold calibrated on it, plus one scene's augmented
reference hashes and held-out user captures. Sweeps add poison hashes chosen
from the scene and re-measure.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hashing import HashFunctionSpec, HashKind, hash_many
from .imageops import (AugmentationConfig, VariationLevel, apply_variation, composite_foreground, iter_augment,
                       to_uint8)
from .matcher import Calibration, HashDatabase, MatchConfig, calibrate_threshold, db_build, flag_rate_curve, nearest
from .poison import select
from .scenes import CorpusSpec, ViewJitter, corpus_image, iter_corpus, load_corpus, person_image, rng_for, synth_scene

COLUMNS = ("scenario", "hash_kind", "threshold", "budget", "strategy", "ref_condition", "user_condition",
           "variation_level", "occlusion_fraction", "seed", "stat", "surveillance_rate", "fpr",
           "csis_detection_rate")
RATE_COLUMNS = ("surveillance_rate", "fpr", "csis_detection_rate")


class EmptyUserSet(ValueError):
    pass


# ----------------------------------------------------------------------------
# scenario assets


@dataclass(frozen=True)
class ScenarioConfig:
    n_illicit: int = 2000
    n_benign: int = 2000
    n_reference: int = 200
    n_augmented: int = 5000
    n_user: int = 500
    n_varied: int = 200          # stand-ins re-hashed under each variation level
    target_fpr: float = 0.01
    corpus_seed: int = 0
    augmentation_seed: int = 0
    hash_kind: str = "pdq"
    surrogate_bits: int = 64

    @property
    def hash_spec(self) -> HashFunctionSpec:
        if HashKind(self.hash_kind if self.hash_kind != "surrogate" else "surrogate-projection") is HashKind.PDQ:
            return HashFunctionSpec.pdq()
        return HashFunctionSpec.surrogate(self.surrogate_bits, self.corpus_seed)

    def scaled(self, factor: float) -> "ScenarioConfig":
        from dataclasses import replace
        grow = lambda n: max(1, round(n * factor))  # noqa: E731
        return replace(self, n_illicit=grow(self.n_illicit), n_benign=grow(self.n_benign),
                       n_reference=grow(self.n_reference), n_augmented=grow(self.n_augmented),
                       n_user=grow(self.n_user), n_varied=grow(self.n_varied))


@dataclass
class Corpora:
    db: HashDatabase
    benign: np.ndarray
    standins: list = field(repr=False)
    calibration: Calibration = None

    @property
    def threshold(self) -> float:
        return self.calibration.threshold


@dataclass
class SceneHashes:
    name: str
    condition: str
    augmented: np.ndarray
    user: np.ndarray
    user_images: np.ndarray = field(repr=False)  # uint8 stack


def build_corpora(cfg: ScenarioConfig, illicit_dir=None, benign_dir=None) -> Corpora:
    """Hash both corpora and calibrate; directories replace the synthetic sets when given."""
    spec = cfg.hash_spec
    illicit = CorpusSpec("illicit-standin", cfg.n_illicit, cfg.corpus_seed)
    benign_spec = CorpusSpec("benign", cfg.n_benign, cfg.corpus_seed)
    n_varied = min(cfg.n_varied, cfg.n_illicit)
    if illicit_dir is None:
        db = db_build(hash_many(iter_corpus(illicit), spec), hash_spec=spec)
        standins = [corpus_image(illicit, i) for i in range(n_varied)]
    else:
        images = load_corpus(illicit_dir, illicit)
        db = db_build(hash_many(images, spec), hash_spec=spec)
        standins = images[:n_varied]
    benign_images = iter_corpus(benign_spec) if benign_dir is None else load_corpus(benign_dir, benign_spec)
    benign = hash_many(benign_images, spec)
    return Corpora(db, benign, standins, calibrate_threshold(benign, db, cfg.target_fpr))


def build_scene(cfg: ScenarioConfig, scene_seed: int, condition: str = "base",
                jitter: ViewJitter = ViewJitter()) -> SceneHashes:
    spec = cfg.hash_spec
    ds = synth_scene(scene_seed, condition, cfg.n_reference, cfg.n_user, jitter)
    aug = AugmentationConfig(target_count=max(cfg.n_augmented, cfg.n_reference),
                             seed=cfg.augmentation_seed * 1_000_003 + scene_seed)
    augmented = hash_many(iter_augment(ds.reference, aug), spec)
    user = hash_many(ds.user, spec)
    return SceneHashes(f"scene-{scene_seed}", ds.condition, augmented, user, np.stack([to_uint8(u) for u in ds.user]))


# ----------------------------------------------------------------------------
# metrics


def surveillance_rate(user_hashes, db: HashDatabase, cfg: MatchConfig) -> float:
    user_hashes = np.asarray(user_hashes)
    if len(user_hashes) == 0:
        raise EmptyUserSet("no user images to evaluate")
    best, _ = nearest(user_hashes, db)
    return float(np.count_nonzero(best <= cfg.max_hamming(db.n_bits))) / len(best)


def rate_curve(hashes, db: HashDatabase) -> np.ndarray:
    """Flag rate at every hamming threshold 0..n (one pass over the database)."""
    best, _ = nearest(hashes, db)
    return flag_rate_curve(best, db.n_bits)


def varied_hashes(standins, level: VariationLevel, seed: int, spec: HashFunctionSpec) -> np.ndarray:
    rng = rng_for("variation", level.level, seed)
    return hash_many([apply_variation(img, level, rng) for img in standins], spec)


def csis_detection_rate(standins, db: HashDatabase, level: VariationLevel, cfg: MatchConfig, seed: int = 0) -> float:
    """Fraction of varied stand-ins still flagged; the unvaried hashes must be in db."""
    return surveillance_rate(varied_hashes(standins, level, seed, db.hash_spec), db, cfg)


# ----------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, **values) -> None:
        unknown = set(values) - set(COLUMNS)
        if unknown:
            raise KeyError(f"unknown report columns {sorted(unknown)}")
        for col in RATE_COLUMNS:
            v = values.get(col)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{col}={v} outside [0, 1]")
        self.rows.append({c: values.get(c) for c in COLUMNS})

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self

    def select(self, **where) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in where.items())]

    def add_summary(self, group_by: tuple[str, ...]) -> None:
        """Append mean and sample-std rows over seeds for each group."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            if r["stat"] == "value":
                groups.setdefault(tuple(r[c] for c in group_by), []).append(r)
        for key, rows in groups.items():
            base = dict(zip(group_by, key))
            for c in COLUMNS:
                if c not in group_by and c not in RATE_COLUMNS and c not in ("seed", "stat"):
                    vals = {r[c] for r in rows}
                    base[c] = vals.pop() if len(vals) == 1 else None
            for stat in ("mean", "std"):
                row = dict(base, stat=stat, seed=None)
                for col in RATE_COLUMNS:
                    vals = [r[col] for r in rows if r[col] is not None]
                    if vals:
                        row[col] = float(np.mean(vals)) if stat == "mean" else (
                            float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
                self.add(**row)

    @staticmethod
    def _fmt(v) -> str:
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([self._fmt(r[c]) for c in COLUMNS])

    def to_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps({"columns": list(COLUMNS), "rows": self.rows}, indent=1) + "\n")

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        rep = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rep.rows.append({c: _parse(c, r[c]) for c in COLUMNS})
        return rep


def _parse(col: str, text: str):
    if text == "":
        return None
    if col in RATE_COLUMNS or col in ("threshold", "occlusion_fraction"):
        return float(text)
    if col in ("budget", "seed"):
        return int(text)
    return text


# ----------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSpec:
    thresholds: tuple = ()        # empty: every grid value up to 0.5
    budgets: tuple = (0.01, 0.05, 0.10, 0.20)   # fractions of |C|
    strategies: tuple = ("kmodes", "random")
    seeds: tuple = (0, 1, 2)
    levels: tuple = ("low", "medium", "high")
    restarts: int = 5

    def __post_init__(self):
        for name in ("budgets", "strategies", "seeds", "levels"):
            if not getattr(self, name):
                raise ValueError(f"SweepSpec.{name} must not be empty")
        if list(self.thresholds) != sorted(self.thresholds) or list(self.budgets) != sorted(self.budgets):
            raise ValueError("thresholds and budgets must be sorted")

    def grid(self, n_bits: int) -> np.ndarray:
        if self.thresholds:
            return np.asarray(self.thresholds, dtype=np.float64)
        return np.arange(n_bits // 2 + 1) / n_bits


def budget_count(fraction: float, db_size: int) -> int:
    return max(1, round(fraction * db_size))


def poisoned_db(corpora: Corpora, scene: SceneHashes, strategy: str, k: int, seed: int, restarts: int = 5):
    poisons = select(scene.augmented, strategy, min(k, len(scene.augmented)), seed, restarts)
    return corpora.db.with_poisons(poisons.bits), poisons


def _hamming_index(t: float, n_bits: int) -> int:
    return MatchConfig(threshold=float(t)).max_hamming(n_bits)


def tradeoff_sweep(spec: SweepSpec, corpora: Corpora, scene: SceneHashes, budget: float = 0.05,
                   strategy: str = "kmodes", scenario: str | None = None) -> EvalReport:
    """Surveillance, FPR and per-level detection at every threshold."""
    rep = EvalReport()
    k = budget_count(budget, len(corpora.db))
    n = corpora.db.n_bits
    grid = spec.grid(n)
    detection = {}
    for seed in spec.seeds:
        db, _ = poisoned_db(corpora, scene, strategy, k, seed, spec.restarts)
        surv, fp = rate_curve(scene.user, db), rate_curve(corpora.benign, db)
        for level in spec.levels:
            varied = varied_hashes(corpora.standins, VariationLevel.named(level), seed, db.hash_spec)
            detection[level] = rate_curve(varied, db)
        for t in grid:
            h = _hamming_index(t, n)
            for level in spec.levels:
                rep.add(scenario=scenario or scene.name, hash_kind=db.hash_spec.kind.value, threshold=float(t),
                        budget=k, strategy=strategy, ref_condition=scene.condition, user_condition=scene.condition,
                        variation_level=level, seed=seed, stat="value", surveillance_rate=float(surv[h]),
                        fpr=float(fp[h]), csis_detection_rate=float(detection[level][h]))
    rep.add_summary(("scenario", "threshold", "variation_level"))
    return rep


def budget_sweep(spec: SweepSpec, corpora: Corpora, scene: SceneHashes, threshold: float | None = None,
                 scenario: str | None = None) -> EvalReport:
    """Surveillance and FPR per (budget, strategy, seed) at a fixed threshold."""
    rep = EvalReport()
    t = corpora.threshold if threshold is None else threshold
    cfg = MatchConfig(threshold=t)
    for frac in spec.budgets:
        k = budget_count(frac, len(corpora.db))
        for strategy in spec.strategies:
            for seed in spec.seeds:
                db, _ = poisoned_db(corpora, scene, strategy, k, seed, spec.restarts)
                rep.add(scenario=scenario or scene.name, hash_kind=db.hash_spec.kind.value, threshold=t, budget=k,
                        strategy=strategy, ref_condition=scene.condition, user_condition=scene.condition,
                        seed=seed, stat="value", surveillance_rate=surveillance_rate(scene.user, db, cfg),
                        fpr=surveillance_rate(corpora.benign, db, cfg))
    rep.add_summary(("scenario", "budget", "strategy"))
    return rep


def cross_condition_matrix(corpora: Corpora, scenes: dict, spec: SweepSpec, budget: float = 0.05,
                           strategy: str = "kmodes", threshold: float | None = None,
                           scenario: str = "cross") -> EvalReport:
    """Poisons chosen under one condition, evaluated on users under another."""
    if len(scenes) < 2:
        raise ValueError("cross-condition evaluation needs at least two conditions")
    rep = EvalReport()
    t = corpora.threshold if threshold is None else threshold
    cfg = MatchConfig(threshold=t)
    k = budget_count(budget, len(corpora.db))
    for seed in spec.seeds:
        for ref_name, ref in scenes.items():
            db, _ = poisoned_db(corpora, ref, strategy, k, seed, spec.restarts)
            for user_name, user in scenes.items():
                rep.add(scenario=scenario, hash_kind=db.hash_spec.kind.value, threshold=t, budget=k,
                        strategy=strategy, ref_condition=ref_name, user_condition=user_name, seed=seed,
                        stat="value", surveillance_rate=surveillance_rate(user.user, db, cfg))
    rep.add_summary(("scenario", "ref_condition", "user_condition"))
    return rep


def diagonal_summary(rep: EvalReport) -> tuple[float, float]:
    """Mean surveillance on and off the diagonal of a cross-condition report."""
    rows = rep.select(stat="mean")
    diag = [r["surveillance_rate"] for r in rows if r["ref_condition"] == r["user_condition"]]
    off = [r["surveillance_rate"] for r in rows if r["ref_condition"] != r["user_condition"]]
    return float(np.mean(diag)), float(np.mean(off))


def occluded_user_hashes(scene: SceneHashes, fraction: float, spec: HashFunctionSpec, occluder_seed: int = 0):
    frames = []
    for i, img in enumerate(scene.user_images):
        frame = img.astype(np.float64) / 255.0
        if fraction > 0:
            frame = composite_foreground(frame, person_image(occluder_seed, i, frame.shape[0]), fraction)
        frames.append(frame)
    return hash_many(frames, spec)


def occlusion_curve(corpora: Corpora, scene: SceneHashes, fractions, spec: SweepSpec, budget: float = 0.05,
                    strategy: str = "kmodes", threshold: float | None = None, occluder_seed: int = 0,
                    scenario: str | None = None) -> EvalReport:
    """Surveillance versus the share of the frame covered by a person.

    Poisons come from the unoccluded scene; each user frame gets its own figure.
    """
    rep = EvalReport()
    t = corpora.threshold if threshold is None else threshold
    cfg = MatchConfig(threshold=t)
    k = budget_count(budget, len(corpora.db))
    occluded = {f: occluded_user_hashes(scene, f, corpora.db.hash_spec, occluder_seed) for f in fractions}
    for seed in spec.seeds:
        db, _ = poisoned_db(corpora, scene, strategy, k, seed, spec.restarts)
        for f in fractions:
            rep.add(scenario=scenario or scene.name, hash_kind=db.hash_spec.kind.value, threshold=t, budget=k,
                    strategy=strategy, ref_condition=scene.condition, user_condition=scene.condition,
                    occlusion_fraction=float(f), seed=seed, stat="value",
                    surveillance_rate=surveillance_rate(occluded[f], db, cfg),
                    fpr=surveillance_rate(corpora.benign, db, cfg))
    rep.add_summary(("scenario", "occlusion_fraction"))
    return rep


def low_threshold(rep: EvalReport, fpr_target: float, factor: float = 2.0) -> float | None:
    """Largest threshold whose mean surveillance is below factor * fpr_target."""
    means = sorted({r["threshold"]: r["surveillance_rate"] for r in rep.select(stat="mean")}.items())
    below = [t for t, s in means if s < factor * fpr_target]
    return max(below) if below else None


def relative_improvement(rep: EvalReport, budget: int) -> float:
    """Mean k-modes surveillance over mean random surveillance, minus one."""
    km = [r["surveillance_rate"] for r in rep.select(stat="mean", budget=budget, strategy="kmodes")]
    rnd = [r["surveillance_rate"] for r in rep.select(stat="mean", budget=budget, strategy="random")]
    if not km or not rnd or rnd[0] == 0:
        return math.nan
    return km[0] / rnd[0] - 1.0
