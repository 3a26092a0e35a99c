"""Command-line front end: individual tools plus the end-to-end `run` pipeline.

Configuration is a JSON object whose keys are RunConfig fields. Values are
resolved as flags > CSISLAB_<FIELD> environment variables > config file >
defaults. Logs go to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attack import MODES, AttackConfig, craft_batch, write_results
from .evaluate import (EvalReport, ScenarioConfig, SweepSpec, budget_count, budget_sweep, build_corpora, build_scene,
                       cross_condition_matrix, occlusion_curve, surveillance_rate, tradeoff_sweep)
from .hashing import HashFunctionSpec, as_bit_matrix, bits_to_hex, hash_image, hash_many, hex_to_bits
from .imageops import AugmentationConfig, iter_augment, load_image, save_png
from .matcher import (MatchConfig, calibrate_threshold, db_build, load_db, merge, nearest, pairwise_curve, save_db,
                      stats)
from .poison import STRATEGIES, load_poisons, save_poisons, select
from .scenes import (Condition, CorpusSpec, list_images, load_corpus, render_scene, synth_scene, write_manifest)

log = logging.getLogger("csislab")
ENV_PREFIX = "CSISLAB_"
STAGES = ("profile", "corpora", "poison-select", "craft", "inject", "evaluate")
SWEEPS = ("pairwise-curve", "trade-off", "budget-table", "cross-matrix", "occlusion")


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ----------------------------------------------------------------------------
# logging


class JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"ts": round(record.created, 3), "level": record.levelname.lower(), "event": record.getMessage()}
        out.update(getattr(record, "fields", {}))
        return json.dumps(out, default=str)


def setup_logging(verbose: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLines())
    root = logging.getLogger("csislab")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def emit(event: str, **fields) -> None:
    log.info(event, extra={"fields": fields})


# ----------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    scenario: str = "desk"
    hash_kind: str = "pdq"
    surrogate_bits: int = 64
    target_fpr: float = 0.01
    threshold: float | None = None       # None: calibrate at target_fpr
    n_illicit: int = 2000
    n_benign: int = 2000
    n_reference: int = 200
    n_augmented: int = 5000
    n_user: int = 500
    n_varied: int = 200
    scenes: list = field(default_factory=lambda: [0, 1, 2])
    conditions: list = field(default_factory=lambda: ["base", "lighting-1", "layout-1"])
    budget: float = 0.05
    budgets: list = field(default_factory=lambda: [0.01, 0.05, 0.10, 0.20])
    strategies: list = field(default_factory=lambda: ["kmodes", "random"])
    repeats: int = 3
    levels: list = field(default_factory=lambda: ["low", "medium", "high"])
    restarts: int = 5
    occlusion: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0])
    pairwise_pairs: int = 100_000
    attack_mode: str = "nes"
    linf_budget: float = 8 / 255
    nes_samples: int = 10_000
    craft_count: int = 4                 # poisons per scene turned into delivery images
    candidates_per_poison: int = 1
    pool_size: int = 64
    illicit_dir: str | None = None
    benign_dir: str | None = None
    pool_dir: str | None = None
    out: str = "runs"
    seed: int = 0
    scale: float = 1.0
    workers: int = 1

    PRESETS = {
        "desk": {},
        "paper": {"n_illicit": 100_000, "n_benign": 100_000, "n_augmented": 10_000, "n_user": 1000,
                  "n_reference": 500, "n_varied": 1000},
    }

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        """Content address of everything that affects outputs."""
        data = self.to_dict()
        for k in ("out", "workers"):
            data.pop(k)
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

    # derived pieces

    def scenario_config(self) -> ScenarioConfig:
        base = ScenarioConfig(self.n_illicit, self.n_benign, self.n_reference, self.n_augmented, self.n_user,
                              self.n_varied, self.target_fpr, substream(self.seed, "corpus"),
                              substream(self.seed, "augment"), self.hash_kind, self.surrogate_bits)
        return base.scaled(self.scale) if self.scale != 1.0 else base

    def sweep_spec(self) -> SweepSpec:
        return SweepSpec((), tuple(self.budgets), tuple(self.strategies),
                         tuple(substream(self.seed, "sweep", i) for i in range(self.repeats)),
                         tuple(self.levels), self.restarts)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(linf_budget=self.linf_budget, mode=self.attack_mode,
                            nes={"total_samples": self.nes_samples}, seed=substream(self.seed, "craft"))

    def validate(self) -> None:
        for name in ("illicit_dir", "benign_dir", "pool_dir"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_dir():
                raise ConfigError(f"{name}: no such directory {path!r}")
        if self.hash_kind not in ("pdq", "surrogate", "surrogate-projection"):
            raise ConfigError(f"hash_kind: unknown hash {self.hash_kind!r}")
        if self.attack_mode not in MODES:
            raise ConfigError(f"attack_mode: must be one of {MODES}")
        if self.attack_mode == "projected-gradient" and self.hash_kind == "pdq":
            raise ConfigError("attack_mode: projected-gradient needs the surrogate hash")
        if not 0 < self.target_fpr < 1:
            raise ConfigError("target_fpr: must lie in (0, 1)")
        if self.threshold is not None and not 0 <= self.threshold <= 1:
            raise ConfigError("threshold: must lie in [0, 1]")
        if self.scale <= 0:
            raise ConfigError("scale: must be positive")
        if self.repeats < 1 or self.workers < 1 or self.restarts < 1:
            raise ConfigError("repeats, workers and restarts must be at least 1")
        for name in ("scenes", "conditions", "budgets", "strategies", "levels", "occlusion"):
            if not getattr(self, name):
                raise ConfigError(f"{name}: must not be empty")
        if any(not 0 < b <= 1 for b in self.budgets + [self.budget]):
            raise ConfigError("budgets: fractions must lie in (0, 1]")
        if sorted(self.budgets) != list(self.budgets):
            raise ConfigError("budgets: must be sorted")
        if any(not 0 <= f <= 1 for f in self.occlusion):
            raise ConfigError("occlusion: fractions must lie in [0, 1]")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"strategies: unknown strategy {s!r}")
        for c in self.conditions:
            try:
                Condition.parse(c)
            except ValueError as exc:
                raise ConfigError(f"conditions: {exc}") from None
        sc = self.scenario_config()
        craft = min(self.craft_count, budget_count(self.budget, sc.n_illicit))
        if craft and craft * self.candidates_per_poison > self.pool_count:
            raise ConfigError(f"pool_dir: delivery pool needs {craft * self.candidates_per_poison} images")

    @property
    def pool_count(self) -> int:
        if self.pool_dir is None:
            return max(self.craft_count * self.candidates_per_poison, 1) * 4
        return len(list_images(self.pool_dir))


def substream(root: int, *names) -> int:
    """Deterministic 31-bit seed for a named stage below the root seed."""
    text = ":".join(str(p) for p in (root,) + names)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "big") >> 1


def _field_types() -> dict:
    return {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    """Parse a string override into the field's type."""
    default = _field_types()[name].default
    factory = _field_types()[name].default_factory
    if factory is not dataclasses.MISSING:
        kind = type(factory()[0])
        items = [x for x in raw.replace(",", " ").split()]
        return [kind(x) for x in items]
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or name == "threshold":
        return float(raw)
    return raw


def resolve_config(config_path=None, preset: str | None = None, overrides: dict | None = None,
                   environ=None) -> RunConfig:
    data = RunConfig().to_dict()
    if preset:
        if preset not in RunConfig.PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}")
        data.update(RunConfig.PRESETS[preset])
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config: no such file {str(path)!r}")
        file_data = json.loads(path.read_text())
        RunConfig.from_dict(dict(data, **file_data))  # reject unknown keys early
        data.update(file_data)
    env = os.environ if environ is None else environ
    for name in _field_types():
        key = ENV_PREFIX + name.upper()
        if key in env:
            data[name] = _coerce(name, env[key])
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(data)


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=sorted(RunConfig.PRESETS))
    for name, f in _field_types().items():
        flag = "--" + name.replace("_", "-")
        if f.default_factory is not dataclasses.MISSING:
            kind = type(f.default_factory()[0])
            p.add_argument(flag, dest=name, nargs="+", type=kind, default=None)
        elif name == "threshold":
            p.add_argument(flag, dest=name, type=float, default=None)
        elif isinstance(f.default, (int, float)) and not isinstance(f.default, bool):
            p.add_argument(flag, dest=name, type=type(f.default), default=None)
        else:
            p.add_argument(flag, dest=name, default=None)


def config_from_args(args) -> RunConfig:
    overrides = {name: getattr(args, name, None) for name in _field_types()}
    cfg = resolve_config(args.config, args.preset, overrides)
    cfg.validate()
    return cfg


# ----------------------------------------------------------------------------
# hash files


def write_hashes(path, bits, names=None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i, row in enumerate(as_bit_matrix(bits)):
            fh.write(bits_to_hex(row) + (f"\t{names[i]}" if names else "") + "\n")


def read_hashes(path) -> np.ndarray:
    with open(path) as fh:
        rows = [hex_to_bits(line.split()[0]) for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"{path}: no hashes")
    return np.stack(rows)


def _hash_spec(kind: str, bits: int, seed: int) -> HashFunctionSpec:
    return HashFunctionSpec.pdq() if kind == "pdq" else HashFunctionSpec.surrogate(bits, seed)


def _load_hashes_or_images(path, spec: HashFunctionSpec) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        return hash_many((load_image(f) for f in list_images(p)), spec)
    return read_hashes(p)


# ----------------------------------------------------------------------------
# pipeline


@dataclass
class RunState:
    cfg: RunConfig
    root: Path
    corpora: object = None
    scenes: dict = field(default_factory=dict)       # scene seed -> SceneHashes (base condition)
    conditions: dict = field(default_factory=dict)   # condition label -> SceneHashes of the first scene
    poisons: dict = field(default_factory=dict)
    injected: dict = field(default_factory=dict)


def plan(cfg: RunConfig) -> dict:
    root = Path(cfg.out) / cfg.digest()
    return {"digest": cfg.digest(), "root": str(root), "stages": list(STAGES),
            "artifacts": {s: str(root / s) for s in STAGES}, "config": cfg.to_dict()}


def _stage_profile(st: RunState) -> None:
    cfg, sc = st.cfg, st.cfg.scenario_config()
    out = st.root / "profile"
    jobs = [(s, "base") for s in cfg.scenes] + [(cfg.scenes[0], c) for c in cfg.conditions if c != "base"]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        built = list(pool.map(lambda job: build_scene(sc, *job), jobs))
    for (seed, cond), scene in zip(jobs, built):
        tag = f"scene-{seed}-{scene.condition}"
        save_png(out / f"{tag}-panorama.png", render_scene(seed, cond))
        write_hashes(out / f"{tag}-augmented.txt", scene.augmented)
        write_hashes(out / f"{tag}-user.txt", scene.user)
        if cond == "base":
            st.scenes[seed] = scene
        if seed == cfg.scenes[0]:
            st.conditions[scene.condition] = scene
    emit("profile done", scenes=len(jobs))


def _stage_corpora(st: RunState) -> None:
    cfg = st.cfg
    st.corpora = build_corpora(cfg.scenario_config(), cfg.illicit_dir, cfg.benign_dir)
    out = st.root / "corpora"
    out.mkdir(parents=True, exist_ok=True)
    save_db(out / "db.bin", st.corpora.db)
    write_hashes(out / "benign.txt", st.corpora.benign)
    cal = st.corpora.calibration
    (out / "calibration.json").write_text(json.dumps(
        {"threshold": cal.threshold, "hamming": cal.hamming, "target_fpr": cal.target_fpr,
         "achieved_fpr": cal.achieved_fpr}, sort_keys=True) + "\n")
    emit("corpora done", db_size=len(st.corpora.db), threshold=cal.threshold, achieved_fpr=cal.achieved_fpr)


def _stage_poison(st: RunState) -> None:
    cfg = st.cfg
    k = budget_count(cfg.budget, len(st.corpora.db))
    for seed, scene in st.scenes.items():
        ps = select(scene.augmented, "kmodes", k, substream(cfg.seed, "poison", seed), cfg.restarts)
        save_poisons(st.root / "poison-select" / f"scene-{seed}.jsonl", ps)
        st.poisons[seed] = ps
        emit("poisons selected", scene=seed, k=k, objective=ps.objective)


def _stage_craft(st: RunState) -> None:
    cfg = st.cfg
    spec = st.corpora.db.hash_spec
    acfg = st.cfg.attack_config()
    for seed, ps in st.poisons.items():
        n = min(cfg.craft_count, len(ps))
        pool_spec = CorpusSpec("delivery-pool", n * cfg.candidates_per_poison * 4, substream(cfg.seed, "pool", seed),
                               cfg.pool_size)
        sources = load_corpus(cfg.pool_dir, pool_spec)
        done = craft_batch(sources, ps.bits[:n], spec, acfg, cfg.candidates_per_poison) if n else []
        write_results(st.root / "craft" / f"scene-{seed}", done)
        st.injected[seed] = np.stack([hash_image(a.result.image, spec).bits for a in done]) if done else None
        emit("crafted", scene=seed, count=n, distances=[a.result.final_distance for a in done])


def _stage_inject(st: RunState) -> None:
    for seed, bits in st.injected.items():
        db = st.corpora.db if bits is None else st.corpora.db.with_poisons(bits)
        save_db(st.root / "inject" / f"scene-{seed}.bin", db)
        st.injected[seed] = db
    emit("injected", scenes=len(st.injected))


def _stage_evaluate(st: RunState) -> None:
    cfg, c = st.cfg, st.corpora
    spec = cfg.sweep_spec()
    out = st.root / "evaluate"
    mc = MatchConfig(threshold=c.threshold if cfg.threshold is None else cfg.threshold)
    reports = {name: EvalReport() for name in SWEEPS}
    reports["pairwise-curve"] = pairwise_report(c.benign, cfg)
    for seed, scene in st.scenes.items():
        reports["budget-table"].extend(budget_sweep(spec, c, scene, cfg.threshold))
        reports["trade-off"].extend(tradeoff_sweep(spec, c, scene, cfg.budget))
        reports["occlusion"].extend(occlusion_curve(c, scene, cfg.occlusion, spec, cfg.budget,
                                                    threshold=cfg.threshold, occluder_seed=substream(cfg.seed,
                                                                                                     "occluder")))
    if len(st.conditions) >= 2:
        reports["cross-matrix"] = cross_condition_matrix(c, st.conditions, spec, cfg.budget, threshold=cfg.threshold)
    summary = EvalReport()
    for seed, scene in st.scenes.items():
        ideal = c.db.with_poisons(st.poisons[seed].bits)
        for label, db in (("ideal", ideal), ("crafted", st.injected[seed])):
            summary.add(scenario=f"{scene.name}-{label}", hash_kind=c.db.hash_spec.kind.value,
                        threshold=mc.threshold, budget=db.poison_count, strategy="kmodes",
                        ref_condition=scene.condition, user_condition=scene.condition, seed=cfg.seed, stat="value",
                        surveillance_rate=surveillance_rate(scene.user, db, mc),
                        fpr=surveillance_rate(c.benign, db, mc))
    reports["eval"] = summary
    for name, rep in reports.items():
        rep.to_csv(out / f"{name}.csv")
        rep.to_json(out / f"{name}.json")
    emit("evaluate done", reports=sorted(reports))


def pairwise_report(benign, cfg: RunConfig) -> EvalReport:
    """Share of benign pairs within each threshold, stored in the fpr column."""
    curve = pairwise_curve(benign, "random", cfg.pairwise_pairs, substream(cfg.seed, "pairwise"))
    rep = EvalReport()
    for t, rate in zip(curve.thresholds, curve.rate):
        rep.add(scenario="pairwise-benign", hash_kind=cfg.hash_kind, threshold=float(t), seed=cfg.seed,
                stat="value", fpr=float(rate))
    return rep


STAGE_FUNCS = dict(zip(STAGES, (_stage_profile, _stage_corpora, _stage_poison, _stage_craft, _stage_inject,
                                _stage_evaluate)))


def run_pipeline(cfg: RunConfig, dry_run: bool = False) -> dict:
    """Run every stage in order; returns the plan. Raises StageFailure."""
    cfg.validate()
    info = plan(cfg)
    if dry_run:
        return info
    root = Path(info["root"])
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(cfg.to_json())
    st = RunState(cfg, root)
    for name in STAGES:
        t0 = time.perf_counter()
        emit("stage start", stage=name)
        try:
            STAGE_FUNCS[name](st)
        except Exception as exc:
            record = {"stage": name, "error": type(exc).__name__, "message": str(exc),
                      "traceback": traceback.format_exc()}
            (root / "error.json").write_text(json.dumps(record, indent=1) + "\n")
            raise StageFailure(name, exc) from exc
        emit("stage done", stage=name, seconds=round(time.perf_counter() - t0, 2))
    return info


# ----------------------------------------------------------------------------
# subcommands


def cmd_hash(args) -> int:
    spec = _hash_spec(args.kind, args.bits, args.hash_seed)
    paths = []
    for p in map(Path, args.images):
        paths.extend(list_images(p) if p.is_dir() else [p])
    for p in paths:
        h = hash_image(load_image(p), spec)
        print(f"{h.hex()}\t{h.quality if h.quality is not None else '-'}\t{p}")
    return 0


def cmd_db(args) -> int:
    if args.db_cmd == "build":
        spec = _hash_spec(args.kind, args.bits, args.hash_seed)
        bits = _load_hashes_or_images(args.source, spec)
        db = db_build(bits, hash_spec=spec)
        save_db(args.output, db)
        emit("db built", entries=len(db), duplicates=db.duplicates, path=args.output)
    elif args.db_cmd == "stats":
        print(json.dumps(stats(load_db(args.db)), default=str, sort_keys=True))
    else:
        db = merge([load_db(p) for p in args.dbs])
        save_db(args.output, db)
        emit("db merged", entries=len(db), path=args.output)
    return 0


def cmd_augment(args) -> int:
    refs = [load_image(p) for p in list_images(args.input)]
    cfg = AugmentationConfig(target_count=args.count, seed=args.seed)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(iter_augment(refs, cfg)):
        save_png(out / f"aug_{i:06d}.png", img)
    emit("augmented", count=args.count, path=str(out))
    return 0


def cmd_poison(args) -> int:
    spec = _hash_spec(args.kind, args.bits, args.hash_seed)
    scene = _load_hashes_or_images(args.scene, spec)
    ps = select(scene, args.strategy, args.k, args.seed, args.restarts)
    save_poisons(args.output, ps)
    emit("poisons selected", k=len(ps), objective=ps.objective, strategy=ps.strategy)
    return 0


def cmd_craft(args) -> int:
    spec = _hash_spec(args.kind, args.bits, args.hash_seed)
    poisons = load_poisons(args.poisons)
    if args.pool:
        paths = list_images(args.pool)
        sources, names = [load_image(p) for p in paths], [p.name for p in paths]
    else:
        n = len(poisons) * (args.candidates or 1) * 4
        sources, names = load_corpus(None, CorpusSpec("delivery-pool", n, args.seed, args.size)), None
    cfg = AttackConfig(linf_budget=args.budget, mode=args.mode, seed=args.seed)
    done = craft_batch(sources, poisons, spec, cfg, args.candidates)
    path = write_results(args.output, done, names)
    emit("crafted", count=len(done), log=str(path))
    return 0


def cmd_inject(args) -> int:
    db = load_db(args.db)
    if args.deliveries:
        images = [load_image(p) for p in list_images(args.deliveries)]
        bits = hash_many(images, db.hash_spec)
    else:
        bits = load_poisons(args.poisons).bits
    out = db.with_poisons(bits)
    save_db(args.output, out)
    emit("injected", added=out.poison_count - db.poison_count, entries=len(out))
    return 0


def cmd_eval(args) -> int:
    db = load_db(args.db)
    users = _load_hashes_or_images(args.users, db.hash_spec)
    threshold = args.threshold
    result = {}
    if args.benign:
        benign = _load_hashes_or_images(args.benign, db.hash_spec)
        if threshold is None:
            threshold = calibrate_threshold(benign, db.legitimate(), args.target_fpr).threshold
        result["fpr"] = surveillance_rate(benign, db, MatchConfig(threshold=threshold))
    if threshold is None:
        raise ConfigError("threshold: give --threshold or --benign for calibration")
    cfg = MatchConfig(threshold=threshold)
    best, _ = nearest(users, db)
    result.update(threshold=threshold, surveillance_rate=surveillance_rate(users, db, cfg), users=len(best))
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = config_from_args(args)
    sc, spec = cfg.scenario_config(), cfg.sweep_spec()
    corpora = build_corpora(sc, cfg.illicit_dir, cfg.benign_dir)
    out = Path(cfg.out) / cfg.digest() / "sweep"
    if args.kind == "pairwise-curve":
        rep = pairwise_report(corpora.benign, cfg)
    elif args.kind == "cross-matrix":
        scenes = {c: build_scene(sc, cfg.scenes[0], c) for c in cfg.conditions}
        rep = cross_condition_matrix(corpora, {s.condition: s for s in scenes.values()}, spec, cfg.budget,
                                     threshold=cfg.threshold)
    else:
        rep = EvalReport()
        for seed in cfg.scenes:
            scene = build_scene(sc, seed)
            if args.kind == "trade-off":
                rep.extend(tradeoff_sweep(spec, corpora, scene, cfg.budget))
            elif args.kind == "budget-table":
                rep.extend(budget_sweep(spec, corpora, scene, cfg.threshold))
            else:
                rep.extend(occlusion_curve(corpora, scene, cfg.occlusion, spec, cfg.budget, threshold=cfg.threshold,
                                           occluder_seed=substream(cfg.seed, "occluder")))
    rep.to_csv(out / f"{args.kind}.csv")
    rep.to_json(out / f"{args.kind}.json")
    emit("sweep written", kind=args.kind, rows=len(rep.rows), path=str(out / f"{args.kind}.csv"))
    print(out / f"{args.kind}.csv")
    return 0


def cmd_scene(args) -> int:
    ds = synth_scene(args.seed, args.condition, args.n_reference, args.n_user)
    out = Path(args.output)
    records = []
    for split, images in (("reference", ds.reference), ("user", ds.user)):
        for i, img in enumerate(images):
            name = f"{split}/{split}_{i:05d}.png"
            save_png(out / name, img)
            records.append({"path": name, "role": "scene", "condition": ds.condition, "split": split})
    write_manifest(out / "manifest.jsonl", records)
    emit("scene written", reference=len(ds.reference), user=len(ds.user), path=str(out))
    return 0


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    info = run_pipeline(cfg, dry_run=args.dry_run)
    if args.dry_run:
        print(json.dumps({k: info[k] for k in ("digest", "root", "stages", "artifacts")}, indent=1))
    else:
        print(Path(info["root"]) / "evaluate")
    return 0


def _hash_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=("pdq", "surrogate"), default="pdq")
    p.add_argument("--bits", type=int, default=64, help="surrogate output length")
    p.add_argument("--hash-seed", type=int, default=0, help="surrogate projection seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csislab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hash", help="print hashes of images or directories")
    p.add_argument("images", nargs="+")
    _hash_flags(p)
    p.set_defaults(func=cmd_hash)

    p = sub.add_parser("db", help="build, inspect or merge hash databases")
    dbs = p.add_subparsers(dest="db_cmd", required=True)
    q = dbs.add_parser("build")
    q.add_argument("source", help="image directory or hash file (one hex per line)")
    q.add_argument("-o", "--output", required=True)
    _hash_flags(q)
    q = dbs.add_parser("stats")
    q.add_argument("db")
    q = dbs.add_parser("merge")
    q.add_argument("dbs", nargs="+")
    q.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_db)

    p = sub.add_parser("augment", help="write augmented copies of reference images")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("poison", help="choose poison hashes for a scene")
    ps = p.add_subparsers(dest="poison_cmd", required=True)
    q = ps.add_parser("select")
    q.add_argument("scene", help="scene image directory or hash file")
    q.add_argument("-k", type=int, required=True)
    q.add_argument("--strategy", choices=STRATEGIES, default="kmodes")
    q.add_argument("--restarts", type=int, default=5)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("-o", "--output", required=True)
    _hash_flags(q)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("craft", help="turn pool images into hash collisions with poisons")
    p.add_argument("poisons")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--pool", help="image directory; synthetic pool when omitted")
    p.add_argument("--size", type=int, default=64, help="synthetic pool image size")
    p.add_argument("--mode", choices=MODES, default="nes")
    p.add_argument("--budget", type=float, default=8 / 255, help="L-infinity bound on [0, 1] pixels")
    p.add_argument("--candidates", type=int, default=None, help="pool images tried per poison")
    p.add_argument("--seed", type=int, default=0)
    _hash_flags(p)
    p.set_defaults(func=cmd_craft)

    p = sub.add_parser("inject", help="add poisons or delivered images to a database")
    p.add_argument("db")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--poisons")
    src.add_argument("--deliveries", help="directory of crafted images")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("eval", help="surveillance rate and FPR for one database")
    p.add_argument("--db", required=True)
    p.add_argument("--users", required=True, help="image directory or hash file")
    p.add_argument("--benign", help="image directory or hash file")
    p.add_argument("--threshold", type=float)
    p.add_argument("--target-fpr", type=float, default=0.01)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="write one report per figure or table")
    p.add_argument("kind", choices=SWEEPS)
    add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("scene", help="synthetic scene captures")
    ss = p.add_subparsers(dest="scene_cmd", required=True)
    q = ss.add_parser("synth")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--condition", default="base")
    q.add_argument("--n-reference", type=int, default=50)
    q.add_argument("--n-user", type=int, default=20)
    q.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("run", help="full pipeline from profiling to reports")
    add_config_flags(p)
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("invalid config", extra={"fields": {"detail": str(exc)}})
        return 2
    except StageFailure as exc:
        log.error("stage failed", extra={"fields": {"stage": exc.stage, "detail": str(exc.cause)}})
        return 3
    except (OSError, ValueError) as exc:
        log.error("command failed", extra={"fields": {"error": type(exc).__name__, "detail": str(exc)}})
        return 1


if __name__ == "__main__":
    sys.exit(main())
