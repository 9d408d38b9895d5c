"""Experiment orchestration: single pipelines, grids, unknown-configuration
matrices and report files.

Every random draw is keyed by the run seed plus a stage label, so a cell of
a grid or matrix reproduces a standalone run with the same settings to the
last bit, whatever the execution order or worker count.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .attacks import ATTACK_KINDS, AttackResult, attack_accuracy_loss, build_shadow_ensemble, membership_rows, run_attacks
from .data import Dataset, SplitSpec, SyntheticSpec, load_csv, split, synth_generate
from .defenses import DEFENSE_KINDS, DefenseConfig, defense_grid
from .metrics import SensitivityConfig, gap_report
from .nets import MlpSpec
from .pruning import PRUNE_METHODS, SPARSITY_GRID, prune_pipeline
from .rng import child_seed, substream
from .training import TrainConfig, train_original

logger = logging.getLogger(__name__)

SCHEMA = "prunemia-run-1"
MATRIX_SCHEMA = "prunemia-matrix-1"
DEFENSE_FILTER_RATIO = 0.75


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# --------------------------------------------------------------------------
# configuration


def _section(cls, raw: Mapping | None, name: str):
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(unknown)}")
    for key, value in raw.items():
        if isinstance(value, list):
            raw[key] = tuple(value)
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


@dataclass(frozen=True)
class DataSection:
    csv: str | None = None
    num_classes: int = 30
    num_features: int = 446
    samples_per_class: int = 150
    flip_probability: float = 0.15
    synthetic_seed: int = 0
    split_seed: int = 0
    target_fraction: float = 0.5
    train_fraction: float = 0.45
    val_fraction: float = 0.10
    test_fraction: float = 0.45

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.num_classes, self.num_features, self.samples_per_class, self.flip_probability)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.target_fraction, self.train_fraction, self.val_fraction,
                         self.test_fraction, self.split_seed)


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple[int, ...] = (256, 128)
    activation: str = "relu"
    lr: float = 1e-3
    batch_size: int = 128


@dataclass(frozen=True)
class PruneSection:
    method: str = "L1Unstructured"
    gamma: float = 0.7
    # grids for `pipeline` expansion and `matrix`
    methods: tuple[str, ...] | None = None
    gammas: tuple[float, ...] | None = None
    slimming_l1: float = 1e-4
    include_unpruned: bool = True

    def __post_init__(self):
        for m in (self.method,) + tuple(self.methods or ()):
            if m not in PRUNE_METHODS:
                raise ValueError(f"unknown pruning method {m!r}")
        for g in (self.gamma,) + tuple(self.gammas or ()):
            if not 0.0 <= g < 1.0:
                raise ValueError(f"sparsity {g} outside [0, 1)")
        if self.methods is not None and not self.methods:
            raise ValueError("methods grid is empty")
        if self.gammas is not None and not self.gammas:
            raise ValueError("gammas grid is empty")


@dataclass(frozen=True)
class DefenseSection:
    kind: str = "Basic"
    lam: float = 4.0
    sigma: float = 1.0
    clip_norm: float = 1.0
    dp_lr: float = 0.1
    alpha: float = 1.0
    weight_decay: float = 5e-4
    patience: int = 5
    max_epochs: int = 100
    # values of the kind's own parameter; `true` expands to the standard grid
    grid: tuple[float, ...] | bool | None = None

    def __post_init__(self):
        self.config()  # validate eagerly
        if self.grid is not None and self.grid is not True and not self.grid:
            raise ValueError("defense grid is empty")

    def config(self) -> DefenseConfig:
        fields = {f.name for f in dataclasses.fields(DefenseConfig)}
        return DefenseConfig(**{k: v for k, v in asdict(self).items() if k in fields})


@dataclass(frozen=True)
class AttackSection:
    kinds: tuple[str, ...] = ATTACK_KINDS
    shadows: int = 5
    sensitivity_n: int = 10
    sensitivity_epsilon: float = 1e-3
    adversary_method: str | None = None
    adversary_gamma: float | None = None
    adaptive: bool = False
    probe_budget: int = 200
    # attack whose accuracy fills the matrix
    matrix_attack: str = "SAMIA"
    adversary_methods: tuple[str, ...] | None = None
    adversary_gammas: tuple[float, ...] | None = None

    def __post_init__(self):
        for k in self.kinds + (self.matrix_attack,):
            if k not in ATTACK_KINDS:
                raise ValueError(f"unknown attack {k!r}")
        if self.shadows < 1 or self.probe_budget < 1:
            raise ValueError("shadows and probe_budget must be positive")
        if self.adversary_method is not None and self.adversary_method not in PRUNE_METHODS:
            raise ValueError(f"unknown adversary method {self.adversary_method!r}")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "results"
    parallel: int = 1
    repeats: int = 1
    # random (target, adversary) pairs for the matrix; None = full cross product
    pairs: int | None = None

    def __post_init__(self):
        if self.parallel < 1 or self.repeats < 1:
            raise ValueError("parallel and repeats must be >= 1")
        if self.pairs is not None and self.pairs < 1:
            raise ValueError("pairs must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    prune: PruneSection = PruneSection()
    defense: DefenseSection = DefenseSection()
    attack: AttackSection = AttackSection()
    run: RunSection = RunSection()

    @classmethod
    def from_dict(cls, raw: Mapping | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(sections))
        if unknown:
            raise ConfigError(f"unknown sections: {', '.join(unknown)}")
        types = {"data": DataSection, "model": ModelSection, "prune": PruneSection,
                 "defense": DefenseSection, "attack": AttackSection, "run": RunSection}
        return cls(**{name: _section(types[name], raw.get(name), name) for name in types})

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            return v
        return {name: {k: plain(v) for k, v in asdict(getattr(self, name)).items()}
                for name in ("data", "model", "prune", "defense", "attack", "run")}

    def replace(self, **sections: Mapping[str, Any]) -> "ExperimentConfig":
        """Copy with some fields of some sections changed, e.g. ``prune={"gamma": 0.5}``."""
        updated = {}
        for name, changes in sections.items():
            try:
                updated[name] = dataclasses.replace(getattr(self, name), **changes)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {exc}") from exc
        return dataclasses.replace(self, **updated)

    # derived settings

    @property
    def adversary_method(self) -> str:
        return self.attack.adversary_method or self.prune.method

    @property
    def adversary_gamma(self) -> float:
        g = self.attack.adversary_gamma
        return self.prune.gamma if g is None else g

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.model.lr, self.model.batch_size, None, self.prune.slimming_l1)

    def sensitivity(self) -> SensitivityConfig:
        return SensitivityConfig(self.attack.sensitivity_n, self.attack.sensitivity_epsilon,
                                 seed=self.run.seed)


# --------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    config: dict
    seed: int
    original: dict = field(default_factory=dict)
    pruned: dict = field(default_factory=dict)
    adversary: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    error: dict | None = None
    schema: str = SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunRecord":
        data = dict(data)
        if data.get("schema") != SCHEMA:
            raise ValueError(f"unsupported record schema {data.get('schema')!r}")
        return cls(**data)

    def attack_accuracy(self, attack: str, variant: str = "pruned") -> float:
        return getattr(self, variant)["attacks"][attack]["accuracy"]


@dataclass
class MatrixRecord:
    attack: str
    cells: list[dict]
    mean_loss: float | None
    seed: int
    config: dict
    schema: str = MATRIX_SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    def cell(self, target: tuple[str, float], adversary: tuple[str, float]) -> dict:
        for c in self.cells:
            if (c["target_method"], c["target_gamma"]) == tuple(target) and \
                    (c["adversary_method"], c["adversary_gamma"]) == tuple(adversary):
                return c
        raise KeyError((target, adversary))


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# pipeline

# Per-process memo of expensive intermediate artefacts, keyed by everything
# that determines them. Cached objects are never mutated after creation.
_CACHE: dict[tuple, Any] = {}


def clear_cache() -> None:
    _CACHE.clear()


def _memo(key: tuple, build):
    if key not in _CACHE:
        _CACHE[key] = build()
    return _CACHE[key]


def _key(*parts) -> tuple:
    return tuple(json.dumps(p, sort_keys=True, default=str) for p in parts)


def load_data(section: DataSection) -> Dataset:
    if section.csv:
        return load_csv(section.csv)
    return synth_generate(section.synthetic_spec(), section.synthetic_seed)


def _gaps(model, members: Dataset, non_members: Dataset, cfg: SensitivityConfig) -> dict:
    report = gap_report(model, members, non_members, cfg).to_dict()
    return report


def _results(results: Mapping[str, AttackResult]) -> dict:
    return {k: {"accuracy": r.accuracy, "auc": r.auc} for k, r in results.items()}


def run_pipeline(config: ExperimentConfig, raise_errors: bool = False) -> RunRecord:
    """Original -> prune + fine-tune -> shadows -> attacks -> gaps."""
    start = time.perf_counter()
    seed = config.run.seed
    record = RunRecord(config.to_dict(), seed)
    stage = "config"
    try:
        stage = "data"
        data_key = _key(asdict(config.data))
        parts = _memo(("split",) + data_key, lambda: split(load_data(config.data), config.data.split_spec()))
        target = parts.target
        k, d = target.train.num_classes, target.train.num_features
        train_cfg = config.train_config()
        sens = config.sensitivity()
        basic = DefenseConfig("Basic", weight_decay=config.defense.weight_decay,
                              patience=config.defense.patience, max_epochs=config.defense.max_epochs)
        defense = config.defense.config()

        def model_spec(method: str) -> MlpSpec:
            return MlpSpec(d, k, config.model.hidden, config.model.activation,
                           use_scales=method == "Slimming")

        stage = "original"
        common = _key(asdict(config.data), asdict(config.model), asdict(basic), seed,
                      config.prune.slimming_l1)
        spec_t = model_spec(config.prune.method)
        original = _memo(("original", spec_t.use_scales) + common, lambda: train_original(
            spec_t, target.train, target.val, train_cfg, seed, "target/original", basic)[0])

        stage = "prune"
        gamma = config.prune.gamma
        pruned = None
        if gamma > 0:
            pruned = _memo(
                ("pruned", config.prune.method, gamma) + common + _key(asdict(defense)),
                lambda: prune_pipeline(original, config.prune.method, gamma, target.train, target.val,
                                       train_cfg, defense, seed, "target/prune", reference=target.val),
            )
            if not pruned.check_invariant():
                raise RuntimeError("masked weights drifted away from zero")
            record.stages.extend(pruned.stages)

        stage = "shadows"
        adv_method, adv_gamma = config.adversary_method, config.adversary_gamma
        adv_defense = defense if config.attack.adaptive else basic
        spec_a = model_spec(adv_method)
        shadows = _memo(
            ("shadows", adv_method, adv_gamma, spec_a.use_scales, config.attack.shadows)
            + common + _key(asdict(adv_defense)),
            lambda: build_shadow_ensemble(parts.shadow_pool, spec_a, adv_method, adv_gamma, adv_defense,
                                          train_cfg, seed, config.attack.shadows,
                                          config.data.split_spec(), target_ids=np.concatenate(
                                              [target.train.ids, target.val.ids, target.test.ids])),
        )
        record.adversary = {"method": adv_method, "gamma": adv_gamma, "defense": adv_defense.label,
                            "adaptive": config.attack.adaptive, "shadows": len(shadows)}

        stage = "attacks"
        pool = parts.shadow_pool
        feature_range = (pool.features.min(axis=0), pool.features.max(axis=0))
        kinds = list(config.attack.kinds)

        def attack(variant: str, model, model_key: tuple) -> dict:
            def build():
                shadow_rows = shadows.attack_rows(variant, sens, seed)
                target_rows = membership_rows(model, target.train, target.test, sens).balanced(
                    substream(seed, "target", "balance"))
                return _results(run_attacks(kinds, shadow_rows, target_rows, model, feature_range, seed,
                                            "attacks", config.attack.probe_budget))
            # shadow originals never see the adversary's pruning or defense choice
            shadow_key = (spec_a.use_scales, config.attack.shadows)
            if variant == "pruned":
                shadow_key += (adv_method, adv_gamma) + _key(asdict(adv_defense))
            return _memo(("attacks", variant) + model_key + shadow_key + common +
                         _key(kinds, asdict(sens), config.attack.probe_budget), build)

        original_key = ("original", spec_t.use_scales)
        record.original = {
            "attacks": attack("original", original, original_key),
            **_gaps(original, target.train, target.test, sens),
        }
        if pruned is None:
            # an unpruned target is still attacked through the adversary's (possibly pruned) shadows
            record.pruned = {
                **json.loads(json.dumps(record.original)),
                "attacks": attack("pruned", original, original_key),
                "method": None, "gamma": 0.0, "sparsity": 0.0, "defense": defense.label,
            }
        else:
            pruned_key = ("pruned", config.prune.method, gamma) + _key(asdict(defense))
            record.pruned = {
                "attacks": attack("pruned", pruned.model, pruned_key),
                **_gaps(pruned.model, target.train, target.test, sens),
                "method": config.prune.method,
                "gamma": gamma,
                "sparsity": pruned.sparsity(),
                "defense": defense.label,
            }
    except Exception as exc:  # noqa: BLE001 - every stage failure is recorded
        if raise_errors:
            raise StageError(stage, exc) from exc
        logger.error("run failed in stage %s: %s", stage, exc)
        record.error = {"stage": stage, "type": type(exc).__name__, "message": str(exc),
                        "traceback": traceback.format_exc()}
    record.wall_clock_seconds = time.perf_counter() - start
    return record


# --------------------------------------------------------------------------
# grids


def _repeat_seed(seed: int, r: int) -> int:
    return seed if r == 0 else child_seed(seed, "repeat", r)


def _defense_variants(section: DefenseSection) -> list[dict]:
    if section.grid is None:
        return [{}]
    param = {"PPB": "lam", "DP": "sigma", "ADV": "alpha"}.get(section.kind)
    if param is None:
        raise ConfigError(f"defense {section.kind} has no grid parameter")
    if section.grid is True:
        values = [getattr(c, param) for c in defense_grid(section.kind, section.config())]
    else:
        values = list(section.grid)
    return [{param: float(v), "grid": None} for v in values]


def expand_grid(config: ExperimentConfig) -> list[ExperimentConfig]:
    """Cross product of pruning methods, sparsities, defense values and repeats."""
    methods = config.prune.methods or (config.prune.method,)
    gammas = config.prune.gammas or (config.prune.gamma,)
    out = []
    for r in range(config.run.repeats):
        for method in methods:
            for gamma in gammas:
                for dv in _defense_variants(config.defense):
                    out.append(config.replace(
                        prune={"method": method, "gamma": gamma, "methods": None, "gammas": None},
                        defense=dv,
                        run={"seed": _repeat_seed(config.run.seed, r), "repeats": 1},
                    ))
    return out


def _run_dict(config: ExperimentConfig) -> dict:
    return run_pipeline(config).to_dict()


def run_many(configs: list[ExperimentConfig], parallel: int = 1) -> list[RunRecord]:
    """Run independent pipelines; results are in input order regardless of ``parallel``."""
    if parallel <= 1 or len(configs) <= 1:
        return [run_pipeline(c) for c in configs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return [RunRecord.from_dict(r) for r in pool.map(_run_dict, configs)]


def _cell_config(config: ExperimentConfig, target: tuple[str, float], adversary: tuple[str, float],
                 attack: str) -> ExperimentConfig:
    return config.replace(
        prune={"method": target[0], "gamma": target[1], "methods": None, "gammas": None},
        attack={"adversary_method": adversary[0], "adversary_gamma": adversary[1], "kinds": (attack,),
                "adversary_methods": None, "adversary_gammas": None},
    )


def run_matrix(config: ExperimentConfig, parallel: int | None = None) -> MatrixRecord:
    """Attack accuracy over (target config x adversary config) and the relative loss
    of each cell against the matching known-configuration cell."""
    attack = config.attack.matrix_attack
    methods = config.prune.methods or (config.prune.method,)
    gammas = tuple(config.prune.gammas or (config.prune.gamma,))
    target_gammas = gammas
    if config.prune.include_unpruned and 0.0 not in gammas:
        target_gammas = (0.0,) + gammas
    adv_methods = config.attack.adversary_methods or methods
    adv_gammas = tuple(config.attack.adversary_gammas or gammas)
    targets = [(m, g) for m in methods for g in target_gammas]
    adversaries = [(m, g) for m in adv_methods for g in adv_gammas]

    if config.run.pairs:
        rng = substream(config.run.seed, "matrix", "pairs")
        pairs = [(targets[rng.integers(len(targets))], adversaries[rng.integers(len(adversaries))])
                 for _ in range(config.run.pairs)]
    else:
        pairs = [(t, a) for t in targets for a in adversaries]
    # every target also needs its known-configuration cell as the reference
    jobs = list(dict.fromkeys(pairs + [(t, t) for t, _ in pairs]))
    configs = [_cell_config(config, t, a, attack) for t, a in jobs]
    records = run_many(configs, parallel or config.run.parallel)
    by_job = dict(zip(jobs, records))

    cells = []
    losses = []
    for t, a in pairs:
        rec = by_job[(t, a)]
        known = by_job[(t, t)]
        cell = {"target_method": t[0], "target_gamma": t[1], "adversary_method": a[0],
                "adversary_gamma": a[1], "known": t == a, "accuracy": None, "loss": None, "error": None}
        if rec.error or known.error:
            cell["error"] = (rec.error or known.error)["message"]
        else:
            cell["accuracy"] = rec.attack_accuracy(attack)
            cell["loss"] = attack_accuracy_loss(known.attack_accuracy(attack), cell["accuracy"])
            if not cell["known"]:
                losses.append(cell["loss"])
        cells.append(cell)
    mean_loss = float(np.mean(losses)) if losses else None
    return MatrixRecord(attack, cells, mean_loss, config.run.seed, config.to_dict())


# --------------------------------------------------------------------------
# reports

ATTACK_CSV_FIELDS = [
    "run", "seed", "method", "gamma", "defense", "adaptive", "variant", "attack", "attack_accuracy",
    "attack_auc", "train_accuracy", "test_accuracy", "confidence_gap", "sensitivity_gap",
    "generalization_gap", "defense_filtered",
]


def _as_dict(record) -> dict:
    return record.to_dict() if hasattr(record, "to_dict") else dict(record)


def _setting(rec: dict) -> tuple:
    cfg = rec["config"]
    return (cfg["prune"]["method"], cfg["prune"]["gamma"], rec["seed"], cfg["attack"]["adaptive"])


def defense_filter(records: list[dict]) -> dict[tuple[int, str], bool]:
    """Flag (record, attack) pairs whose defense is not worth reporting.

    A defended pruned model is flagged when its test accuracy falls below 75%
    of the Basic-defended model's, or when the attack does better against it.
    """
    basics = {}
    for rec in records:
        if rec.get("error") is None and rec["config"]["defense"]["kind"] == "Basic":
            basics.setdefault(_setting(rec), rec)
    flags = {}
    for i, rec in enumerate(records):
        if rec.get("error") is not None or rec["config"]["defense"]["kind"] == "Basic":
            continue
        base = basics.get(_setting(rec))
        if base is None:
            continue
        weak = rec["pruned"]["test_accuracy"] < DEFENSE_FILTER_RATIO * base["pruned"]["test_accuracy"]
        for attack, res in rec["pruned"]["attacks"].items():
            worse = res["accuracy"] > base["pruned"]["attacks"].get(attack, {}).get("accuracy", np.inf)
            flags[(i, attack)] = bool(weak or worse)
    return flags


def attack_rows(records) -> list[dict]:
    records = [_as_dict(r) for r in records]
    flags = defense_filter(records)
    rows = []
    for i, rec in enumerate(records):
        if rec.get("error") is not None:
            continue
        cfg = rec["config"]
        for variant in ("original", "pruned"):
            section = rec[variant]
            for attack, res in section["attacks"].items():
                rows.append({
                    "run": i,
                    "seed": rec["seed"],
                    "method": cfg["prune"]["method"],
                    "gamma": cfg["prune"]["gamma"],
                    "defense": rec["pruned"]["defense"],
                    "adaptive": cfg["attack"]["adaptive"],
                    "variant": variant,
                    "attack": attack,
                    "attack_accuracy": res["accuracy"],
                    "attack_auc": res["auc"],
                    "train_accuracy": section["train_accuracy"],
                    "test_accuracy": section["test_accuracy"],
                    "confidence_gap": section["confidence_gap"],
                    "sensitivity_gap": section["sensitivity_gap"],
                    "generalization_gap": section["generalization_gap"],
                    "defense_filtered": flags.get((i, attack), False) if variant == "pruned" else False,
                })
    return rows


def _write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def emit_report(records, out_dir: str | Path, formats=("jsonl", "csv"),
                primary_attack: str = "SAMIA") -> dict[str, Path]:
    """Write records and plot-ready tables; returns the paths written."""
    records = [_as_dict(r) for r in records]
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = {}
    if "jsonl" in formats:
        path = out / "records.jsonl"
        with path.open("w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        written["records"] = path
    if "csv" in formats:
        rows = attack_rows(records)
        written["attacks"] = out / "attacks.csv"
        _write_csv(written["attacks"], ATTACK_CSV_FIELDS, rows)

        written["accuracy_vs_attack"] = out / "fig_accuracy_vs_attack.csv"
        _write_csv(written["accuracy_vs_attack"],
                   ["method", "gamma", "defense", "variant", "attack", "test_accuracy", "attack_accuracy"], rows)

        pruned_rows = [r for r in rows if r["variant"] == "pruned"]
        written["sparsity_vs_attack"] = out / "fig_sparsity_vs_attack.csv"
        _write_csv(written["sparsity_vs_attack"],
                   ["method", "gamma", "defense", "attack", "attack_accuracy"], pruned_rows)

        gap_rows = {}
        for r in pruned_rows:
            if r["attack"] != primary_attack:
                continue
            key = (r["method"], r["gamma"])
            # Basic-defended runs take precedence so each (method, gamma) appears once
            if key not in gap_rows or (r["defense"] == "Basic" and gap_rows[key]["defense"] != "Basic"):
                gap_rows[key] = r
        written["gap_vs_attack"] = out / "fig_gap_vs_attack.csv"
        _write_csv(written["gap_vs_attack"],
                   ["method", "gamma", "defense", "attack", "confidence_gap", "sensitivity_gap",
                    "generalization_gap", "attack_accuracy"], list(gap_rows.values()))
    return written


def emit_matrix(matrix: MatrixRecord, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / "matrix.json"
    js.write_text(json.dumps(matrix.to_dict(), sort_keys=True, indent=1) + "\n")
    table = out / "matrix.csv"
    _write_csv(table, ["target_method", "target_gamma", "adversary_method", "adversary_gamma", "known",
                       "accuracy", "loss", "error"], matrix.cells)
    return {"matrix": js, "matrix_csv": table}


def read_records(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


__all__ = [
    "ConfigError",
    "DEFENSE_KINDS",
    "ExperimentConfig",
    "MatrixRecord",
    "RunRecord",
    "SPARSITY_GRID",
    "attack_rows",
    "clear_cache",
    "defense_filter",
    "emit_matrix",
    "emit_report",
    "expand_grid",
    "read_records",
    "run_many",
    "run_matrix",
    "run_pipeline",
]
