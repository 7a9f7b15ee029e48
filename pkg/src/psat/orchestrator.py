"""Strategy codes, experiment configuration, and the study driver.

A strategy code names one point in the four-axis design space: the plan
source, the learning set, the augmentation policy, and the transfer
mode. The driver expands a list of codes into the minimal set of
pretraining runs (strategies sharing plan source, learning set, and
augmentation reuse one checkpoint), adapts each to the pediatric cohort
where the code asks for it, and evaluates every resulting model on the
adult, pediatric, and internal test splits. Each run directory carries
a manifest with the seeds, hashes, and settings needed to re-execute
it; reports aggregate into one table per study.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .augment import contraction_policy, detail_policy
from .errors import ConfigError, StrategyCodeError, ValidationError
from .evaluation import EvalReport, evaluate, render_table, report_from_json, report_to_json
from .fingerprint import compute_fingerprint
from .phantom import (
    Cohort,
    default_adult_spec,
    default_internal_spec,
    default_pediatric_spec,
    generate_cohort,
    merge_balanced,
)
from .plan import DEFAULT_BASE_CHANNELS, DEFAULT_VOXEL_BUDGET, TrainingPlan, derive_plan, preprocess
from .seeds import derive_seed
from .train import (
    DEFAULT_EPOCHS_SCALE,
    DEFAULT_PRETRAIN_EPOCHS,
    DEFAULT_STEPS_PER_EPOCH,
    EPOCHS_GRID,
    LR0_GRID,
    REPLAY_GRID,
    RunResult,
    TrainSchedule,
    TransferSpec,
    train_direct,
    transfer,
)

PLAN_SOURCES = ("a", "p", "m")
SET_SOURCES = ("a", "p", "m")
AUG_POLICIES = ("d", "c")
TRANSFER_MODES = ("o", "p", "m")

# slot i of a code must hold one of these characters
_SLOTS = (
    ("P",), PLAN_SOURCES,
    ("S",), SET_SOURCES,
    ("A",), AUG_POLICIES,
    ("T",), TRANSFER_MODES,
)


@dataclass(frozen=True)
class StrategyCode:
    """One plan-source / learning-set / augmentation / transfer choice."""

    plan_src: str
    set_src: str
    aug: str
    transfer: str

    def __post_init__(self) -> None:
        checks = (
            ("plan source", self.plan_src, PLAN_SOURCES),
            ("learning set", self.set_src, SET_SOURCES),
            ("augmentation", self.aug, AUG_POLICIES),
            ("transfer mode", self.transfer, TRANSFER_MODES),
        )
        for what, value, allowed in checks:
            if value not in allowed:
                raise StrategyCodeError(
                    f"{what} must be one of {'/'.join(allowed)}, got {value!r}"
                )

    def __str__(self) -> str:
        return f"P{self.plan_src}S{self.set_src}A{self.aug}T{self.transfer}"

    @property
    def pretrain_key(self) -> str:
        """Shared identity of the pretraining run this code needs."""
        return f"P{self.plan_src}S{self.set_src}A{self.aug}"


def parse_strategy(text: str) -> StrategyCode:
    """Parse an eight-character strategy code, e.g. ``PaSaAdTo``."""
    if not isinstance(text, str):
        raise StrategyCodeError(f"strategy code must be a string, got {type(text).__name__}")
    for i, allowed in enumerate(_SLOTS):
        if i >= len(text) or text[i] not in allowed:
            raise StrategyCodeError(
                f"invalid strategy code {text!r}: expected one of "
                f"{'/'.join(allowed)} at offset {i}"
            )
    if len(text) != 8:
        raise StrategyCodeError(
            f"invalid strategy code {text!r}: unexpected text at offset 8"
        )
    return StrategyCode(text[1], text[3], text[5], text[7])


def all_strategy_codes() -> list[str]:
    """All 54 valid codes, in axis-nested order."""
    return [
        f"P{p}S{s}A{a}T{t}"
        for p in PLAN_SOURCES
        for s in SET_SOURCES
        for a in AUG_POLICIES
        for t in TRANSFER_MODES
    ]


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a study needs: cohort sizes, seeds, budgets, and codes."""

    n_adult: int = 16
    n_pediatric: int = 16
    n_internal: int = 5
    cohort_seed: int = 101
    train_seed: int = 7
    voxel_budget: int = DEFAULT_VOXEL_BUDGET
    base_channels: int = DEFAULT_BASE_CHANNELS
    pretrain_epochs: int = DEFAULT_PRETRAIN_EPOCHS
    steps_per_epoch: int = DEFAULT_STEPS_PER_EPOCH
    epochs_scale: float = DEFAULT_EPOCHS_SCALE
    lr0_grid: tuple[float, ...] = LR0_GRID
    epochs_grid: tuple[int, ...] = EPOCHS_GRID
    replay_grid: tuple[float, ...] = REPLAY_GRID
    strategies: tuple[str, ...] = ("PaSaAdTo",)
    baseline: str = "PaSaAdTo"
    out_root: str = ""

    def __post_init__(self) -> None:
        if not self.strategies:
            raise ConfigError("strategies list is empty")
        seen: set[str] = set()
        for code in self.strategies:
            try:
                parse_strategy(code)
            except StrategyCodeError as exc:
                raise ConfigError(f"bad strategy in config: {exc}") from exc
            if code in seen:
                raise ConfigError(f"duplicate strategy {code}")
            seen.add(code)
        try:
            parse_strategy(self.baseline)
        except StrategyCodeError as exc:
            raise ConfigError(f"bad baseline in config: {exc}") from exc
        if self.baseline not in self.strategies:
            raise ConfigError(f"baseline {self.baseline} is not among the strategies")
        # floor(0.15 * n) >= 1 keeps the validation split nonempty
        for name, n, lo in (
            ("n_adult", self.n_adult, 7),
            ("n_pediatric", self.n_pediatric, 7),
            ("n_internal", self.n_internal, 1),
        ):
            if n < lo:
                raise ConfigError(f"{name} must be >= {lo}, got {n}")
        for name, v in (
            ("pretrain_epochs", self.pretrain_epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("voxel_budget", self.voxel_budget),
            ("base_channels", self.base_channels),
        ):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if not 0 < self.epochs_scale <= 1:
            raise ConfigError(f"epochs_scale must be in (0, 1], got {self.epochs_scale}")


# INI schema: section -> key -> (config field, converter)
_INT, _FLOAT, _STR = "int", "float", "str"
_INTS, _FLOATS, _STRS = "ints", "floats", "strs"
_SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "cohorts": {
        "n_adult": ("n_adult", _INT),
        "n_pediatric": ("n_pediatric", _INT),
        "n_internal": ("n_internal", _INT),
        "seed": ("cohort_seed", _INT),
    },
    "plan": {
        "voxel_budget": ("voxel_budget", _INT),
        "base_channels": ("base_channels", _INT),
    },
    "train": {
        "seed": ("train_seed", _INT),
        "epochs": ("pretrain_epochs", _INT),
        "steps_per_epoch": ("steps_per_epoch", _INT),
        "epochs_scale": ("epochs_scale", _FLOAT),
        "lr0_grid": ("lr0_grid", _FLOATS),
        "epochs_grid": ("epochs_grid", _INTS),
        "replay_grid": ("replay_grid", _FLOATS),
    },
    "study": {
        "strategies": ("strategies", _STRS),
        "baseline": ("baseline", _STR),
        "out": ("out_root", _STR),
    },
}


def _split_list(raw: str) -> list[str]:
    return [part for part in (p.strip() for p in raw.split(",")) if part]


def _convert(section: str, key: str, raw: str, kind: str):
    try:
        if kind == _INT:
            return int(raw)
        if kind == _FLOAT:
            return float(raw)
        if kind == _INTS:
            return tuple(int(v) for v in _split_list(raw))
        if kind == _FLOATS:
            return tuple(float(v) for v in _split_list(raw))
        if kind == _STRS:
            return tuple(_split_list(raw))
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r} in [{section}]: {raw!r}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an INI experiment config; unknown sections or keys are errors."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(p.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {p}: {exc}") from exc
    kwargs: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            name, kind = _SCHEMA[section][key]
            kwargs[name] = _convert(section, key, raw, kind)
    return ExperimentConfig(**kwargs)


def resolve_out_root(cli_out: str | None, cfg: ExperimentConfig) -> Path:
    """Output root: explicit flag, then config, then $PSAT_OUT, then default."""
    if cli_out:
        return Path(cli_out)
    if cfg.out_root:
        return Path(cfg.out_root)
    env = os.environ.get("PSAT_OUT")
    if env:
        return Path(env)
    return Path("psat_out")


def config_as_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
    return d


# --------------------------------------------------------------------------
# run manifests


@dataclass
class RunManifest:
    """Record of one strategy run, sufficient to re-execute it."""

    strategy: str
    status: str = "ok"
    error: str = ""
    redundant: bool = False
    warnings: list[str] = field(default_factory=list)
    plan_hash: str = ""
    policy: str = ""
    pretrain_key: str = ""
    pretrain_reused: bool = False
    checkpoint: str = ""
    chosen: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    cohort_hashes: dict = field(default_factory=dict)
    eval_files: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = __version__
    wall_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "RunManifest":
        return RunManifest(**json.loads(text))


def _cohort_hash(cohort: Cohort) -> str:
    payload = {
        "tag": cohort.cohort_tag,
        "seed": cohort.seed,
        "source": cohort.source,
        "ids": [c.case_id for c in cohort.cases],
        "splits": cohort.splits,
    }
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8"))
    return digest.hexdigest()[:16]


# --------------------------------------------------------------------------
# study driver


@dataclass
class StudyResult:
    out_root: Path
    manifests: dict[str, RunManifest]
    reports: dict[tuple[str, str], EvalReport]
    n_pretrain_runs: int
    n_transfer_runs: int
    report_text: str
    report_csv: str


def build_cohorts(cfg: ExperimentConfig) -> dict[str, Cohort]:
    """The four cohorts a study can draw on, keyed by axis letter."""
    adult = generate_cohort(
        default_adult_spec(), cfg.n_adult, derive_seed(cfg.cohort_seed, "adult")
    )
    ped = generate_cohort(
        default_pediatric_spec(), cfg.n_pediatric, derive_seed(cfg.cohort_seed, "pediatric")
    )
    internal = generate_cohort(
        default_internal_spec(),
        cfg.n_internal,
        derive_seed(cfg.cohort_seed, "internal"),
        split_fracs=(0.0, 0.0),  # held out in full, never trained on
    )
    mixed = merge_balanced(adult, ped, derive_seed(cfg.cohort_seed, "mixed"))
    return {"a": adult, "p": ped, "m": mixed, "internal": internal}


class _StudyState:
    """Caches shared across the strategies of one study."""

    def __init__(self, cfg: ExperimentConfig, out: Path, log=None):
        self.cfg = cfg
        self.out = out
        self.log = log or (lambda msg: None)
        self.cohorts = build_cohorts(cfg)
        self.label_names = self.cohorts["a"].organ_names()
        self.plans: dict[str, TrainingPlan] = {}
        self.processed: dict[tuple[str, str], object] = {}
        self.pretrained: dict[str, tuple[str, RunResult]] = {}
        self.n_pretrain = 0
        self.n_transfer = 0

    def plan_for(self, code: StrategyCode) -> TrainingPlan:
        letter = code.plan_src
        if letter not in self.plans:
            source = self.cohorts[letter]
            fp = compute_fingerprint(source.split_cases("train"))
            self.plans[letter] = derive_plan(fp, self.cfg.voxel_budget, self.cfg.base_channels)
        return self.plans[letter]

    def cases(self, plan: TrainingPlan, cohort: Cohort, part: str) -> list:
        key_hash = plan.plan_hash()
        out = []
        for case in cohort.split_cases(part):
            key = (key_hash, case.case_id)
            if key not in self.processed:
                self.processed[key] = preprocess(case, plan)
            out.append(self.processed[key])
        return out

    def pretrain(self, code: StrategyCode, manifest: RunManifest) -> str:
        """Train (or reuse) the checkpoint for this code's (P, S, A) triple."""
        key = code.pretrain_key
        plan = self.plan_for(code)
        manifest.plan_hash = plan.plan_hash()
        manifest.pretrain_key = key
        if key in self.pretrained:
            manifest.pretrain_reused = True
            return self.pretrained[key][0]
        source = self.cohorts[code.set_src]
        train_cases = self.cases(plan, source, "train")
        val_cases = self.cases(plan, source, "val")
        policy = contraction_policy() if code.aug == "c" else detail_policy()
        schedule = TrainSchedule(
            epochs=self.cfg.pretrain_epochs, steps_per_epoch=self.cfg.steps_per_epoch
        )
        self.log(f"pretraining {key} on {len(train_cases)} cases")
        result = train_direct(
            plan,
            train_cases,
            val_cases,
            policy,
            schedule,
            seed=derive_seed(self.cfg.train_seed, "pretrain", key),
            out_dir=self.out / "pretrain" / key,
            strategy=key,
            label_names=self.label_names,
        )
        self.pretrained[key] = (result.checkpoint_path, result)
        self.n_pretrain += 1
        return result.checkpoint_path


def _run_strategy(state: _StudyState, code: StrategyCode, run_dir: Path,
                  manifest: RunManifest) -> tuple[str, TrainingPlan]:
    cfg = state.cfg
    plan = state.plan_for(code)
    policy = contraction_policy() if code.aug == "c" else detail_policy()
    manifest.policy = policy.name
    manifest.schedule = {
        "pretrain": {
            "epochs": cfg.pretrain_epochs,
            "steps_per_epoch": cfg.steps_per_epoch,
        }
    }
    if code.set_src == "p" and code.transfer in ("p", "m"):
        manifest.redundant = True
        manifest.warnings.append(
            "transfer re-tunes on the pediatric cohort the model already trained on"
        )
    if code.plan_src == "p" and code.transfer in ("p", "m"):
        manifest.warnings.append(
            "pediatric plan with adult pretraining and transfer is a known "
            "pathological combination; expect unstable results"
        )
    base_ckpt = state.pretrain(code, manifest)
    if code.transfer == "o":
        manifest.checkpoint = base_ckpt
        return base_ckpt, plan

    spec = TransferSpec(
        mode=code.transfer,
        lr0_grid=cfg.lr0_grid,
        epochs_grid=cfg.epochs_grid,
        replay_grid=cfg.replay_grid,
    )
    ped = state.cohorts["p"]
    ped_train = state.cases(plan, ped, "train")
    ped_val = state.cases(plan, ped, "val")
    adult_train = None
    if code.transfer == "m":
        adult_train = state.cases(plan, state.cohorts["a"], "train")
    state.log(f"adapting {code} over {len(spec.grid_points())} grid points")
    result = transfer(
        base_ckpt,
        spec,
        ped_train,
        ped_val,
        adult_train,
        seed=derive_seed(cfg.train_seed, "transfer", str(code)),
        out_dir=run_dir / "transfer",
        epochs_scale=cfg.epochs_scale,
        steps_per_epoch=cfg.steps_per_epoch,
        strategy=str(code),
        label_names=state.label_names,
    )
    state.n_transfer += 1
    manifest.checkpoint = result.checkpoint_path
    manifest.chosen = dict(result.chosen)
    if result.chosen:
        manifest.schedule["transfer"] = {
            "lr0": result.chosen["lr0"],
            "epochs": max(1, round(result.chosen["epochs"] * cfg.epochs_scale)),
            "steps_per_epoch": cfg.steps_per_epoch,
        }
    return result.checkpoint_path, plan


def run_experiment(cfg: ExperimentConfig, out_root: str | Path | None = None,
                   log=None) -> StudyResult:
    """Run every configured strategy, evaluate, and write the report.

    A failure inside one strategy is recorded in that run's manifest and
    the study moves on; only configuration problems abort the study.
    """
    out = Path(out_root) if out_root is not None else resolve_out_root(None, cfg)
    out.mkdir(parents=True, exist_ok=True)
    state = _StudyState(cfg, out, log=log)
    eval_cohorts = [state.cohorts["a"], state.cohorts["p"], state.cohorts["internal"]]
    cohort_hashes = {
        c.cohort_tag: _cohort_hash(c)
        for c in (*eval_cohorts, state.cohorts["m"])
    }
    study_meta = {
        "strategies": list(cfg.strategies),
        "baseline": cfg.baseline,
        "cohorts": [c.cohort_tag for c in eval_cohorts],
        "config": config_as_dict(cfg),
        "version": __version__,
    }
    (out / "study.json").write_text(
        json.dumps(study_meta, sort_keys=True, indent=2) + "\n"
    )

    manifests: dict[str, RunManifest] = {}
    reports: dict[tuple[str, str], EvalReport] = {}
    for text_code in cfg.strategies:
        code = parse_strategy(text_code)
        run_dir = out / "runs" / text_code
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(
            strategy=text_code,
            seeds={
                "cohort": cfg.cohort_seed,
                "train": cfg.train_seed,
                "pretrain": derive_seed(cfg.train_seed, "pretrain", code.pretrain_key),
                "transfer": derive_seed(cfg.train_seed, "transfer", text_code),
            },
            cohort_hashes=dict(cohort_hashes),
            config=config_as_dict(cfg),
        )
        t0 = time.perf_counter()
        try:
            ckpt_path, plan = _run_strategy(state, code, run_dir, manifest)
            for cohort in eval_cohorts:
                rep = evaluate(ckpt_path, cohort, plan)
                # identity-transfer checkpoints carry the shared pretrain key
                rep = dataclasses.replace(rep, strategy=text_code)
                reports[(text_code, cohort.cohort_tag)] = rep
                eval_path = run_dir / f"eval_{cohort.cohort_tag}.json"
                eval_path.write_text(report_to_json(rep))
                manifest.eval_files.append(str(eval_path.relative_to(out)))
            state.log(f"{text_code} done")
        except Exception as exc:  # noqa: BLE001 - one bad run must not sink the study
            manifest.status = "failed"
            manifest.error = f"{type(exc).__name__}: {exc}"
            state.log(f"{text_code} failed: {manifest.error}")
        manifest.wall_seconds = time.perf_counter() - t0
        (run_dir / "manifest.json").write_text(manifest.to_json())
        manifests[text_code] = manifest

    report_text, report_csv = _render_study_report(
        out, list(cfg.strategies), [c.cohort_tag for c in eval_cohorts],
        cfg.baseline, reports,
    )
    return StudyResult(
        out_root=out,
        manifests=manifests,
        reports=reports,
        n_pretrain_runs=state.n_pretrain,
        n_transfer_runs=state.n_transfer,
        report_text=report_text,
        report_csv=report_csv,
    )


def _render_study_report(out: Path, strategies: list[str], cohort_tags: list[str],
                         baseline: str, reports: dict) -> tuple[str, str]:
    ordered = [
        reports[(s, tag)]
        for s in strategies
        for tag in cohort_tags
        if (s, tag) in reports
    ]
    has_baseline = any(s == baseline for s, _ in reports)
    if not ordered or not has_baseline:
        text = f"report unavailable: no evaluation reports for baseline {baseline}\n"
        csv_text = ""
    else:
        text, csv_text = render_table(ordered, baseline)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(csv_text)
    return text, csv_text


def report(out_root: str | Path, baseline: str | None = None) -> tuple[str, str]:
    """Rebuild the study table from the evaluation files on disk."""
    out = Path(out_root)
    meta_path = out / "study.json"
    if not meta_path.is_file():
        raise ValidationError(f"no study found under {out} (missing study.json)")
    meta = json.loads(meta_path.read_text())
    strategies = list(meta["strategies"])
    cohort_tags = list(meta["cohorts"])
    baseline = baseline or meta["baseline"]
    reports: dict[tuple[str, str], EvalReport] = {}
    for s in strategies:
        for tag in cohort_tags:
            path = out / "runs" / s / f"eval_{tag}.json"
            if path.is_file():
                reports[(s, tag)] = report_from_json(path.read_text())
    if not reports:
        raise ValidationError(f"no evaluation reports found under {out}")
    return _render_study_report(out, strategies, cohort_tags, baseline, reports)
