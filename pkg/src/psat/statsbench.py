"""Directional findings expressed as executable assertions.

A trend assertion compares two strategies on one cohort: over a named
organ subset it requires the first strategy's mean DSC to exceed the
second's by a margin (or, for retention checks, to trail it by no more
than the margin), in at least a required fraction of seeds. The trends
preset bundles the strategy codes, seeds, and assertions that exercise
the laboratory's three headline effects: contraction-aware augmentation
helps on the contracted cohort, naive fine-tuning forgets the original
cohort while rehearsal retains it, and a mixed-source model transfers
better to the held-out scanner.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError
from .evaluation import EvalReport, report_from_json
from .orchestrator import ExperimentConfig, parse_strategy, run_experiment

COHORT_TAGS = ("adult", "pediatric", "internal")

DEFAULT_SEEDS = (101, 202, 303)
DEFAULT_PASS_FRACTION = 2.0 / 3.0

TREND_CODES = (
    "PaSaAdTo",
    "PaSaAcTo",
    "PpSpAdTo",
    "PmSmAdTo",
    "PaSaAdTp",
    "PaSaAdTm",
    "PmSaAdTp",
    "PmSaAdTm",
)

# organs whose sizes collide across cohorts: each pediatric organ in the
# second group matches an adult organ in the first at the contraction ratio
SMALL_ADULT_ORGANS = ("prostate", "bladder")
AMBIGUOUS_PED_ORGANS = ("kidney", "liver")


@dataclass(frozen=True)
class TrendAssertion:
    """One directional claim: ``better`` beats ``worse`` by ``margin`` points.

    ``kind`` is "exceeds" (mean(better) - mean(worse) >= margin) or
    "within" (better may trail worse by at most margin). Margins are in
    DSC points on the 0..100 scale. The assertion passes when the
    per-seed check holds in at least ``min_pass_fraction`` of seeds.
    """

    name: str
    better: str
    worse: str
    cohort: str
    organs: tuple[str, ...] = ()
    margin: float = 1.0
    kind: str = "exceeds"
    min_pass_fraction: float = DEFAULT_PASS_FRACTION

    def __post_init__(self) -> None:
        parse_strategy(self.better)
        parse_strategy(self.worse)
        if self.cohort not in COHORT_TAGS:
            raise ValidationError(
                f"unknown cohort {self.cohort!r}, expected one of {COHORT_TAGS}"
            )
        if not self.margin > 0:
            raise ValidationError(f"margin must be positive, got {self.margin}")
        if self.kind not in ("exceeds", "within"):
            raise ValidationError(f"unknown assertion kind {self.kind!r}")
        if not 0 < self.min_pass_fraction <= 1:
            raise ValidationError(
                f"min_pass_fraction must be in (0, 1], got {self.min_pass_fraction}"
            )

    def holds(self, diff_points: float) -> bool:
        if self.kind == "exceeds":
            return diff_points >= self.margin
        return diff_points >= -self.margin


@dataclass(frozen=True)
class TrendsPreset:
    """Codes, seeds, assertions, and the study config to run them under."""

    codes: tuple[str, ...]
    seeds: tuple[int, ...]
    assertions: tuple[TrendAssertion, ...]
    config: ExperimentConfig

    def __post_init__(self) -> None:
        if len(self.seeds) < 3:
            raise ValidationError(f"need at least 3 seeds, got {len(self.seeds)}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be distinct")
        for a in self.assertions:
            for code in (a.better, a.worse):
                if code not in self.codes:
                    raise ValidationError(
                        f"assertion {a.name!r} references {code}, which is "
                        f"not among the preset codes"
                    )


def default_trends_preset() -> TrendsPreset:
    """The stock desk-scale benchmark: three effects over three seeds."""
    cfg = ExperimentConfig(
        n_adult=16,
        n_pediatric=16,
        n_internal=5,
        cohort_seed=424242,
        pretrain_epochs=20,
        steps_per_epoch=30,
        epochs_scale=0.04,  # grid epochs 200 -> 8 realized
        lr0_grid=(3.16e-4,),
        epochs_grid=(200,),
        replay_grid=(0.5,),
        strategies=TREND_CODES,
        baseline="PaSaAdTo",
    )
    assertions = (
        TrendAssertion(
            name="contraction-aug-gain",
            better="PaSaAcTo",
            worse="PaSaAdTo",
            cohort="pediatric",
            organs=AMBIGUOUS_PED_ORGANS,
            margin=5.0,
        ),
        TrendAssertion(
            name="finetune-forgets-source",
            better="PaSaAdTo",
            worse="PaSaAdTp",
            cohort="adult",
            organs=SMALL_ADULT_ORGANS,
            margin=20.0,
        ),
        TrendAssertion(
            name="rehearsal-retains-source",
            better="PaSaAdTm",
            worse="PaSaAdTo",
            cohort="adult",
            organs=SMALL_ADULT_ORGANS,
            margin=10.0,
            kind="within",
        ),
        TrendAssertion(
            name="mixed-plan-generalizes",
            better="PmSmAdTo",
            worse="PaSaAdTo",
            cohort="internal",
            organs=(),
            # directional: any nonnegative gap counts
            margin=1e-6,
        ),
    )
    return TrendsPreset(
        codes=TREND_CODES, seeds=DEFAULT_SEEDS, assertions=assertions, config=cfg
    )


def _subset_mean_points(rep: EvalReport, organs: tuple[str, ...]) -> float:
    """Mean DSC over the named organs, in points (0..100)."""
    by_name = {name: oid for oid, name in rep.label_names.items()}
    if organs:
        ids = []
        for name in organs:
            if name not in by_name:
                raise ValidationError(
                    f"organ {name!r} not in the {rep.cohort_tag} report"
                )
            ids.append(by_name[name])
    else:
        ids = sorted(rep.label_names)
    values = []
    for oid in ids:
        if oid not in rep.means:
            raise ValidationError(
                f"organ {rep.label_names[oid]!r} absent from every case "
                f"of the {rep.cohort_tag} report"
            )
        values.append(rep.means[oid])
    return 100.0 * sum(values) / len(values)


def seed_dir(out_root: str | Path, seed: int) -> Path:
    return Path(out_root) / f"seed{seed}"


def load_trend_reports(preset: TrendsPreset, out_root: str | Path
                       ) -> dict[tuple[int, str, str], EvalReport]:
    """Load every (seed, strategy, cohort) report an assertion needs."""
    needed: set[tuple[str, str]] = set()
    for a in preset.assertions:
        needed.add((a.better, a.cohort))
        needed.add((a.worse, a.cohort))
    reports: dict[tuple[int, str, str], EvalReport] = {}
    missing: list[str] = []
    for seed in preset.seeds:
        for code, cohort in sorted(needed):
            path = seed_dir(out_root, seed) / "runs" / code / f"eval_{cohort}.json"
            if not path.is_file():
                missing.append(f"{code} (seed {seed})")
                continue
            reports[(seed, code, cohort)] = report_from_json(path.read_text())
    if missing:
        raise ValidationError(
            "missing evaluation runs: " + ", ".join(sorted(set(missing)))
        )
    return reports


def run_trends(preset: TrendsPreset, out_root: str | Path) -> dict:
    """Check every assertion against the completed runs under ``out_root``."""
    reports = load_trend_reports(preset, out_root)
    results = []
    all_pass = True
    for a in preset.assertions:
        per_seed = []
        n_pass = 0
        for seed in preset.seeds:
            better = _subset_mean_points(reports[(seed, a.better, a.cohort)], a.organs)
            worse = _subset_mean_points(reports[(seed, a.worse, a.cohort)], a.organs)
            diff = better - worse
            ok = a.holds(diff)
            n_pass += ok
            per_seed.append({
                "seed": seed,
                "better_mean": better,
                "worse_mean": worse,
                "diff": diff,
                "pass": bool(ok),
            })
        fraction = n_pass / len(preset.seeds)
        passed = fraction >= a.min_pass_fraction - 1e-12
        all_pass = all_pass and passed
        results.append({
            "name": a.name,
            "better": a.better,
            "worse": a.worse,
            "cohort": a.cohort,
            "organs": list(a.organs),
            "margin": a.margin,
            "kind": a.kind,
            "per_seed": per_seed,
            "pass_fraction": fraction,
            "required_fraction": a.min_pass_fraction,
            "passed": bool(passed),
        })
    return {
        "passed": bool(all_pass),
        "seeds": list(preset.seeds),
        "codes": list(preset.codes),
        "assertions": results,
    }


def render_trends(verdict: dict) -> str:
    """Fixed-width pass/fail table for terminal output."""
    rows = [("trend", "cohort", "seeds", "median diff", "margin", "verdict")]
    for a in verdict["assertions"]:
        diffs = sorted(p["diff"] for p in a["per_seed"])
        median = diffs[len(diffs) // 2]
        n_pass = sum(p["pass"] for p in a["per_seed"])
        bound = f"<= {a['margin']:g}" if a["kind"] == "within" else f">= {a['margin']:g}"
        rows.append((
            a["name"],
            a["cohort"],
            f"{n_pass}/{len(a['per_seed'])}",
            f"{median:+.1f}",
            bound,
            "PASS" if a["passed"] else "FAIL",
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    lines.append("")
    lines.append("overall: " + ("PASS" if verdict["passed"] else "FAIL"))
    return "\n".join(lines) + "\n"


def _seed_complete(preset: TrendsPreset, out_root: str | Path, seed: int) -> bool:
    base = seed_dir(out_root, seed)
    if not (base / "report.csv").is_file():
        return False
    for code in preset.codes:
        manifest = base / "runs" / code / "manifest.json"
        if not manifest.is_file():
            return False
        if json.loads(manifest.read_text()).get("status") != "ok":
            return False
    return True


def run_trends_preset(out_root: str | Path, config: ExperimentConfig | None = None,
                      preset: TrendsPreset | None = None, log=None) -> dict:
    """Run the preset's studies (one per seed), then check the assertions.

    Seeds whose runs already completed under ``out_root`` are reused, so
    an interrupted benchmark resumes instead of restarting; the verdict's
    ``wall_seconds`` totals each seed's recorded compute across those
    invocations. The verdict is written to ``trends.json`` and the table
    printed via ``log``.
    """
    log = log or (lambda msg: None)
    preset = preset or default_trends_preset()
    cfg = preset.config
    if config is not None:
        cfg = dataclasses.replace(
            config, strategies=preset.codes, baseline=preset.config.baseline,
            out_root="",
        )
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    total_wall = 0.0
    for seed in preset.seeds:
        # wall.json accumulates this seed's compute across interrupted and
        # resumed invocations, so the final total reflects the real cost
        wall_path = seed_dir(out, seed) / "wall.json"
        prior = 0.0
        if wall_path.is_file():
            prior = float(json.loads(wall_path.read_text())["wall_seconds"])
        if _seed_complete(preset, out, seed):
            log(f"seed {seed}: reusing completed runs")
            total_wall += prior
            continue
        log(f"seed {seed}: running {len(preset.codes)} strategies")
        t0 = time.perf_counter()
        cfg_seed = dataclasses.replace(cfg, train_seed=seed)
        result = run_experiment(cfg_seed, out_root=seed_dir(out, seed), log=log)
        seed_wall = prior + time.perf_counter() - t0
        wall_path.write_text(json.dumps({"wall_seconds": seed_wall}) + "\n")
        total_wall += seed_wall
        failed = [m.strategy for m in result.manifests.values() if m.status != "ok"]
        if failed:
            log(f"seed {seed}: failed strategies: {', '.join(failed)}")
    verdict = run_trends(preset, out)
    verdict["wall_seconds"] = total_wall
    (out / "trends.json").write_text(
        json.dumps(verdict, sort_keys=True, indent=2) + "\n"
    )
    text = render_trends(verdict)
    if log is print:
        sys.stdout.write(text)
    else:
        log(text)
    return verdict
