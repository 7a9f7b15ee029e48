"""Per-organ DSC scoring, rank-based significance tests, and report tables.

Scores are Dice coefficients on each case's native grid. Strategy
comparisons use the Mann-Whitney U test: exact by enumeration over the
pooled multiset when the sample-size product is small, otherwise a
normal approximation with tie-corrected variance and continuity
correction. Tables follow the cohort-per-cell slash convention with a
dagger marking significant improvements over the baseline.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import SplitLeakError, ValidationError
from .nnet import Checkpoint, load_checkpoint
from .phantom import Cohort
from .plan import TrainingPlan, preprocess
from .train import infer
from .volumes import LabelMap

EXACT_LIMIT = 400  # switch to the normal approximation above this m*n
ALPHA = 0.05


def dsc(pred: LabelMap, truth: LabelMap, organ_id: int) -> float | None:
    """Dice overlap of one organ; None when absent from both masks."""
    if pred.shape != truth.shape:
        raise ValidationError(
            f"prediction shape {pred.shape} != ground truth shape {truth.shape}"
        )
    a = pred.labels == organ_id
    b = truth.labels == organ_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return None
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / total


def _u_statistic(xs: np.ndarray, ys: np.ndarray) -> float:
    greater = (xs[:, None] > ys[None, :]).sum()
    equal = (xs[:, None] == ys[None, :]).sum()
    return float(greater) + 0.5 * float(equal)


def _exact_two_sided(xs: np.ndarray, ys: np.ndarray, u: float) -> float:
    """Exact permutation p over all assignments of the pooled multiset.

    Dynamic program over tie groups; the state tracks (number of x's
    placed, accumulated 2U) so everything stays integer.
    """
    m, n = len(xs), len(ys)
    pooled = np.sort(np.concatenate([xs, ys]))
    group_sizes = []
    at = 0
    while at < len(pooled):
        stop = at
        while stop < len(pooled) and pooled[stop] == pooled[at]:
            stop += 1
        group_sizes.append(stop - at)
        at = stop
    dp: dict[tuple[int, int], int] = {(0, 0): 1}
    seen = 0
    for t in group_sizes:
        ndp: dict[tuple[int, int], int] = {}
        for (x_used, u2), ways in dp.items():
            for k in range(0, min(t, m - x_used) + 1):
                # k x's beat every y already placed below; within-group
                # pairs tie and count half each
                add = 2 * k * (seen - x_used) + k * (t - k)
                key = (x_used + k, u2 + add)
                ndp[key] = ndp.get(key, 0) + ways * math.comb(t, k)
        dp = ndp
        seen += t
    dist = {u2: w for (x_used, u2), w in dp.items() if x_used == m}
    total = math.comb(m + n, m)
    assert sum(dist.values()) == total
    center = m * n  # in 2U units
    spread = abs(int(round(2 * u)) - center)
    hits = sum(w for u2, w in dist.items() if abs(u2 - center) >= spread)
    return hits / total


def _approx_two_sided(xs: np.ndarray, ys: np.ndarray, u: float) -> float:
    m, n = len(xs), len(ys)
    big_n = m + n
    mu = m * n / 2.0
    _, counts = np.unique(np.concatenate([xs, ys]), return_counts=True)
    tie_term = float((counts.astype(np.float64) ** 3 - counts).sum())
    var = m * n / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    if var <= 0:
        return 1.0
    diff = max(abs(u - mu) - 0.5, 0.0)  # continuity correction
    z = diff / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def mann_whitney(xs, ys) -> tuple[float, float]:
    """U statistic and two-sided p for two independent score samples."""
    ax = np.asarray(xs, dtype=np.float64)
    ay = np.asarray(ys, dtype=np.float64)
    if ax.size == 0 or ay.size == 0:
        raise ValidationError("both samples must be non-empty")
    if not (np.isfinite(ax).all() and np.isfinite(ay).all()):
        raise ValidationError("scores must be finite")
    u = _u_statistic(ax, ay)
    if ax.size * ay.size <= EXACT_LIMIT:
        p = _exact_two_sided(ax, ay, u)
    else:
        p = _approx_two_sided(ax, ay, u)
    return u, p


@dataclass(frozen=True)
class CaseScore:
    """Per-organ DSC for one case; absent organs are simply missing."""

    case_id: str
    scores: dict[int, float]

    def __post_init__(self) -> None:
        for organ, value in self.scores.items():
            if not 0.0 <= value <= 1.0:
                raise ValidationError(
                    f"case {self.case_id!r} organ {organ}: DSC {value} outside [0, 1]"
                )


@dataclass(frozen=True)
class EvalReport:
    """Scores for one strategy on one cohort's held-out cases."""

    strategy: str
    cohort_tag: str
    label_names: dict[int, str]
    cases: tuple[CaseScore, ...]
    means: dict[int, float]
    significant: dict[int, bool] | None = None

    def __post_init__(self) -> None:
        recomputed = _organ_means(self.cases)
        if set(recomputed) != set(self.means) or any(
            abs(recomputed[k] - self.means[k]) > 1e-12 for k in recomputed
        ):
            raise ValidationError("report means do not match per-case scores")

    def organ_scores(self, organ: int) -> list[float]:
        return [c.scores[organ] for c in self.cases if organ in c.scores]


def _organ_means(cases) -> dict[int, float]:
    pools: dict[int, list[float]] = {}
    for case in cases:
        for organ, value in case.scores.items():
            pools.setdefault(organ, []).append(value)
    return {organ: float(sum(v) / len(v)) for organ, v in sorted(pools.items())}


def evaluate(
    ckpt: Checkpoint | str | Path,
    cohort: Cohort,
    plan: TrainingPlan,
    split: str = "test",
) -> EvalReport:
    """Score a checkpoint on a cohort split, case by case.

    Every case is preprocessed under the plan, predicted by sliding
    window, and scored on its native grid. Any overlap between the split
    and the checkpoint's recorded training cases aborts the evaluation.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cases = cohort.split_cases(split)
    if not cases:
        raise ValidationError(f"cohort {cohort.cohort_tag!r} has no {split!r} cases")
    train_ids = set(ckpt.meta.get("train_case_ids", ()))
    organ_ids = sorted(cohort.organ_names())
    scored = []
    for case in cases:
        if case.case_id in train_ids:
            raise SplitLeakError(
                f"case {case.case_id!r} is in the checkpoint's training set"
            )
        processed = preprocess(case, plan)
        pred = infer(ckpt, processed)
        scores = {}
        for organ in organ_ids:
            value = dsc(pred, case.labels, organ)
            if value is not None:
                scores[organ] = value
        scored.append(CaseScore(case.case_id, scores))
    return EvalReport(
        strategy=ckpt.strategy,
        cohort_tag=cohort.cohort_tag,
        label_names=dict(cohort.organ_names()),
        cases=tuple(scored),
        means=_organ_means(scored),
    )


def mark_significance(report: EvalReport, baseline: EvalReport) -> EvalReport:
    """Flag organs where the report significantly improves on the baseline."""
    marks: dict[int, bool] = {}
    for organ in report.means:
        if organ not in baseline.means:
            continue
        xs = report.organ_scores(organ)
        ys = baseline.organ_scores(organ)
        _, p = mann_whitney(xs, ys)
        marks[organ] = bool(p < ALPHA and report.means[organ] > baseline.means[organ])
    return replace(report, significant=marks)


def report_to_json(report: EvalReport) -> str:
    payload = {
        "strategy": report.strategy,
        "cohort_tag": report.cohort_tag,
        "label_names": {str(k): v for k, v in sorted(report.label_names.items())},
        "cases": [
            {"case_id": c.case_id,
             "scores": {str(k): v for k, v in sorted(c.scores.items())}}
            for c in report.cases
        ],
        "means": {str(k): v for k, v in sorted(report.means.items())},
        "significant": (
            None if report.significant is None
            else {str(k): v for k, v in sorted(report.significant.items())}
        ),
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> EvalReport:
    payload = json.loads(text)
    return EvalReport(
        strategy=payload["strategy"],
        cohort_tag=payload["cohort_tag"],
        label_names={int(k): v for k, v in payload["label_names"].items()},
        cases=tuple(
            CaseScore(c["case_id"], {int(k): v for k, v in c["scores"].items()})
            for c in payload["cases"]
        ),
        means={int(k): v for k, v in payload["means"].items()},
        significant=(
            None if payload.get("significant") is None
            else {int(k): v for k, v in payload["significant"].items()}
        ),
    )


def _percent(value: float) -> str:
    return str(int(math.floor(value * 100.0 + 0.5)))


def render_table(reports, baseline: str) -> tuple[str, str]:
    """Rows per strategy, columns per organ, cohort cells joined by "/".

    Returns (text table, CSV). A dagger marks means that improve on the
    baseline strategy with Mann-Whitney p < 0.05 on the same cohort.
    """
    reports = list(reports)
    if not reports:
        raise ValidationError("no reports to render")
    names = reports[0].label_names
    for rep in reports[1:]:
        if rep.label_names != names:
            raise ValidationError("reports cover different organ sets")
    strategies = list(dict.fromkeys(r.strategy for r in reports))
    cohorts = list(dict.fromkeys(r.cohort_tag for r in reports))
    if baseline not in strategies:
        raise ValidationError(f"baseline {baseline!r} not among the reports")
    by_key = {(r.strategy, r.cohort_tag): r for r in reports}
    organ_ids = sorted(names)

    marked: dict[tuple[str, str], EvalReport] = {}
    for key, rep in by_key.items():
        base = by_key.get((baseline, key[1]))
        if base is not None and key[0] != baseline:
            marked[key] = mark_significance(rep, base)
        else:
            marked[key] = rep

    headers = ["strategy"] + [names[o] for o in organ_ids]
    rows = []
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf, lineterminator="\n")
    writer.writerow(["strategy", "cohort", "organ", "mean_dsc", "significant"])
    for strategy in strategies:
        cells = [strategy]
        for organ in organ_ids:
            parts = []
            for cohort in cohorts:
                rep = marked.get((strategy, cohort))
                if rep is None:
                    continue
                if organ not in rep.means:
                    parts.append("-")
                    writer.writerow([strategy, cohort, names[organ], "", ""])
                    continue
                flag = bool(rep.significant and rep.significant.get(organ))
                parts.append(_percent(rep.means[organ]) + ("†" if flag else ""))
                writer.writerow([
                    strategy, cohort, names[organ],
                    f"{rep.means[organ]:.6f}", str(flag).lower(),
                ])
            cells.append("/".join(parts))
        rows.append(cells)

    widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n", csv_buf.getvalue()
