import itertools
import math

import numpy as np
import pytest

from psat.errors import SplitLeakError, ValidationError
from psat.evaluation import (
    CaseScore,
    EvalReport,
    dsc,
    evaluate,
    mann_whitney,
    mark_significance,
    render_table,
)
from psat.nnet import Checkpoint, UNetConfig, init_params
from psat.phantom import Cohort
from psat.plan import TrainingPlan
from psat.volumes import Case, LabelMap, Spacing, Volume

SP = Spacing(1.0, 1.0, 1.0)


def lm(arr):
    return LabelMap(np.asarray(arr, np.uint16), SP)


def brute_dsc(a, b, organ):
    inter = size_a = size_b = 0
    for pa, pb in zip(a.labels.ravel(), b.labels.ravel()):
        if pa == organ:
            size_a += 1
        if pb == organ:
            size_b += 1
        if pa == organ and pb == organ:
            inter += 1
    if size_a + size_b == 0:
        return None
    return 2.0 * inter / (size_a + size_b)


class TestDsc:
    def test_identity_is_one(self):
        arr = np.zeros((4, 4, 4), np.uint16)
        arr[1:3, 1:3, 1:3] = 2
        assert dsc(lm(arr), lm(arr), 2) == 1.0

    def test_disjoint_is_zero(self):
        a = np.zeros((4, 4, 4), np.uint16)
        b = np.zeros((4, 4, 4), np.uint16)
        a[0, 0, 0] = 1
        b[3, 3, 3] = 1
        assert dsc(lm(a), lm(b), 1) == 0.0

    def test_shifted_cube_overlap(self):
        # 2x2x2 cubes shifted one voxel along x: overlap 4 -> 2*4/16
        a = np.zeros((4, 4, 4), np.uint16)
        b = np.zeros((4, 4, 4), np.uint16)
        a[0:2, 0:2, 0:2] = 1
        b[0:2, 0:2, 1:3] = 1
        assert dsc(lm(a), lm(b), 1) == 0.5

    def test_both_empty_is_absent(self):
        z = np.zeros((4, 4, 4), np.uint16)
        assert dsc(lm(z), lm(z), 5) is None

    def test_one_empty_is_zero(self):
        a = np.zeros((4, 4, 4), np.uint16)
        a[1, 1, 1] = 3
        z = np.zeros((4, 4, 4), np.uint16)
        assert dsc(lm(a), lm(z), 3) == 0.0
        assert dsc(lm(z), lm(a), 3) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            dsc(lm(np.zeros((4, 4, 4), np.uint16)),
                lm(np.zeros((4, 4, 5), np.uint16)), 1)

    def test_matches_brute_force_on_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            a = lm(rng.integers(0, 3, size=(8, 8, 8)))
            b = lm(rng.integers(0, 3, size=(8, 8, 8)))
            for organ in (1, 2):
                assert dsc(a, b, organ) == brute_dsc(a, b, organ)

    def test_symmetry_and_permutation_invariance(self):
        rng = np.random.default_rng(8)
        a = rng.integers(0, 2, size=(6, 6, 6)).astype(np.uint16)
        b = rng.integers(0, 2, size=(6, 6, 6)).astype(np.uint16)
        assert dsc(lm(a), lm(b), 1) == dsc(lm(b), lm(a), 1)
        perm = rng.permutation(a.size)
        pa = a.ravel()[perm].reshape(a.shape)
        pb = b.ravel()[perm].reshape(b.shape)
        assert dsc(lm(pa), lm(pb), 1) == dsc(lm(a), lm(b), 1)


def brute_mw(xs, ys):
    """Full enumeration over which pooled positions are assigned to xs."""
    pooled = list(xs) + list(ys)
    m = len(xs)

    def u_of(sel):
        sx = [pooled[i] for i in sel]
        sy = [pooled[i] for i in range(len(pooled)) if i not in sel]
        return sum((x > y) + 0.5 * (x == y) for x in sx for y in sy)

    u_obs = sum((x > y) + 0.5 * (x == y) for x in xs for y in ys)
    center = m * len(ys) / 2.0
    hits = total = 0
    for sel in itertools.combinations(range(len(pooled)), m):
        total += 1
        if abs(u_of(sel) - center) >= abs(u_obs - center) - 1e-12:
            hits += 1
    return u_obs, hits / total


class TestMannWhitney:
    def test_frozen_example(self):
        u, p = mann_whitney([1, 2], [3, 4])
        assert u == 0.0
        assert p == pytest.approx(2 / 6, abs=1e-15)

    def test_identical_samples_have_no_evidence(self):
        u, p = mann_whitney([0.4, 0.7, 0.9], [0.4, 0.7, 0.9])
        assert u == 4.5
        assert p >= 0.99

    def test_u_complement_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            m = int(rng.integers(1, 8))
            n = int(rng.integers(1, 8))
            xs = rng.integers(0, 4, size=m)  # coarse grid forces ties
            ys = rng.integers(0, 4, size=n)
            u_xy, _ = mann_whitney(xs, ys)
            u_yx, _ = mann_whitney(ys, xs)
            assert u_xy + u_yx == m * n

    def test_exact_matches_enumeration_up_to_six(self):
        rng = np.random.default_rng(3)
        for m in range(1, 7):
            for n in range(1, 7):
                for tied in (False, True):
                    if tied:
                        xs = rng.integers(0, 3, size=m).astype(float)
                        ys = rng.integers(0, 3, size=n).astype(float)
                    else:
                        xs = rng.normal(size=m)
                        ys = rng.normal(size=n)
                    u, p = mann_whitney(xs, ys)
                    u_ref, p_ref = brute_mw(list(xs), list(ys))
                    assert u == u_ref
                    assert abs(p - p_ref) < 1e-12, (m, n, tied)

    def test_extreme_separation_significant(self):
        xs = np.linspace(1.0, 2.0, 20)
        ys = np.linspace(-2.0, -1.0, 20)
        u, p = mann_whitney(xs, ys)
        assert u == 400.0
        assert p < 0.05

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            mann_whitney([], [1.0])
        with pytest.raises(ValidationError):
            mann_whitney([1.0], [])

    def test_approximation_matches_scipy(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(11)
        for _ in range(20):
            xs = np.round(rng.normal(size=21), 1)  # rounding makes ties
            ys = np.round(rng.normal(0.3, size=20), 1)
            u, p = mann_whitney(xs, ys)  # 21*20 = 420 -> approximation
            ref = scipy_stats.mannwhitneyu(
                xs, ys, alternative="two-sided", method="asymptotic",
                use_continuity=True,
            )
            assert u == pytest.approx(float(ref.statistic), abs=1e-9)
            assert p == pytest.approx(float(ref.pvalue), abs=1e-9)

    def test_approximation_close_to_exact_near_switchover(self):
        rng = np.random.default_rng(13)
        xs = rng.normal(size=15)
        ys = rng.normal(0.5, size=15)
        u, _ = mann_whitney(xs, ys)
        from psat.evaluation import _approx_two_sided, _exact_two_sided
        exact = _exact_two_sided(np.sort(xs), np.sort(ys), u)
        approx = _approx_two_sided(xs, ys, u)
        assert abs(exact - approx) < 0.02


def cube_case(case_id, organ_voxels, shape=(10, 10, 10), tag="t"):
    vol = np.zeros(shape, np.float32)
    lab = np.zeros(shape, np.uint16)
    for organ, voxels in organ_voxels.items():
        for v in voxels:
            lab[v] = organ
            vol[v] = 100.0
    return Case(case_id, Volume(vol, SP), LabelMap(lab, SP), cohort_tag=tag)


def mini_cohort(tag="t", order=None):
    cases = {
        "t000": cube_case("t000", {1: [(2, 2, 2), (2, 2, 3)], 2: [(7, 7, 7)]}, tag=tag),
        "t001": cube_case("t001", {1: [(4, 4, 4)]}, tag=tag),
        "t002": cube_case("t002", {2: [(5, 5, 5), (5, 5, 6)]}, tag=tag),
    }
    names = order or ["t000", "t001", "t002"]
    return Cohort(
        cohort_tag=tag,
        cases=[cases[n] for n in names],
        splits={"train": [], "val": [], "test": list(names)},
    )


def eval_plan():
    return TrainingPlan(target_spacing=(1.0, 1.0, 1.0), patch_size=(8, 8, 8),
                        num_levels=1, num_classes=3, base_channels=2,
                        clip_lo=-200.0, clip_hi=200.0)


def zero_ckpt(strategy="PaSaAdTo", train_ids=()):
    cfg = UNetConfig(patch_size=(8, 8, 8), num_levels=1, base_channels=2,
                     num_classes=3)
    params = init_params(cfg, 0)
    for name in params.order:
        params.tensors[name][:] = 0
    meta = {"background": 0.0, "train_case_ids": list(train_ids)}
    return Checkpoint(cfg, params, plan_hash="x", strategy=strategy, meta=meta)


class TestEvaluate:
    def test_constant_background_predictor_scores_zero(self):
        report = evaluate(zero_ckpt(), mini_cohort(), eval_plan())
        assert report.strategy == "PaSaAdTo"
        assert report.cohort_tag == "t"
        assert set(report.means) == {1, 2}
        assert report.means[1] == 0.0
        assert report.means[2] == 0.0

    def test_oracle_stub_scores_one(self, monkeypatch):
        import psat.evaluation as ev

        def perfect(ckpt, case, window_batch=4):
            return case.labels

        monkeypatch.setattr(ev, "infer", perfect)
        report = evaluate(zero_ckpt(), mini_cohort(), eval_plan())
        assert all(v == 1.0 for v in report.means.values())

    def test_absent_organ_missing_from_case_scores(self):
        report = evaluate(zero_ckpt(), mini_cohort(), eval_plan())
        by_id = {c.case_id: c for c in report.cases}
        assert 2 not in by_id["t001"].scores  # organ 2 absent from t001
        assert 1 in by_id["t001"].scores

    def test_split_leak_detected(self):
        ckpt = zero_ckpt(train_ids=["t001"])
        with pytest.raises(SplitLeakError, match="t001"):
            evaluate(ckpt, mini_cohort(), eval_plan())

    def test_means_match_independent_recomputation(self):
        report = evaluate(zero_ckpt(), mini_cohort(), eval_plan())
        for organ in report.means:
            values = [c.scores[organ] for c in report.cases if organ in c.scores]
            assert report.means[organ] == pytest.approx(sum(values) / len(values))

    def test_case_order_does_not_change_means(self):
        a = evaluate(zero_ckpt(), mini_cohort(), eval_plan())
        b = evaluate(zero_ckpt(), mini_cohort(order=["t002", "t000", "t001"]),
                     eval_plan())
        assert a.means == b.means

    def test_report_rejects_inconsistent_means(self):
        score = CaseScore("c", {1: 0.5})
        with pytest.raises(ValidationError):
            EvalReport("s", "t", {1: "a"}, (score,), {1: 0.9})

    def test_case_score_range_checked(self):
        with pytest.raises(ValidationError):
            CaseScore("c", {1: 1.5})


def make_report(strategy, cohort, per_case, names=None):
    cases = tuple(CaseScore(f"{cohort}{i:03d}", dict(s)) for i, s in enumerate(per_case))
    pools = {}
    for c in cases:
        for organ, v in c.scores.items():
            pools.setdefault(organ, []).append(v)
    means = {o: sum(v) / len(v) for o, v in sorted(pools.items())}
    return EvalReport(strategy, cohort, names or {1: "alpha", 2: "beta"},
                      cases, means)


class TestRenderTable:
    def test_single_report_self_baseline_no_daggers(self):
        rep = make_report("PaSaAdTo", "p", [{1: 0.9, 2: 0.8}] * 3)
        text, csv_text = render_table([rep], "PaSaAdTo")
        assert "†" not in text
        assert "90" in text and "80" in text
        assert "alpha" in text and "beta" in text

    def test_identical_reports_no_daggers(self):
        scores = [{1: 0.6 + 0.01 * i} for i in range(6)]
        a = make_report("A", "p", scores, names={1: "alpha"})
        b = make_report("B", "p", scores, names={1: "alpha"})
        text, _ = render_table([a, b], "A")
        assert "†" not in text

    def test_clear_improvement_gets_dagger_everywhere(self):
        ones = [{1: 1.0, 2: 1.0}] * 20
        zeros = [{1: 0.0, 2: 0.0}] * 20
        good = make_report("NEW", "p", ones)
        base = make_report("BASE", "p", zeros)
        text, csv_text = render_table([base, good], "BASE")
        row = [l for l in text.splitlines() if l.startswith("NEW")][0]
        assert row.count("†") == 2
        assert "100†" in row
        base_row = [l for l in text.splitlines() if l.startswith("BASE")][0]
        assert "†" not in base_row
        assert "true" in csv_text

    def test_absent_organ_rendered_as_dash(self):
        rep = make_report("A", "p", [{1: 0.7}] * 3)  # organ 2 never present
        text, csv_text = render_table([rep], "A")
        row = [l for l in text.splitlines() if l.startswith("A")][0]
        assert row.split()[-1] == "-"
        assert ",beta,," in csv_text

    def test_cohort_cells_joined_by_slash(self):
        a = make_report("A", "ped", [{1: 0.92, 2: 0.5}] * 3)
        b = make_report("A", "int", [{1: 0.66, 2: 0.4}] * 3)
        text, _ = render_table([a, b], "A")
        row = [l for l in text.splitlines() if l.startswith("A")][0]
        assert "92/66" in row

    def test_mismatched_organ_sets_rejected(self):
        a = make_report("A", "p", [{1: 0.5}] * 2, names={1: "alpha"})
        b = make_report("B", "p", [{1: 0.5}] * 2, names={1: "gamma"})
        with pytest.raises(ValidationError):
            render_table([a, b], "A")

    def test_unknown_baseline_rejected(self):
        rep = make_report("A", "p", [{1: 0.5}] * 2)
        with pytest.raises(ValidationError):
            render_table([rep], "ZZZ")

    def test_csv_has_row_per_strategy_cohort_organ(self):
        a = make_report("A", "ped", [{1: 0.9, 2: 0.8}] * 3)
        b = make_report("A", "int", [{1: 0.7, 2: 0.6}] * 3)
        c = make_report("B", "ped", [{1: 0.5, 2: 0.4}] * 3)
        _, csv_text = render_table([a, b, c], "A")
        lines = [l for l in csv_text.splitlines() if l]
        assert lines[0] == "strategy,cohort,organ,mean_dsc,significant"
        assert len(lines) == 1 + 2 * 2 + 1 * 2

    def test_round_half_up_percent(self):
        rep = make_report("A", "p", [{1: 0.915}, {1: 0.915}])
        text, _ = render_table([rep], "A")
        assert "92" in text


class TestMarkSignificance:
    def test_marks_only_significant_improvements(self):
        good = make_report("N", "p", [{1: 1.0, 2: 0.5}] * 20)
        base = make_report("B", "p", [{1: 0.0, 2: 0.5}] * 20)
        marked = mark_significance(good, base)
        assert marked.significant == {1: True, 2: False}

    def test_significant_decline_not_marked(self):
        worse = make_report("N", "p", [{1: 0.0}] * 20)
        base = make_report("B", "p", [{1: 1.0}] * 20)
        marked = mark_significance(worse, base)
        assert marked.significant == {1: False}
