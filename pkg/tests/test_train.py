import json
import math
from pathlib import Path

import numpy as np
import pytest

from psat.augment import contraction_policy, detail_policy
from psat.errors import TrainingError, ValidationError
from psat.nnet import Checkpoint, UNetConfig, forward, init_params, load_checkpoint, save_checkpoint
from psat.plan import TrainingPlan
from psat.seeds import make_rng
from psat.train import (
    PatchSampler,
    RunResult,
    TrainSchedule,
    TransferSpec,
    infer,
    poly_lr,
    rehearsal_pick,
    train_direct,
    transfer,
)
from psat.volumes import Case, LabelMap, Spacing, Volume

SP = Spacing(1.25, 1.25, 1.25)


def blob_case(case_id="c0", shape=(16, 16, 16), center=(8, 8, 8), radius=4.0,
              label=1, value=2.0, num_blobs=1, native=None):
    zz, yy, xx = np.indices(shape)
    vol = np.zeros(shape, np.float32)
    lab = np.zeros(shape, np.uint16)
    centers = [center] if num_blobs == 1 else [center, (4, 4, 4)]
    for i, c in enumerate(centers):
        mask = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= radius ** 2
        vol[mask] = value
        lab[mask] = label + i
    case = Case(case_id, Volume(vol, SP), LabelMap(lab, SP))
    if native:
        case.native_shape, case.native_spacing = native
    return case


def tiny_plan(**over):
    kw = dict(target_spacing=(1.25, 1.25, 1.25), patch_size=(16, 16, 16),
              num_levels=1, num_classes=2, base_channels=4,
              clip_lo=-3.0, clip_hi=3.0)
    kw.update(over)
    return TrainingPlan(**kw)


class TestPolyLR:
    def test_endpoints_exact(self):
        s = TrainSchedule(lr0=1e-2, epochs=50)
        assert abs(poly_lr(s, 0) - 1e-2) <= 1e-12
        assert abs(poly_lr(s, 50) - 1e-5) <= 1e-12

    def test_strictly_decreasing(self):
        s = TrainSchedule(epochs=37)
        values = [poly_lr(s, e) for e in range(38)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_midpoint_value(self):
        # hand evaluation: 0.5^0.9 = 0.5358867, offset form gives 5.3635e-3
        s = TrainSchedule(lr0=1e-2, epochs=100)
        want = 1e-5 + (1e-2 - 1e-5) * 0.5 ** 0.9
        assert poly_lr(s, 50) == pytest.approx(want, rel=1e-12)
        assert want == pytest.approx(5.3635e-3, abs=1e-6)

    def test_epoch_out_of_range(self):
        s = TrainSchedule(epochs=10)
        with pytest.raises(ValidationError):
            poly_lr(s, -1)
        with pytest.raises(ValidationError):
            poly_lr(s, 11)

    def test_schedule_invariants(self):
        with pytest.raises(ValidationError):
            TrainSchedule(lr0=1e-5, lr_end=1e-2)
        with pytest.raises(ValidationError):
            TrainSchedule(epochs=0)


class TestTransferSpec:
    def test_identity_mode_has_empty_grids(self):
        spec = TransferSpec("o")
        assert spec.lr0_grid == () and spec.epochs_grid == () and spec.replay_grid == ()

    def test_finetune_drops_replay_grid(self):
        spec = TransferSpec("p")
        assert spec.replay_grid == ()
        assert len(spec.grid_points()) == 6

    def test_rehearsal_full_grid(self):
        assert len(TransferSpec("m").grid_points()) == 18

    def test_bad_mode(self):
        with pytest.raises(ValidationError):
            TransferSpec("x")

    def test_grids_must_stay_inside_paper_intervals(self):
        with pytest.raises(ValidationError):
            TransferSpec("p", lr0_grid=(5e-3,))
        with pytest.raises(ValidationError):
            TransferSpec("p", epochs_grid=(100,))
        with pytest.raises(ValidationError):
            TransferSpec("m", replay_grid=(2.0,))


class TestRehearsalPick:
    @pytest.mark.parametrize("ratio", [0.25, 0.5, 1.0])
    def test_adult_fraction_matches_odds(self, ratio):
        rng = np.random.default_rng(42)
        draws = sum(rehearsal_pick(rng, ratio) for _ in range(10_000))
        assert draws / 10_000 == pytest.approx(ratio / (1 + ratio), abs=0.02)


class TestPatchSampler:
    def test_forced_patches_contain_foreground(self):
        cases = [blob_case("a"), blob_case("b", center=(3, 12, 5), radius=2.5)]
        sampler = PatchSampler(cases, (8, 8, 8), fill=-3.0)
        rng = make_rng(0, "t")
        for _ in range(50):
            _, lab = sampler.sample_forced(rng)
            assert lab.shape == (8, 8, 8)
            assert (lab > 0).any()

    def test_uniform_patch_shape(self):
        sampler = PatchSampler([blob_case()], (8, 8, 8), fill=0.0)
        vol, lab = sampler.sample_uniform(make_rng(1, "t"))
        assert vol.shape == lab.shape == (8, 8, 8)

    def test_small_case_padded_with_fill(self):
        case = blob_case(shape=(6, 6, 6), center=(3, 3, 3), radius=2.0)
        sampler = PatchSampler([case], (8, 8, 8), fill=-3.0)
        vol, lab = sampler.sample_uniform(make_rng(2, "t"))
        assert vol.shape == (8, 8, 8)
        assert (vol == -3.0).sum() == 8 ** 3 - 6 ** 3
        assert lab.max() >= 1  # blob survives, padding is background

    def test_draws_deterministic(self):
        sampler = PatchSampler([blob_case()], (8, 8, 8), fill=0.0)
        a = sampler.sample_forced(make_rng(3, "t"))
        b = sampler.sample_forced(make_rng(3, "t"))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def quick_schedule(epochs=1, steps=2):
    return TrainSchedule(epochs=epochs, steps_per_epoch=steps)


class TestTrainDirect:
    def test_bookkeeping_counts(self, tmp_path):
        plan = tiny_plan()
        cases = [blob_case()]
        result = train_direct(plan, cases, cases, detail_policy(),
                              quick_schedule(1, 2), seed=0, out_dir=tmp_path / "r")
        assert result.n_patches == 4
        assert result.n_steps == 2
        assert len(result.train_loss) == 1
        assert len(result.val_dsc) == 1

    def test_same_seed_same_losses(self, tmp_path):
        plan = tiny_plan()
        cases = [blob_case()]
        a = train_direct(plan, cases, cases, detail_policy(),
                         quick_schedule(1, 3), seed=5, out_dir=tmp_path / "a")
        b = train_direct(plan, cases, cases, detail_policy(),
                         quick_schedule(1, 3), seed=5, out_dir=tmp_path / "b")
        assert a.train_loss == b.train_loss
        assert a.val_dsc == b.val_dsc
        assert (Path(a.checkpoint_path).read_bytes()
                == Path(b.checkpoint_path).read_bytes())

    def test_spacing_mismatch_rejected(self, tmp_path):
        plan = tiny_plan(target_spacing=(1.0, 1.0, 1.0))
        cases = [blob_case()]  # built at 1.25mm
        with pytest.raises(ValidationError, match="preprocess"):
            train_direct(plan, cases, cases, detail_policy(),
                         quick_schedule(), out_dir=tmp_path / "r")

    def test_batch_size_enforced(self, tmp_path):
        plan = tiny_plan(batch_size=3)
        cases = [blob_case()]
        with pytest.raises(TrainingError, match="batch"):
            train_direct(plan, cases, cases, detail_policy(),
                         quick_schedule(), out_dir=tmp_path / "r")

    def test_metrics_log_one_line_per_epoch(self, tmp_path):
        plan = tiny_plan()
        cases = [blob_case()]
        train_direct(plan, cases, cases, detail_policy(),
                     quick_schedule(2, 1), seed=1, out_dir=tmp_path / "r",
                     label_names={1: "blob"})
        lines = (tmp_path / "r" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert rec["epoch"] == 0
        assert rec["lr"] == poly_lr(quick_schedule(2, 1), 0)
        assert set(rec) >= {"loss", "ce", "dice", "val_dsc", "val_mean"}
        assert "blob" in rec["val_dsc"]

    def test_checkpoint_records_best_epoch_and_strategy(self, tmp_path):
        plan = tiny_plan()
        cases = [blob_case()]
        result = train_direct(plan, cases, cases, contraction_policy(),
                              quick_schedule(2, 1), seed=2,
                              out_dir=tmp_path / "r", strategy="PaSaAcTo")
        ckpt = load_checkpoint(result.checkpoint_path)
        assert ckpt.strategy == "PaSaAcTo"
        assert ckpt.plan_hash == plan.plan_hash()
        assert ckpt.meta["epoch"] == result.best_epoch
        assert ckpt.meta["policy"] == "contraction"
        assert tuple(ckpt.meta["target_spacing"]) == plan.target_spacing
        assert result.best_val == max(result.val_dsc)
        assert result.val_dsc[result.best_epoch] == result.best_val

    def test_overfit_reaches_useful_dsc(self, tmp_path):
        # scaled-down form of the sanity floor: a short run on one case
        # must push organ-patch validation DSC past 0.6
        plan = tiny_plan()
        cases = [blob_case(radius=4.5)]
        result = train_direct(plan, cases, cases, detail_policy(),
                              TrainSchedule(epochs=6, steps_per_epoch=10),
                              seed=3, out_dir=tmp_path / "r")
        assert result.best_val > 0.6


def make_base(tmp_path, seed=0):
    plan = tiny_plan(num_classes=3)
    cases = [blob_case(num_blobs=2, radius=3.5)]
    result = train_direct(plan, cases, cases, detail_policy(),
                          quick_schedule(1, 2), seed=seed,
                          out_dir=tmp_path / "base")
    return plan, cases, result


class TestTransfer:
    def test_identity_is_bitwise_copy(self, tmp_path):
        _, _, base = make_base(tmp_path)
        result = transfer(base.checkpoint_path, TransferSpec("o"), [], [],
                          out_dir=tmp_path / "t")
        assert (Path(result.checkpoint_path).read_bytes()
                == Path(base.checkpoint_path).read_bytes())
        assert result.chosen == {}
        assert result.train_loss == ()
        assert result.n_steps == 0

    def test_finetune_grid_winner_has_top_score(self, tmp_path):
        plan, cases, base = make_base(tmp_path)
        spec = TransferSpec("p", lr0_grid=(1e-3, 1e-4), epochs_grid=(200,))
        result = transfer(base.checkpoint_path, spec, cases, cases,
                          seed=1, out_dir=tmp_path / "t",
                          epochs_scale=0.005, steps_per_epoch=2)
        assert result.chosen in spec.grid_points()
        assert len(result.grid_scores) == 2
        assert all(result.best_val >= v for v in result.grid_scores.values())
        assert len(result.train_loss) == 1  # round(200 * 0.005)

    def test_rehearsal_requires_adult_cohort(self, tmp_path):
        _, cases, base = make_base(tmp_path)
        spec = TransferSpec("m", lr0_grid=(1e-4,), epochs_grid=(200,),
                            replay_grid=(1.0,))
        with pytest.raises(ValidationError, match="adult"):
            transfer(base.checkpoint_path, spec, cases, cases,
                     out_dir=tmp_path / "t")

    def test_rehearsal_runs_with_adult_cohort(self, tmp_path):
        _, cases, base = make_base(tmp_path)
        adult = [blob_case("ad", center=(5, 10, 10), radius=3.0)]
        spec = TransferSpec("m", lr0_grid=(1e-4,), epochs_grid=(200,),
                            replay_grid=(1.0,))
        result = transfer(base.checkpoint_path, spec, cases, cases, adult,
                          seed=2, out_dir=tmp_path / "t",
                          epochs_scale=0.005, steps_per_epoch=2)
        assert result.chosen == {"lr0": 1e-4, "epochs": 200, "replay_ratio": 1.0}
        assert result.n_steps == 2

    def test_transfer_checks_spacing(self, tmp_path):
        _, _, base = make_base(tmp_path)
        off = blob_case()
        off.volume.spacing = Spacing(2.0, 2.0, 2.0)
        spec = TransferSpec("p", lr0_grid=(1e-4,), epochs_grid=(200,))
        with pytest.raises(ValidationError, match="preprocess"):
            transfer(base.checkpoint_path, spec, [off], [off],
                     out_dir=tmp_path / "t", epochs_scale=0.005)


def zero_checkpoint(patch=(8, 8, 8), num_classes=3):
    cfg = UNetConfig(patch_size=patch, num_levels=1, base_channels=2,
                     num_classes=num_classes)
    params = init_params(cfg, 0)
    for name in params.order:
        params.tensors[name][:] = 0
    return Checkpoint(cfg, params, meta={"background": 0.0})


class TestInfer:
    def test_constant_model_gives_constant_labels(self):
        ckpt = zero_checkpoint()
        case = blob_case(shape=(12, 12, 12), center=(6, 6, 6))
        pred = infer(ckpt, case)
        assert pred.shape == (12, 12, 12)
        assert pred.labels.max() == 0

    def test_case_smaller_than_patch_keeps_shape(self):
        ckpt = zero_checkpoint()
        case = blob_case(shape=(5, 9, 6), center=(2, 4, 3), radius=1.5)
        assert infer(ckpt, case).shape == (5, 9, 6)

    def test_single_window_equals_whole_image_forward(self):
        cfg = UNetConfig(patch_size=(8, 8, 8), num_levels=1, base_channels=2,
                         num_classes=3)
        params = init_params(cfg, 4)
        ckpt = Checkpoint(cfg, params, meta={"background": 0.0})
        case = blob_case(shape=(8, 8, 8), center=(4, 4, 4), radius=2.5)
        x = case.volume.voxels[None, ..., None]
        direct = np.argmax(forward(cfg, params, x)[0], axis=-1).astype(np.uint16)
        assert np.array_equal(infer(ckpt, case).labels, direct)

    def test_overlapping_windows_cover_grid(self):
        cfg = UNetConfig(patch_size=(8, 8, 8), num_levels=1, base_channels=2,
                         num_classes=2)
        ckpt = Checkpoint(cfg, init_params(cfg, 5), meta={"background": 0.0})
        case = blob_case(shape=(12, 12, 12), center=(6, 6, 6))
        pred = infer(ckpt, case)
        assert pred.shape == (12, 12, 12)
        assert pred.labels.max() <= 1

    def test_prediction_restored_to_native_grid(self):
        ckpt = zero_checkpoint()
        case = blob_case(shape=(12, 12, 12), center=(6, 6, 6),
                         native=((15, 15, 15), Spacing(1.0, 1.0, 1.0)))
        pred = infer(ckpt, case)
        assert pred.shape == (15, 15, 15)
        assert pred.spacing == Spacing(1.0, 1.0, 1.0)
