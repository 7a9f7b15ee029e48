"""Training-plan derivation from a dataset fingerprint.

The plan fixes everything preprocessing and the network need: target
spacing (the fingerprint's per-axis spacing median), patch size, number of
resolution levels, channel widths, batch size, and the intensity
normalization window taken from foreground statistics.

Patch derivation: start from the median shape resampled to the target
spacing, round each axis down to a multiple of 2**levels, then shrink the
largest axis one multiple at a time until the patch fits the voxel budget.
Levels are the largest d <= 5 such that the smallest axis stays >= 4 after
d halvings and every axis is divisible by 2**d.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .fingerprint import DatasetFingerprint
from .volumes import Case, LabelMap, Spacing, Volume, crop_or_pad, normalize_ct, resample

DEFAULT_VOXEL_BUDGET = 32768  # 32**3
MAX_LEVELS = 5
MIN_BOTTLENECK = 4  # smallest axis after all halvings
DEFAULT_BASE_CHANNELS = 8
DEFAULT_BATCH_SIZE = 2
WIDTH_CAP_FACTOR = 8


@dataclass(frozen=True)
class TrainingPlan:
    target_spacing: tuple[float, float, float]
    patch_size: tuple[int, int, int]
    num_levels: int
    num_classes: int
    base_channels: int = DEFAULT_BASE_CHANNELS
    batch_size: int = DEFAULT_BATCH_SIZE
    clip_lo: float = -1000.0
    clip_hi: float = 1000.0
    norm_mean: float = 0.0
    norm_std: float = 1.0
    voxel_budget: int = DEFAULT_VOXEL_BUDGET

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValidationError(f"need >= 2 classes, got {self.num_classes}")
        if any(p % (2 ** self.num_levels) for p in self.patch_size):
            raise ValidationError(
                f"patch {self.patch_size} not divisible by 2**{self.num_levels}"
            )
        if min(self.patch_size) // (2 ** self.num_levels) < MIN_BOTTLENECK:
            raise ValidationError("patch too small for the requested level count")

    def spacing(self) -> Spacing:
        return Spacing(*self.target_spacing)

    def channels(self) -> tuple[int, ...]:
        """Encoder widths per level, doubling and capped at 8x base."""
        cap = WIDTH_CAP_FACTOR * self.base_channels
        return tuple(
            min(self.base_channels * (2 ** i), cap) for i in range(self.num_levels + 1)
        )

    def normalized_background(self) -> float:
        """Value that out-of-volume padding takes after normalization."""
        return (self.clip_lo - self.norm_mean) / self.norm_std

    def plan_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_json(self) -> str:
        d = asdict(self)
        d["plan_hash"] = self.plan_hash()
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "TrainingPlan":
        d = json.loads(text)
        d.pop("plan_hash", None)
        d["target_spacing"] = tuple(d["target_spacing"])
        d["patch_size"] = tuple(d["patch_size"])
        return TrainingPlan(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: str | Path) -> "TrainingPlan":
        return TrainingPlan.from_json(Path(path).read_text())


def _levels_for(patch: list[int], max_levels: int = MAX_LEVELS) -> int:
    d = 0
    while (
        d < max_levels
        and min(patch) // (2 ** (d + 1)) >= MIN_BOTTLENECK
        and all(p % (2 ** (d + 1)) == 0 for p in patch)
    ):
        d += 1
    return d


def derive_plan(
    fp: DatasetFingerprint,
    voxel_budget: int = DEFAULT_VOXEL_BUDGET,
    base_channels: int = DEFAULT_BASE_CHANNELS,
) -> TrainingPlan:
    if voxel_budget < MIN_BOTTLENECK ** 3:
        raise ValidationError(f"voxel budget {voxel_budget} too small")
    target = fp.spacing_median
    # median shape in voxels after resampling to the target spacing
    provisional = [
        max(int(np.floor(m * s / t)), MIN_BOTTLENECK)
        for m, s, t in zip(fp.median_shape, fp.spacing_median, target)
    ]
    # initial level estimate from the provisional extent
    d = 0
    while d < MAX_LEVELS and min(provisional) // (2 ** (d + 1)) >= MIN_BOTTLENECK:
        d += 1
    step = 2 ** d
    patch = [max((p // step) * step, step) for p in provisional]
    # shrink the largest axis (first axis wins ties) until within budget
    while int(np.prod(patch)) > voxel_budget:
        axis = int(np.argmax(patch))
        if patch[axis] - step < step:
            if d == 0:
                raise ValidationError(
                    f"cannot fit patch within voxel budget {voxel_budget}"
                )
            d -= 1
            step = 2 ** d
            patch = [max((p // step) * step, step) for p in patch]
            continue
        patch[axis] -= step
    d = _levels_for(patch)
    return TrainingPlan(
        target_spacing=tuple(float(t) for t in target),
        patch_size=tuple(int(p) for p in patch),
        num_levels=d,
        num_classes=(max(fp.labels) + 1) if fp.labels else 2,
        base_channels=base_channels,
        clip_lo=fp.fg_p005,
        clip_hi=fp.fg_p995,
        norm_mean=fp.fg_mean,
        norm_std=max(fp.fg_std, 1e-6),
        voxel_budget=voxel_budget,
    )


def preprocess(case: Case, plan: TrainingPlan) -> Case:
    """Resample to the plan's spacing and normalize intensities.

    The returned case records the native grid so predictions can be mapped
    back. Labels outside the plan's class range are rejected.
    """
    top = int(case.labels.labels.max(initial=0))
    if top >= plan.num_classes:
        raise ValidationError(
            f"case {case.case_id!r} has label {top}, plan covers {plan.num_classes} classes"
        )
    target = plan.spacing()
    vol = resample(case.volume, target)
    lab = resample(case.labels, target)
    vol = normalize_ct(vol, plan.clip_lo, plan.clip_hi, plan.norm_mean, plan.norm_std)
    return Case(
        case.case_id,
        vol,
        lab,
        cohort_tag=case.cohort_tag,
        native_shape=case.volume.shape,
        native_spacing=case.volume.spacing,
        meta=dict(case.meta),
    )


def restore_to_native(pred: LabelMap, processed: Case) -> LabelMap:
    """Map a prediction on the processed grid back to the case's native grid."""
    if processed.native_shape is None or processed.native_spacing is None:
        return pred
    back = resample(pred, processed.native_spacing)
    return crop_or_pad(back, processed.native_shape)


def patchify_background(plan: TrainingPlan, vol: Volume) -> Volume:
    """Pad helper: grow a volume to at least the plan's patch size."""
    shape = tuple(max(s, p) for s, p in zip(vol.shape, plan.patch_size))
    if shape == vol.shape:
        return vol
    return crop_or_pad(vol, shape, fill=plan.normalized_background())
