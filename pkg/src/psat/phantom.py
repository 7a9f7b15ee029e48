"""Synthetic abdominal phantom cohorts.

Each subject is a body ellipsoid of soft tissue in air with six ellipsoidal
organs. Two organ pairs share an intensity and differ mainly in size
(difficulty knob: a segmenter must learn size and context, not just
contrast), the other two organs have unique intensities (easy controls).

A pediatric-style cohort shrinks every organ by its ``volume_ratio``
(linearly by the cube root) inside a proportionally smaller body; an
internal-style cohort reuses that geometry with an intensity shift, more
noise, and its own spacing range, standing in for a held-out scanner.

All randomness flows from one integer seed per subject; regeneration is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError, ValidationError
from .seeds import derive_seed
from .volumes import Case, LabelMap, Spacing, Volume, read_psv, write_psv

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class OrganSpec:
    """One ellipsoidal organ.

    ``center_rel`` is the organ center in coordinates relative to the body
    bounding box ((0.5, 0.5, 0.5) is the body center), so organ positions
    scale with the body. ``radii_mm`` are adult semi-axes (z, y, x);
    ``volume_ratio`` is the contracted-to-adult volume ratio applied in
    cohorts with ``contracted=True``.
    """

    organ_id: int
    name: str
    center_rel: tuple[float, float, float]
    radii_mm: tuple[float, float, float]
    intensity_mean: float
    intensity_std: float = 8.0
    volume_ratio: float = 1.0

    def __post_init__(self) -> None:
        if self.organ_id < 1:
            raise ValidationError(f"organ_id must be >= 1, got {self.organ_id}")
        if any(r <= 0 for r in self.radii_mm):
            raise ValidationError(f"organ {self.name!r}: radii must be positive")
        if not 0 < self.volume_ratio <= 1:
            raise ValidationError(f"organ {self.name!r}: volume_ratio must be in (0, 1]")

    def adult_volume_mm3(self) -> float:
        rz, ry, rx = self.radii_mm
        return 4.0 / 3.0 * np.pi * rz * ry * rx


@dataclass(frozen=True)
class CohortSpec:
    """Generator settings for one cohort."""

    cohort_tag: str
    organs: tuple[OrganSpec, ...]
    body_radii_mm: tuple[float, float, float]
    grid_shape: tuple[int, int, int]
    spacing_choices: tuple[Spacing, ...]
    subject_scale: tuple[float, float]
    contracted: bool = False
    body_mean: float = 40.0
    air_value: float = -1000.0
    noise_std: float = 12.0
    intensity_shift: float = 0.0
    center_jitter_mm: float = 1.0

    def __post_init__(self) -> None:
        if not self.organs:
            raise ValidationError("cohort needs at least one organ")
        ids = [o.organ_id for o in self.organs]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate organ ids in cohort spec")
        lo, hi = self.subject_scale
        if not 0 < lo <= hi:
            raise ValidationError(f"bad subject_scale {self.subject_scale!r}")
        if not self.spacing_choices:
            raise ValidationError("cohort needs at least one spacing choice")

    def organ_names(self) -> dict[int, str]:
        return {o.organ_id: o.name for o in self.organs}


# Shared organ table. The two 320-intensity organs and the two -80 ones are
# 1.3x apart linearly; volume_ratio 0.455 (cube root 0.769) makes the
# contracted large member of each pair the same size as the adult small one.
_ORGAN_TABLE = (
    # id, name, center offset mm (z,y,x), semi-axes mm, mean, ratio
    (1, "prostate", (20.0, 18.0, 13.0), (19.29, 19.29, 19.29), 320.0, 0.10),
    (2, "kidney", (-15.0, -13.0, -10.0), (25.08, 25.08, 25.08), 320.0, 0.455),
    (3, "bladder", (8.0, 30.0, -20.0), (10.5, 10.5, 10.5), -80.0, 0.455),
    (4, "liver", (22.0, -27.0, 6.0), (13.65, 13.65, 13.65), -80.0, 0.455),
    (5, "spleen", (-25.0, 18.0, 20.0), (13.5, 12.5, 11.0), 200.0, 0.455),
    (6, "gut", (31.0, 2.0, -24.0), (7.0, 24.0, 7.0), 120.0, 0.455),
)

_ADULT_BODY = (52.0, 50.0, 48.0)
_CONTRACTED_FACTOR = 0.455 ** (1.0 / 3.0)


def _organs() -> tuple[OrganSpec, ...]:
    out = []
    for oid, name, center_mm, radii, mean, ratio in _ORGAN_TABLE:
        rel = tuple(c / (2.0 * b) + 0.5 for c, b in zip(center_mm, _ADULT_BODY))
        out.append(
            OrganSpec(oid, name, rel, radii, intensity_mean=mean, volume_ratio=ratio)
        )
    return tuple(out)


def default_adult_spec() -> CohortSpec:
    return CohortSpec(
        cohort_tag="adult",
        organs=_organs(),
        body_radii_mm=_ADULT_BODY,
        grid_shape=(80, 80, 80),
        spacing_choices=(
            Spacing(1.4375, 1.4375, 1.4375),
            Spacing(1.5, 1.5, 1.5),
            Spacing(1.5625, 1.5625, 1.5625),
        ),
        subject_scale=(0.96, 1.04),
    )


def default_pediatric_spec() -> CohortSpec:
    body = tuple(b * _CONTRACTED_FACTOR for b in _ADULT_BODY)
    return CohortSpec(
        cohort_tag="pediatric",
        organs=_organs(),
        body_radii_mm=body,  # type: ignore[arg-type]
        grid_shape=(80, 80, 80),
        spacing_choices=(
            Spacing(1.1875, 1.1875, 1.1875),
            Spacing(1.25, 1.25, 1.25),
            Spacing(1.3125, 1.3125, 1.3125),
        ),
        subject_scale=(0.94, 1.04),
        contracted=True,
    )


def default_internal_spec() -> CohortSpec:
    """Held-out-scanner stand-in: contracted geometry, shifted and noisier."""
    ped = default_pediatric_spec()
    return CohortSpec(
        cohort_tag="internal",
        organs=ped.organs,
        body_radii_mm=ped.body_radii_mm,
        grid_shape=(80, 80, 80),
        spacing_choices=(Spacing(1.125, 1.125, 1.125), Spacing(1.25, 1.25, 1.25)),
        subject_scale=(0.94, 1.04),
        contracted=True,
        noise_std=18.0,
        intensity_shift=40.0,
    )


def _ellipsoid_mask(shape, spacing: Spacing, center_mm, radii_mm) -> np.ndarray:
    axes = []
    for n, sp, c, r in zip(shape, spacing.as_array(), center_mm, radii_mm):
        coords = (np.arange(n, dtype=np.float64) + 0.5 - n / 2.0) * sp
        axes.append(((coords - c) / r) ** 2)
    q = axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :]
    return q <= 1.0


def generate_subject(spec: CohortSpec, subject_seed: int, case_id: str | None = None) -> Case:
    """Generate one subject deterministically from ``subject_seed``."""
    rng = np.random.Generator(np.random.PCG64(subject_seed))
    g = float(rng.uniform(*spec.subject_scale))
    spacing = spec.spacing_choices[int(rng.integers(len(spec.spacing_choices)))]
    shape = spec.grid_shape

    intensity = np.full(shape, spec.air_value, dtype=np.float64)
    labels = np.zeros(shape, dtype=np.uint16)

    body_radii = tuple(b * g for b in spec.body_radii_mm)
    body = _ellipsoid_mask(shape, spacing, (0.0, 0.0, 0.0), body_radii)
    intensity[body] = spec.body_mean

    organ_masks: list[tuple[OrganSpec, np.ndarray]] = []
    for organ in spec.organs:
        jitter = rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, size=3)
        center = tuple(
            (rel - 0.5) * 2.0 * b * g + j
            for rel, b, j in zip(organ.center_rel, spec.body_radii_mm, jitter)
        )
        factor = g * (organ.volume_ratio ** (1.0 / 3.0) if spec.contracted else 1.0)
        radii = tuple(r * factor for r in organ.radii_mm)
        mask = _ellipsoid_mask(shape, spacing, center, radii)
        if not mask.any():
            raise GenerationError(
                f"organ {organ.name!r} (id {organ.organ_id}) rasterized to zero voxels"
            )
        intensity[mask] = organ.intensity_mean
        labels[mask] = organ.organ_id
        organ_masks.append((organ, mask))

    tissue = body.copy()
    for _, mask in organ_masks:
        tissue |= mask
    intensity[tissue] += spec.intensity_shift

    intensity += rng.normal(0.0, spec.noise_std, size=shape)
    for organ, mask in organ_masks:
        if organ.intensity_std > 0:
            intensity[mask] += rng.normal(0.0, organ.intensity_std, size=int(mask.sum()))

    if case_id is None:
        case_id = f"{spec.cohort_tag}-{subject_seed:016x}"
    return Case(
        case_id,
        Volume(intensity.astype(np.float32), spacing),
        LabelMap(labels, spacing),
        cohort_tag=spec.cohort_tag,
    )


def organ_volume(labels: LabelMap, organ_id: int) -> float:
    """Physical volume in mm^3 of one label."""
    count = int((labels.labels == organ_id).sum())
    return count * labels.spacing.voxel_volume()


@dataclass
class Cohort:
    """A list of cases plus train/val/test membership."""

    cohort_tag: str
    cases: list[Case]
    splits: dict[str, list[str]]
    seed: int = 0
    spec: CohortSpec | None = None
    source: str = "generated"

    def __post_init__(self) -> None:
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate case ids in cohort")
        listed = [i for part in ("train", "val", "test") for i in self.splits.get(part, [])]
        if sorted(listed) != sorted(ids):
            raise ValidationError("splits do not partition the cohort's case ids")

    def __len__(self) -> int:
        return len(self.cases)

    def case_by_id(self, case_id: str) -> Case:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def split_cases(self, part: str) -> list[Case]:
        if part not in ("train", "val", "test"):
            raise ValidationError(f"unknown split {part!r}")
        wanted = self.splits.get(part, [])
        return [self.case_by_id(i) for i in wanted]

    def organ_names(self) -> dict[int, str]:
        if self.spec is not None:
            return self.spec.organ_names()
        found: dict[int, str] = {}
        for c in self.cases:
            for v in c.labels.present_labels():
                found.setdefault(v, f"organ{v}")
        return found


def generate_cohort(
    spec: CohortSpec,
    n: int,
    seed: int,
    split_fracs: tuple[float, float] = (0.7, 0.15),
) -> Cohort:
    """Generate ``n`` subjects with deterministic per-subject seeds.

    Split sizes: train = floor(n * split_fracs[0]), val = floor(n *
    split_fracs[1]), the rest test, assigned in index order. Two cohorts
    generated from the same seed share a per-index subject prefix, so
    growing ``n`` only appends cases.
    """
    if n < 1:
        raise ValidationError(f"cohort size must be >= 1, got {n}")
    f_train, f_val = split_fracs
    if f_train < 0 or f_val < 0 or f_train + f_val > 1:
        raise ValidationError(f"bad split fractions {split_fracs!r}")
    cases = []
    for i in range(n):
        sub_seed = derive_seed(seed, "subject", i)
        cases.append(generate_subject(spec, sub_seed, case_id=f"{spec.cohort_tag}{i:03d}"))
    n_train = int(np.floor(n * f_train))
    n_val = int(np.floor(n * f_val))
    ids = [c.case_id for c in cases]
    splits = {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }
    return Cohort(spec.cohort_tag, cases, splits, seed=seed, spec=spec)


def merge_balanced(a: Cohort, b: Cohort, seed: int, cohort_tag: str = "mixed") -> Cohort:
    """Merge two cohorts with equal per-source counts, split by split.

    Within each of train/val/test the larger side is subsampled (seeded,
    without replacement) to the smaller side's count, so no case changes
    its split role and the result has 2 * min(|a|, |b|) cases when both
    cohorts use the same split fractions.
    """
    if a.cohort_tag == b.cohort_tag:
        raise ValidationError("merge requires cohorts with distinct tags")
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "merge", a.cohort_tag, b.cohort_tag)))
    cases: list[Case] = []
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for part in ("train", "val", "test"):
        sides = []
        for cohort in (a, b):
            ids = list(cohort.splits.get(part, []))
            sides.append((cohort, ids))
        k = min(len(ids) for _, ids in sides)
        for cohort, ids in sides:
            if len(ids) > k:
                keep = set(rng.choice(len(ids), size=k, replace=False).tolist())
                ids = [x for j, x in enumerate(ids) if j in keep]
            for cid in ids:
                cases.append(cohort.case_by_id(cid))
                splits[part].append(cid)
    return Cohort(
        cohort_tag,
        cases,
        splits,
        seed=seed,
        spec=None,
        source=f"merged:{a.cohort_tag}+{b.cohort_tag}",
    )


def _spec_to_dict(spec: CohortSpec) -> dict:
    d = asdict(spec)
    d["spacing_choices"] = [[s.dz, s.dy, s.dx] for s in spec.spacing_choices]
    return d


def _spec_from_dict(d: dict) -> CohortSpec:
    organs = tuple(
        OrganSpec(
            organ_id=o["organ_id"],
            name=o["name"],
            center_rel=tuple(o["center_rel"]),
            radii_mm=tuple(o["radii_mm"]),
            intensity_mean=o["intensity_mean"],
            intensity_std=o["intensity_std"],
            volume_ratio=o["volume_ratio"],
        )
        for o in d["organs"]
    )
    return CohortSpec(
        cohort_tag=d["cohort_tag"],
        organs=organs,
        body_radii_mm=tuple(d["body_radii_mm"]),
        grid_shape=tuple(d["grid_shape"]),
        spacing_choices=tuple(Spacing(*s) for s in d["spacing_choices"]),
        subject_scale=tuple(d["subject_scale"]),
        contracted=d["contracted"],
        body_mean=d["body_mean"],
        air_value=d["air_value"],
        noise_std=d["noise_std"],
        intensity_shift=d["intensity_shift"],
        center_jitter_mm=d["center_jitter_mm"],
    )


def save_cohort(cohort: Cohort, out_dir: str | Path) -> Path:
    """Write cases as .psv pairs plus a JSON manifest; returns manifest path."""
    out_dir = Path(out_dir)
    case_dir = out_dir / "cases"
    case_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cohort.cases:
        vol_rel = f"cases/{case.case_id}_vol.psv"
        lab_rel = f"cases/{case.case_id}_lab.psv"
        write_psv(out_dir / vol_rel, case.volume)
        write_psv(out_dir / lab_rel, case.labels)
        entries.append({"id": case.case_id, "volume": vol_rel, "labels": lab_rel,
                        "cohort_tag": case.cohort_tag})
    manifest = {
        "format": "psat-cohort",
        "version": 1,
        "cohort_tag": cohort.cohort_tag,
        "seed": cohort.seed,
        "n": len(cohort),
        "source": cohort.source,
        "generator": _spec_to_dict(cohort.spec) if cohort.spec else None,
        "splits": cohort.splits,
        "cases": entries,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def load_cohort(in_dir: str | Path) -> Cohort:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / MANIFEST_NAME).read_text())
    if manifest.get("format") != "psat-cohort":
        raise ValidationError(f"{in_dir}: not a cohort directory")
    cases = []
    for entry in manifest["cases"]:
        vol = read_psv(in_dir / entry["volume"])
        lab = read_psv(in_dir / entry["labels"])
        if not isinstance(vol, Volume) or not isinstance(lab, LabelMap):
            raise ValidationError(f"{entry['id']}: wrong payload kinds on disk")
        cases.append(Case(entry["id"], vol, lab, cohort_tag=entry.get("cohort_tag", "")))
    spec = _spec_from_dict(manifest["generator"]) if manifest.get("generator") else None
    return Cohort(
        manifest["cohort_tag"],
        cases,
        {k: list(v) for k, v in manifest["splits"].items()},
        seed=manifest.get("seed", 0),
        spec=spec,
        source=manifest.get("source", "loaded"),
    )
