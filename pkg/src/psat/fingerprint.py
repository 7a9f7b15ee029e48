"""Dataset fingerprinting.

A fingerprint summarizes a list of cases: per-axis shape medians, per-axis
spacing median and 10th percentile, and intensity statistics of the pooled
foreground voxels (labels > 0): mean, std, and the 0.5 / 99.5 percentiles
used later as the normalization clip window. Percentiles use lower-value
interpolation so they are always actual sample values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .volumes import Case


@dataclass(frozen=True)
class DatasetFingerprint:
    n_cases: int
    median_shape: tuple[float, float, float]
    spacing_median: tuple[float, float, float]
    spacing_p10: tuple[float, float, float]
    fg_mean: float
    fg_std: float
    fg_p005: float
    fg_p995: float
    labels: tuple[int, ...]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "DatasetFingerprint":
        d = json.loads(text)
        return DatasetFingerprint(
            n_cases=d["n_cases"],
            median_shape=tuple(d["median_shape"]),
            spacing_median=tuple(d["spacing_median"]),
            spacing_p10=tuple(d["spacing_p10"]),
            fg_mean=d["fg_mean"],
            fg_std=d["fg_std"],
            fg_p005=d["fg_p005"],
            fg_p995=d["fg_p995"],
            labels=tuple(d["labels"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: str | Path) -> "DatasetFingerprint":
        return DatasetFingerprint.from_json(Path(path).read_text())


def compute_fingerprint(cases: list[Case]) -> DatasetFingerprint:
    """Summarize shapes, spacings, and foreground intensities of ``cases``."""
    if not cases:
        raise ValidationError("fingerprint requires at least one case")
    shapes = np.array([c.volume.shape for c in cases], dtype=np.float64)
    spacings = np.array([c.volume.spacing.as_array() for c in cases])
    fg_chunks = []
    labels: set[int] = set()
    for c in cases:
        mask = c.labels.labels > 0
        if mask.any():
            fg_chunks.append(c.volume.voxels[mask])
        labels.update(c.labels.present_labels())
    if not fg_chunks:
        raise ValidationError("no foreground voxels in any case")
    fg = np.concatenate(fg_chunks)
    return DatasetFingerprint(
        n_cases=len(cases),
        median_shape=tuple(float(v) for v in np.median(shapes, axis=0)),
        spacing_median=tuple(float(v) for v in np.median(spacings, axis=0)),
        spacing_p10=tuple(
            float(v) for v in np.percentile(spacings, 10, axis=0, method="lower")
        ),
        fg_mean=float(np.mean(fg, dtype=np.float64)),
        fg_std=float(np.std(fg, dtype=np.float64)),
        fg_p005=float(np.percentile(fg, 0.5, method="lower")),
        fg_p995=float(np.percentile(fg, 99.5, method="lower")),
        labels=tuple(sorted(labels)),
    )
