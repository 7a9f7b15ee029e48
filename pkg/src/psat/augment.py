"""Spatial and intensity augmentation.

Two named policies differ only in how far uniform scaling may shrink a
structure: the detail-preserving policy allows at most 29% volume
contraction, the contraction-aware policy up to 50%. Linear scale factors
are the cube roots of the remaining volume, sampled uniformly between the
lower bound and its reciprocal. Rotations are per-axis Euler angles within
+-30 degrees, intensity scaling is a global multiplier in [0.75, 1.25],
and mirroring is always disabled (segmenting left/right-flipped anatomy is
not a capability we want rewarded).

Spatial transforms resample the input with the inverse map
``x = R^T ((y - c) / s) + c`` about the grid center ``c``; samples falling
outside the grid clamp to the edge. Volumes interpolate trilinearly,
labels by nearest neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

ROTATION_MAX_DEG = 30.0
INTENSITY_RANGE = (0.75, 1.25)
P_SPATIAL = 0.2
P_INTENSITY = 0.2


@dataclass(frozen=True)
class AugmentPolicy:
    name: str
    max_volume_contraction: float
    rotation_max_deg: float = ROTATION_MAX_DEG
    intensity_range: tuple[float, float] = INTENSITY_RANGE
    p_spatial: float = P_SPATIAL
    p_intensity: float = P_INTENSITY
    mirror: bool = False  # kept explicit: never enabled

    def __post_init__(self) -> None:
        if not 0.0 <= self.max_volume_contraction < 1.0:
            raise ValidationError(
                f"max_volume_contraction must be in [0, 1), got {self.max_volume_contraction}"
            )
        if self.mirror:
            raise ValidationError("mirroring is not supported")

    @property
    def scale_lo(self) -> float:
        return (1.0 - self.max_volume_contraction) ** (1.0 / 3.0)

    @property
    def scale_hi(self) -> float:
        return 1.0 / self.scale_lo


def detail_policy() -> AugmentPolicy:
    """Scale jitter bounded at 29% volume contraction."""
    return AugmentPolicy("detail", 0.29)


def contraction_policy() -> AugmentPolicy:
    """Scale jitter reaching 50% volume contraction."""
    return AugmentPolicy("contraction", 0.50)


@dataclass(frozen=True)
class Transform:
    """One sampled augmentation, ready to apply to a patch."""

    apply_spatial: bool
    scale: float
    angles_deg: tuple[float, float, float]
    apply_intensity: bool
    intensity_mult: float


def sample_transform(policy: AugmentPolicy, rng: np.random.Generator) -> Transform:
    """Draw one transform. All values are drawn regardless of the apply
    flags so the random stream advances identically for every sample."""
    spatial = bool(rng.random() < policy.p_spatial)
    scale = float(rng.uniform(policy.scale_lo, policy.scale_hi))
    angles = tuple(float(a) for a in rng.uniform(
        -policy.rotation_max_deg, policy.rotation_max_deg, size=3))
    intensity = bool(rng.random() < policy.p_intensity)
    mult = float(rng.uniform(*policy.intensity_range))
    return Transform(spatial, scale, angles, intensity, mult)


def _rotation_matrix(angles_deg: tuple[float, float, float]) -> np.ndarray:
    """Compose per-axis rotations R_z @ R_y @ R_x in (z, y, x) index space."""
    az, ay, ax = (np.deg2rad(a) for a in angles_deg)
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])   # rotates the (y,x) plane
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])   # rotates the (z,x) plane
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])   # rotates the (z,y) plane
    return rz @ ry @ rx


def _source_coords(shape: tuple[int, ...], t: Transform) -> np.ndarray:
    """(3, N) input-space coordinates for every output voxel."""
    center = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=0)
    pts = (pts - center[:, None]) / t.scale
    pts = _rotation_matrix(t.angles_deg).T @ pts
    return pts + center[:, None]


def _gather_trilinear(vol: np.ndarray, pts: np.ndarray) -> np.ndarray:
    lows, highs, fracs = [], [], []
    for axis in range(3):
        n = vol.shape[axis]
        u = np.clip(pts[axis], 0.0, float(n - 1))
        i0 = np.minimum(np.floor(u).astype(np.int64), n - 1)
        lows.append(i0)
        highs.append(np.minimum(i0 + 1, n - 1))
        fracs.append(u - i0)
    out = np.zeros(pts.shape[1], dtype=np.float64)
    for bz in (0, 1):
        wz = fracs[0] if bz else 1.0 - fracs[0]
        iz = highs[0] if bz else lows[0]
        for by in (0, 1):
            wy = fracs[1] if by else 1.0 - fracs[1]
            iy = highs[1] if by else lows[1]
            for bx in (0, 1):
                wx = fracs[2] if bx else 1.0 - fracs[2]
                ix = highs[2] if bx else lows[2]
                out += wz * wy * wx * vol[iz, iy, ix]
    return out.reshape(vol.shape)


def _gather_nearest(lab: np.ndarray, pts: np.ndarray) -> np.ndarray:
    idx = []
    for axis in range(3):
        n = lab.shape[axis]
        i = np.floor(pts[axis] + 0.5).astype(np.int64)
        idx.append(np.clip(i, 0, n - 1))
    return lab[idx[0], idx[1], idx[2]].reshape(lab.shape)


def apply_transform(
    intensities: np.ndarray, labels: np.ndarray, t: Transform
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one transform to an aligned (intensity, label) patch pair.

    Returns new float32 / original-dtype arrays; inputs are not modified.
    """
    if intensities.shape != labels.shape:
        raise ValidationError("intensity and label patches must be aligned")
    x = intensities
    y = labels
    if t.apply_spatial:
        pts = _source_coords(x.shape, t)
        x = _gather_trilinear(x.astype(np.float64, copy=False), pts).astype(np.float32)
        y = _gather_nearest(y, pts)
    else:
        x = x.astype(np.float32, copy=True)
        y = y.copy()
    if t.apply_intensity:
        x = x * np.float32(t.intensity_mult)
    return x, y
