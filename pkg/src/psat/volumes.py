"""Volumetric containers and grid operations.

Axis order is (z, y, x) everywhere. Intensity volumes are float32, label
maps uint16. Resampling maps output voxel centers into input index space
(center-aligned), interpolates trilinearly for intensities and by nearest
neighbor for labels, and clamps at the edges. Crop/pad is centered.

Serialization uses a small little-endian binary container (.psv):
magic ``PSATVOL1``, u16 format version, u16 dtype tag (0 = float32,
1 = uint16), three u32 shape fields (z, y, x), three f32 spacing fields
(dz, dy, dx), then the raw voxel payload in C order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

PSV_MAGIC = b"PSATVOL1"
PSV_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<u2")}


@dataclass(frozen=True)
class Spacing:
    """Physical voxel size in millimetres, ordered (dz, dy, dx)."""

    dz: float
    dy: float
    dx: float

    def __post_init__(self) -> None:
        for name, value in (("dz", self.dz), ("dy", self.dy), ("dx", self.dx)):
            if not np.isfinite(value) or value <= 0:
                raise ValidationError(f"spacing {name} must be finite and positive, got {value!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dz, self.dy, self.dx], dtype=np.float64)

    def voxel_volume(self) -> float:
        """Volume of one voxel in cubic millimetres."""
        return float(self.dz * self.dy * self.dx)


def _check_grid(voxels: np.ndarray, kind: str) -> None:
    if voxels.ndim != 3:
        raise ValidationError(f"{kind} must be 3-dimensional, got shape {voxels.shape}")
    if any(s < 1 for s in voxels.shape):
        raise ValidationError(f"{kind} has an empty axis: shape {voxels.shape}")


@dataclass
class Volume:
    """A float32 intensity grid with physical spacing."""

    voxels: np.ndarray
    spacing: Spacing

    def __post_init__(self) -> None:
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        _check_grid(self.voxels, "volume")
        if not np.isfinite(self.voxels).all():
            raise ValidationError("volume contains non-finite voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]


@dataclass
class LabelMap:
    """A uint16 segmentation grid with physical spacing. 0 is background."""

    labels: np.ndarray
    spacing: Spacing

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.dtype.kind not in "ui":
            raise ValidationError(f"labels must be an integer array, got dtype {arr.dtype}")
        if arr.dtype != np.uint16:
            if arr.min(initial=0) < 0 or arr.max(initial=0) > np.iinfo(np.uint16).max:
                raise ValidationError("label values do not fit in uint16")
            arr = arr.astype(np.uint16)
        self.labels = np.ascontiguousarray(arr)
        _check_grid(self.labels, "label map")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def present_labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v != 0]


@dataclass
class Case:
    """One subject: intensity volume plus aligned labels.

    ``native_shape``/``native_spacing`` record the original grid when the
    case has been resampled for training, so predictions can be mapped back.
    """

    case_id: str
    volume: Volume
    labels: LabelMap
    cohort_tag: str = ""
    native_shape: tuple[int, int, int] | None = None
    native_spacing: Spacing | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.volume.shape != self.labels.shape:
            raise ValidationError(
                f"case {self.case_id!r}: volume shape {self.volume.shape} "
                f"!= labels shape {self.labels.shape}"
            )


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def _output_shape(shape: tuple[int, ...], spacing: Spacing, target: Spacing) -> tuple[int, int, int]:
    scaled = np.array(shape, dtype=np.float64) * spacing.as_array() / target.as_array()
    out = np.maximum(_round_half_up(scaled), 1)
    return int(out[0]), int(out[1]), int(out[2])


def _axis_coords(n_in: int, n_out: int, sp_in: float, sp_out: float) -> np.ndarray:
    """Input-space coordinates of output voxel centers along one axis."""
    j = np.arange(n_out, dtype=np.float64)
    return (j + 0.5) * (sp_out / sp_in) - 0.5


def _trilinear(voxels: np.ndarray, coords: tuple[np.ndarray, np.ndarray, np.ndarray]) -> np.ndarray:
    acc = None
    lows, highs, fracs = [], [], []
    for axis, u in enumerate(coords):
        n = voxels.shape[axis]
        u = np.clip(u, 0.0, float(n - 1))
        i0 = np.floor(u).astype(np.int64)
        i0 = np.minimum(i0, n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        lows.append(i0)
        highs.append(i1)
        fracs.append(u - i0)
    for bz in (0, 1):
        iz = lows[0] if bz == 0 else highs[0]
        wz = (1.0 - fracs[0]) if bz == 0 else fracs[0]
        for by in (0, 1):
            iy = lows[1] if by == 0 else highs[1]
            wy = (1.0 - fracs[1]) if by == 0 else fracs[1]
            for bx in (0, 1):
                ix = lows[2] if bx == 0 else highs[2]
                wx = (1.0 - fracs[2]) if bx == 0 else fracs[2]
                w = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                corner = voxels[iz[:, None, None], iy[None, :, None], ix[None, None, :]]
                term = w * corner
                acc = term if acc is None else acc + term
    return acc


def _nearest(grid: np.ndarray, coords: tuple[np.ndarray, np.ndarray, np.ndarray]) -> np.ndarray:
    idx = []
    for axis, u in enumerate(coords):
        n = grid.shape[axis]
        i = np.floor(u + 0.5).astype(np.int64)
        idx.append(np.clip(i, 0, n - 1))
    return grid[idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]


def resample(obj: Volume | LabelMap, target: Spacing, mode: str = "auto"):
    """Resample a grid to ``target`` spacing.

    Output extent is round(shape * spacing / target), at least 1 per axis.
    Volumes use trilinear interpolation (float64 accumulation), label maps
    nearest neighbor; ``mode`` may force ``"nearest"`` for a Volume but
    trilinear label interpolation is rejected. Resampling to the identical
    spacing returns a bit-identical copy.
    """
    if mode not in ("auto", "trilinear", "nearest"):
        raise ValidationError(f"unknown resample mode {mode!r}")
    is_labels = isinstance(obj, LabelMap)
    if is_labels and mode == "trilinear":
        raise ValidationError("label maps must be resampled with nearest-neighbor interpolation")
    grid = obj.labels if is_labels else obj.voxels
    out_shape = _output_shape(grid.shape, obj.spacing, target)
    coords = tuple(
        _axis_coords(grid.shape[a], out_shape[a], obj.spacing.as_array()[a], target.as_array()[a])
        for a in range(3)
    )
    if is_labels or mode == "nearest":
        out = _nearest(grid, coords)
        return LabelMap(out, target) if is_labels else Volume(out.astype(np.float32), target)
    out = _trilinear(grid.astype(np.float64, copy=False), coords)
    return Volume(out.astype(np.float32), target)


def _crop_pad_slices(n_in: int, n_out: int) -> tuple[slice, slice]:
    """(source slice into input, destination slice into output), centered.

    When the size difference is odd the extra voxel is taken from / added to
    the high-index side.
    """
    if n_out <= n_in:
        lo = (n_in - n_out) // 2
        return slice(lo, lo + n_out), slice(0, n_out)
    lo = (n_out - n_in) // 2
    return slice(0, n_in), slice(lo, lo + n_in)


def crop_or_pad(obj: Volume | LabelMap, shape: tuple[int, int, int], fill: float = 0.0):
    """Center-crop or center-pad to ``shape``.

    Volumes pad with ``fill``; label maps always pad with background 0.
    """
    if len(shape) != 3 or any(int(s) < 1 for s in shape):
        raise ValidationError(f"target shape must be 3 positive ints, got {shape!r}")
    shape = tuple(int(s) for s in shape)  # type: ignore[assignment]
    is_labels = isinstance(obj, LabelMap)
    grid = obj.labels if is_labels else obj.voxels
    if is_labels:
        out = np.zeros(shape, dtype=grid.dtype)
    else:
        out = np.full(shape, np.float32(fill), dtype=grid.dtype)
    src = []
    dst = []
    for axis in range(3):
        s, d = _crop_pad_slices(grid.shape[axis], shape[axis])
        src.append(s)
        dst.append(d)
    out[tuple(dst)] = grid[tuple(src)]
    return LabelMap(out, obj.spacing) if is_labels else Volume(out, obj.spacing)


def normalize_ct(vol: Volume, clip_lo: float, clip_hi: float, mean: float, std: float) -> Volume:
    """Clamp to [clip_lo, clip_hi], subtract mean, divide by std."""
    if not (np.isfinite(clip_lo) and np.isfinite(clip_hi)) or clip_lo >= clip_hi:
        raise ValidationError(f"invalid clip window [{clip_lo!r}, {clip_hi!r}]")
    if not np.isfinite(std) or std <= 0:
        raise ValidationError(f"std must be finite and positive, got {std!r}")
    if not np.isfinite(mean):
        raise ValidationError(f"mean must be finite, got {mean!r}")
    x = np.clip(vol.voxels, np.float32(clip_lo), np.float32(clip_hi))
    x = (x.astype(np.float64) - mean) / std
    return Volume(x.astype(np.float32), vol.spacing)


def write_psv(path: str | Path, obj: Volume | LabelMap) -> None:
    """Write a Volume or LabelMap to a .psv file."""
    path = Path(path)
    is_labels = isinstance(obj, LabelMap)
    grid = obj.labels if is_labels else obj.voxels
    tag = 1 if is_labels else 0
    payload = np.ascontiguousarray(grid.astype(_DTYPE_TAGS[tag], copy=False))
    sp = obj.spacing
    header = PSV_MAGIC + struct.pack(
        "<HH3I3f", PSV_VERSION, tag, grid.shape[0], grid.shape[1], grid.shape[2],
        sp.dz, sp.dy, sp.dx,
    )
    path.write_bytes(header + payload.tobytes())


def read_psv(path: str | Path) -> Volume | LabelMap:
    """Read a .psv file, validating magic, version, and payload size."""
    path = Path(path)
    raw = path.read_bytes()
    head_len = len(PSV_MAGIC) + struct.calcsize("<HH3I3f")
    if len(raw) < head_len:
        raise FormatError(f"{path}: truncated header")
    if raw[: len(PSV_MAGIC)] != PSV_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    version, tag, nz, ny, nx, dz, dy, dx = struct.unpack(
        "<HH3I3f", raw[len(PSV_MAGIC) : head_len]
    )
    if version != PSV_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    expected = nz * ny * nx * dtype.itemsize
    body = raw[head_len:]
    if len(body) != expected:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    grid = np.frombuffer(body, dtype=dtype).reshape(nz, ny, nx)
    spacing = Spacing(float(np.float32(dz)), float(np.float32(dy)), float(np.float32(dx)))
    if tag == 1:
        return LabelMap(grid.copy(), spacing)
    return Volume(grid.astype(np.float32), spacing)
