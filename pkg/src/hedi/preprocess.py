"""Scan-pair preflight checks, body-outline masks and grid resampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, InvalidConfig, InvalidSpacing
from .interp import sample
from .volume import INTENSITY, LABEL, MASK, SCALAR, Grid, ImageVolume

__all__ = [
    "PreprocessConfig", "Finding", "ValidationReport", "validate_scan_pair",
    "body_mask", "resample", "resample_to_grid", "downsample", "FOREIGN_OBJECT_NOTE",
]

FINDING_CODES = (
    "SliceCountMismatch", "SliceThicknessMismatch", "PixelSpacingMismatch",
    "FieldOfViewShift", "ScalingMismatch", "TruncationSuspected",
)

# Output voxels resampled per slab, bounding the coordinate array to ~100 MB.
_SLAB_VOXELS = 4_000_000

FOREIGN_OBJECT_NOTE = (
    "Arms or other objects inside the field of view are not detected "
    "automatically; inspect both scans before trusting the surface results."
)


@dataclass
class PreprocessConfig:
    hu_threshold: float = -300.0
    iso_spacing_mm: float = 1.0
    downsample_factor: int = 3
    fill_internal_holes: bool = True

    def validate(self) -> "PreprocessConfig":
        if not self.iso_spacing_mm > 0:
            raise InvalidConfig("iso_spacing_mm must be positive")
        if int(self.downsample_factor) != self.downsample_factor or self.downsample_factor < 1:
            raise InvalidConfig("downsample_factor must be a positive integer")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Finding:
    code: str
    detail: str


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)
    notes: list[str] = field(default_factory=lambda: [FOREIGN_OBJECT_NOTE])

    @property
    def valid(self) -> bool:
        return not self.findings

    @property
    def codes(self) -> list[str]:
        return [f.code for f in self.findings]

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "findings": [{"code": f.code, "detail": f.detail} for f in self.findings],
            "notes": list(self.notes),
        }


def _differs(a: float, b: float, rtol: float) -> bool:
    return abs(a - b) > rtol * max(abs(a), abs(b))


def validate_scan_pair(rest: ImageVolume, valsalva: ImageVolume,
                       tolerance: float = 1e-3) -> ValidationReport:
    """List every geometric inconsistency that makes a scan pair unusable.

    All checks are symmetric in the two arguments.
    """
    report = ValidationReport()
    add = report.findings.append
    rd, vd = rest.dims, valsalva.dims
    rs, vs = rest.spacing, valsalva.spacing

    if rd[2] != vd[2]:
        add(Finding("SliceCountMismatch", f"{rd[2]} vs {vd[2]} slices"))
    if _differs(rs[2], vs[2], tolerance):
        add(Finding("SliceThicknessMismatch", f"{rs[2]:g} mm vs {vs[2]:g} mm"))
    if any(_differs(rs[a], vs[a], tolerance) for a in (0, 1)):
        add(Finding("PixelSpacingMismatch",
                    f"in-plane spacing {rs[0]:g}x{rs[1]:g} mm vs {vs[0]:g}x{vs[1]:g} mm"))
    offsets = [abs(rest.origin[a] - valsalva.origin[a]) for a in (0, 1)]
    limits = [2.0 * max(rs[a], vs[a]) for a in (0, 1)]
    if any(o > lim for o, lim in zip(offsets, limits)):
        add(Finding("FieldOfViewShift",
                    f"in-plane origin offset ({offsets[0]:g}, {offsets[1]:g}) mm exceeds "
                    f"({limits[0]:g}, {limits[1]:g}) mm"))
    r_fov = [rd[a] * rs[a] for a in (0, 1)]
    v_fov = [vd[a] * vs[a] for a in (0, 1)]
    if rd[:2] != vd[:2] or any(_differs(r, v, tolerance) for r, v in zip(r_fov, v_fov)):
        add(Finding("ScalingMismatch",
                    f"in-plane field of view {r_fov[0]:g}x{r_fov[1]:g} mm ({rd[0]}x{rd[1]}) vs "
                    f"{v_fov[0]:g}x{v_fov[1]:g} mm ({vd[0]}x{vd[1]})"))
    r_z, v_z = rd[2] * rs[2], vd[2] * vs[2]
    if _differs(r_z, v_z, 0.05):
        add(Finding("TruncationSuspected", f"z-extent {r_z:g} mm vs {v_z:g} mm"))
    return report


def _fill_holes_in_slices(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for k in range(mask.shape[2]):
        if out[:, :, k].any():
            out[:, :, k] = ndimage.binary_fill_holes(out[:, :, k])
    return out


def body_mask(volume: ImageVolume, config: PreprocessConfig | None = None) -> ImageVolume:
    """Body outline: largest 26-connected component above the HU threshold.

    Disconnected bright structures (patient table, cables) are dropped and,
    when enabled, background enclosed within an axial slice is filled.
    """
    cfg = (config or PreprocessConfig()).validate()
    if volume.kind != INTENSITY:
        raise ValueError(f"body_mask expects an intensity volume, got {volume.kind}")
    above = volume.data >= cfg.hu_threshold
    if not above.any():
        raise EmptyMask(f"no voxel at or above {cfg.hu_threshold} HU")
    labels, n = ndimage.label(above, structure=np.ones((3, 3, 3), dtype=bool))
    if n > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        keep = labels == int(np.argmax(sizes))
    else:
        keep = labels == 1
    if cfg.fill_internal_holes:
        keep = _fill_holes_in_slices(keep)
    return volume.with_data(keep.astype(np.uint8), MASK)


def resample(volume: ImageVolume, target_spacing_mm, mode: str = "linear") -> ImageVolume:
    """Resample onto a grid with the same origin and the requested spacing.

    Output dims are ``ceil(dims * spacing / target)``; samples past the last
    input voxel replicate the edge value.
    """
    target = np.broadcast_to(np.asarray(target_spacing_mm, dtype=np.float64), (3,))
    if not np.all(np.isfinite(target)) or np.any(target <= 0):
        raise InvalidSpacing(f"target spacing must be positive, got {tuple(target)}")
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if volume.kind == LABEL and mode == "linear":
        raise ValueError("label volumes must be resampled with mode='nearest'")
    spacing = np.asarray(volume.spacing)
    if np.allclose(target, spacing, rtol=1e-12, atol=0):
        return ImageVolume(volume.data.copy(), volume.spacing, volume.origin, volume.kind)
    extent = np.asarray(volume.dims) * spacing
    # guard against ceil(3.0000000001) from round-off in extent / target
    dims = tuple(int(d) for d in np.ceil(extent / target - 1e-9))
    axes = [np.arange(d) * t / s for d, t, s in zip(dims, target, spacing)]
    if mode == "nearest":
        src, order, kind, dtype = volume.data, 0, volume.kind, volume.data.dtype
    else:
        src, order = volume.data.astype(np.float64), 1
        kind = SCALAR if volume.kind == MASK else volume.kind
        # interpolated HU need no more than single precision
        dtype = np.float32 if volume.kind == INTENSITY else np.float64
    out = np.empty(dims, dtype=dtype)
    step = max(1, _SLAB_VOXELS // (dims[0] * dims[1]))
    for z0 in range(0, dims[2], step):
        zs = axes[2][z0:z0 + step]
        coords = np.stack(np.meshgrid(axes[0], axes[1], zs, indexing="ij"), axis=0)
        out[:, :, z0:z0 + len(zs)] = sample(src, coords, order=order, mode="nearest")
    return ImageVolume(out, tuple(target), volume.origin, kind)


def downsample(volume: ImageVolume, factor: int) -> ImageVolume:
    """Coarsen the grid by an integer factor.

    Intensities and masks are low-pass filtered (Gaussian, sigma
    ``(factor - 1) / 2`` voxels) then sampled trilinearly; masks become
    fractional occupancy maps. Labels use nearest-neighbour sampling.
    """
    if int(factor) != factor or factor < 1:
        raise InvalidSpacing(f"downsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return ImageVolume(volume.data.copy(), volume.spacing, volume.origin, volume.kind)
    target = np.asarray(volume.spacing) * factor
    if volume.kind == LABEL:
        return resample(volume, target, "nearest")
    smoothed = ndimage.gaussian_filter(volume.data.astype(np.float64), (factor - 1) / 2.0,
                                       mode="nearest")
    kind = SCALAR if volume.kind == MASK else volume.kind
    return resample(ImageVolume(smoothed, volume.spacing, volume.origin, kind), target, "linear")


def resample_to_grid(volume: ImageVolume, grid: Grid, mode: str = "linear") -> ImageVolume:
    """Sample ``volume`` at the voxel centres of another grid (world frame).

    Points outside the source grid take the value 0.
    """
    if volume.grid.matches(grid):
        return ImageVolume(volume.data.copy(), volume.spacing, volume.origin, volume.kind)
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if volume.kind == LABEL and mode == "linear":
        raise ValueError("label volumes must be resampled with mode='nearest'")
    idx = np.moveaxis(volume.grid.world_to_index(grid.world_coords()), -1, 0)
    if mode == "nearest":
        out = sample(volume.data, idx, order=0, mode="constant")
        kind = volume.kind
    else:
        out = sample(volume.data.astype(np.float64), idx, order=1, mode="constant")
        kind = SCALAR if volume.kind == MASK else volume.kind
    return ImageVolume(out, grid.spacing, grid.origin, kind)
