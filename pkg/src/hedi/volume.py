"""Core volumetric containers shared by every stage of the pipeline.

Arrays are indexed ``[i, j, k]`` along ``(x, y, z)`` so that ``data.shape``
equals the header ``dims``. The world position of voxel ``(i, j, k)`` is
``origin + (i, j, k) * spacing`` (voxel centres, no direction cosines).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Sequence

import numpy as np

from .errors import GridMismatch, InvalidSpacing

INTENSITY = "intensity-HU"
MASK = "binary-mask"
LABEL = "label"
# Real-valued derived maps (smoothed masks, Jacobian determinants, ...).
SCALAR = "scalar"
KINDS = (INTENSITY, MASK, LABEL, SCALAR)


class LabelCodes(IntEnum):
    BACKGROUND = 0
    ABDOMINAL_CAVITY = 1
    RECTUS_MUSCLES = 2
    LATERAL_MUSCLES = 3
    HERNIA_SAC = 4


def _triple(values, name: str) -> tuple[float, float, float]:
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(out)}")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class Grid:
    """Geometry of a voxel lattice: dims, spacing (mm) and origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        spacing = _triple(self.spacing, "spacing")
        if not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise InvalidSpacing(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def extent(self) -> np.ndarray:
        """Physical extent ``dims * spacing`` per axis (mm)."""
        return np.asarray(self.dims) * np.asarray(self.spacing)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates of the first and last voxel centres."""
        lo = np.asarray(self.origin)
        return lo, lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def world_to_index(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def index_to_world(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_axes(self) -> list[np.ndarray]:
        return [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]

    def world_coords(self) -> np.ndarray:
        """Dense ``dims + (3,)`` array of voxel-centre world coordinates."""
        ax = self.world_axes()
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def matches(self, other: "Grid", rtol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=rtol, atol=0)
            and np.allclose(self.origin, other.origin, rtol=0, atol=rtol * max(self.spacing))
        )

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        lo, hi = self.bounds
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= lo - tol) & (p <= hi + tol), axis=-1)


@dataclass(frozen=True)
class ImageVolume:
    """Scalar voxel grid carrying HU intensities, a binary mask or labels."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = INTENSITY

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {data.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        grid = Grid(data.shape, self.spacing, self.origin)
        if self.kind == MASK and not np.all((data == 0) | (data == 1)):
            raise ValueError("binary-mask values must be 0 or 1")
        if self.kind == LABEL:
            if not np.issubdtype(data.dtype, np.integer):
                raise ValueError("label volumes need an integer dtype")
            if data.size and data.min() < 0:
                raise ValueError("label values must be non-negative")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", grid.spacing)
        object.__setattr__(self, "origin", grid.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin)

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "ImageVolume":
        return ImageVolume(data, self.spacing, self.origin, kind or self.kind)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement vectors in mm (world frame), shape ``dims + (3,)``."""

    vectors: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vec = np.asarray(self.vectors)
        if vec.ndim != 4 or vec.shape[-1] != 3:
            raise ValueError(f"field vectors must have shape (nx, ny, nz, 3), got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("displacement field contains non-finite components")
        grid = Grid(vec.shape[:3], self.spacing, self.origin)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "spacing", grid.spacing)
        object.__setattr__(self, "origin", grid.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[:3]  # type: ignore[return-value]

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=-1)

    @classmethod
    def zeros(cls, grid: Grid, dtype=np.float64) -> "DisplacementField":
        return cls(np.zeros(grid.dims + (3,), dtype=dtype), grid.spacing, grid.origin)


@dataclass(frozen=True)
class Landmark:
    id: str
    rest_point: tuple[float, float, float]
    valsalva_point: tuple[float, float, float]


@dataclass(frozen=True)
class LandmarkSet:
    entries: tuple[Landmark, ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("landmark ids must be unique")
        for e in entries:
            if not (np.all(np.isfinite(e.rest_point)) and np.all(np.isfinite(e.valsalva_point))):
                raise ValueError(f"landmark {e.id!r} has non-finite coordinates")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Landmark]:
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def rest_points(self) -> np.ndarray:
        return np.array([e.rest_point for e in self.entries], dtype=np.float64).reshape(-1, 3)

    @property
    def valsalva_points(self) -> np.ndarray:
        return np.array([e.valsalva_point for e in self.entries], dtype=np.float64).reshape(-1, 3)

    @classmethod
    def from_arrays(cls, ids: Sequence[str], rest, valsalva) -> "LandmarkSet":
        rest = np.asarray(rest, dtype=np.float64).reshape(-1, 3)
        valsalva = np.asarray(valsalva, dtype=np.float64).reshape(-1, 3)
        return cls(tuple(
            Landmark(str(i), tuple(r), tuple(v)) for i, r, v in zip(ids, rest, valsalva)
        ))


def require_same_grid(a, b, what: str = "inputs") -> None:
    if not a.grid.matches(b.grid):
        raise GridMismatch(
            f"{what} are on different grids: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing} vs {b.spacing}, origin {a.origin} vs {b.origin}"
        )
