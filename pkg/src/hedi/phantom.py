"""Synthetic abdomen phantoms and closed-form warps used as ground truth.

Phantoms are unions of ellipsoids evaluated at voxel centres. Warped
("Valsalva") phantoms are generated by pulling every output voxel back
through a fixed-point inverse of the analytic warp and evaluating the
ellipsoid indicators there, so the forward rest->Valsalva field is exactly
``AnalyticWarp.displacement``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InversionDiverged, InvalidSpec
from .interp import sample
from .volume import (INTENSITY, LABEL, MASK, DisplacementField, Grid,
                     ImageVolume, LabelCodes)

__all__ = [
    "Ellipsoid", "PhantomSpec", "Phantom", "AnalyticWarp", "make_phantom",
    "evaluate_warp", "apply_warp", "truth_field", "abdomen_spec", "ct_spec",
    "default_bulge", "anterior_surface_point", "grid_landmarks",
]

# Slabs of z-slices processed at once when sampling large phantoms.
_CHUNK_VOXELS = 2_000_000


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    def level(self, points: np.ndarray) -> np.ndarray:
        q = (np.asarray(points, dtype=np.float64) - self.center) / self.semi_axes
        return np.einsum("...i,...i->...", q, q)

    def inside(self, points: np.ndarray) -> np.ndarray:
        return self.level(points) <= 1.0

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * float(np.prod(self.semi_axes))

    def surface_points(self, n: int = 24) -> np.ndarray:
        th, ph = np.meshgrid(np.linspace(0, np.pi, n), np.linspace(0, 2 * np.pi, 2 * n))
        unit = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1)
        return np.asarray(self.center) + unit.reshape(-1, 3) * self.semi_axes


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and HU values of a synthetic abdomen.

    Axes: x left-right, y posterior->anterior, z cranio-caudal. ``origin=None``
    centres the grid on the world origin.
    """

    dims: tuple[int, int, int] = (128, 128, 128)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] | None = None
    body: Ellipsoid = Ellipsoid((0.0, -15.0, 0.0), (50.0, 35.0, 45.0))
    cavity: Ellipsoid = Ellipsoid((0.0, -15.0, 0.0), (40.0, 26.0, 36.0))
    hernia: Ellipsoid | None = Ellipsoid((0.0, 18.0, 0.0), (14.0, 9.0, 14.0))
    rectus_half_width_mm: float = 20.0
    hu_air: float = -1000.0
    hu_soft_tissue: float = 0.0
    hu_table: float | None = None
    table_gap_mm: float = 8.0
    table_thickness_mm: float = 3.0
    arm: Ellipsoid | None = None

    @property
    def grid(self) -> Grid:
        if self.origin is None:
            origin = -(np.asarray(self.dims) - 1) / 2.0 * np.asarray(self.spacing)
        else:
            origin = self.origin
        return Grid(self.dims, self.spacing, tuple(origin))

    def validate(self) -> "PhantomSpec":
        for name, e in (("body", self.body), ("cavity", self.cavity),
                        ("hernia", self.hernia), ("arm", self.arm)):
            if e is not None and min(e.semi_axes) <= 0:
                raise InvalidSpec(f"{name} semi-axes must be positive")
        if not np.all(self.body.inside(self.cavity.surface_points()) &
                      (self.body.level(self.cavity.surface_points()) < 1.0)):
            raise InvalidSpec("cavity must lie strictly inside the body")
        if self.hernia is not None:
            inside = self.body.inside(self.hernia.surface_points())
            if inside.all() or not inside.any():
                raise InvalidSpec("hernia must overlap the body boundary")
        lo, hi = self.grid.bounds
        pts = self.body.surface_points()
        if np.any(pts < lo) or np.any(pts > hi):
            raise InvalidSpec("body does not fit inside the grid")
        return self

    def outline(self, points: np.ndarray) -> np.ndarray:
        """Indicator of the patient body (body ellipsoid plus hernia bulge)."""
        inside = self.body.inside(points)
        if self.hernia is not None:
            inside |= self.hernia.inside(points)
        return inside

    def labels_at(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        outline = self.outline(pts)
        cavity = self.cavity.inside(pts)
        lab = np.zeros(pts.shape[:-1], dtype=np.uint8)
        wall = outline & ~cavity
        if self.hernia is not None:
            hernia = self.hernia.inside(pts) & wall
            wall &= ~hernia
        else:
            hernia = np.zeros_like(wall)
        anterior = pts[..., 1] > self.cavity.center[1]
        rectus = wall & anterior & (np.abs(pts[..., 0] - self.cavity.center[0])
                                    <= self.rectus_half_width_mm)
        lateral = wall & anterior & ~rectus
        lab[rectus] = LabelCodes.RECTUS_MUSCLES
        lab[lateral] = LabelCodes.LATERAL_MUSCLES
        lab[cavity] = LabelCodes.ABDOMINAL_CAVITY
        lab[hernia] = LabelCodes.HERNIA_SAC
        return lab

    def table_at(self, points: np.ndarray) -> np.ndarray:
        if self.hu_table is None:
            return np.zeros(np.asarray(points).shape[:-1], dtype=bool)
        bottom = self.body.center[1] - self.body.semi_axes[1] - self.table_gap_mm
        y = np.asarray(points)[..., 1]
        return (y <= bottom) & (y > bottom - self.table_thickness_mm)

    def anterior_pole(self) -> np.ndarray:
        c, ax = np.asarray(self.body.center), np.asarray(self.body.semi_axes)
        top = c + [0.0, ax[1], 0.0]
        if self.hernia is not None and self.hernia.inside(top):
            h = np.asarray(self.hernia.center)
            top = np.array([top[0], max(top[1], h[1] + self.hernia.semi_axes[1]), top[2]])
        return top


def abdomen_spec(spacing: float = 1.5, hu_table: float | None = None) -> PhantomSpec:
    """Adult-abdomen-sized phantom (about 36 x 22 x 32 cm) on an isotropic grid."""
    extent = np.array([400.0, 290.0, 360.0])
    dims = tuple(int(np.ceil(e / spacing)) for e in extent)
    return PhantomSpec(
        dims=dims,
        spacing=(spacing,) * 3,
        body=Ellipsoid((0.0, -25.0, 0.0), (180.0, 95.0, 160.0)),
        cavity=Ellipsoid((0.0, -25.0, 0.0), (165.0, 82.0, 145.0)),
        hernia=Ellipsoid((0.0, 70.0, 0.0), (35.0, 12.0, 40.0)),
        rectus_half_width_mm=40.0,
        hu_table=hu_table,
    )


def ct_spec(dims=(256, 256, 200), spacing=(1.5, 1.5, 2.0),
            hu_table: float | None = None) -> PhantomSpec:
    """The adult-abdomen geometry of :func:`abdomen_spec` on a CT-like grid.

    The default 256 x 256 x 200 grid with 1.5 mm pixels and 2 mm slices spans
    38.4 x 38.4 x 40 cm.
    """
    base = abdomen_spec(1.5, hu_table)
    return replace(base, dims=tuple(int(d) for d in dims),
                   spacing=tuple(float(v) for v in spacing))


@dataclass(frozen=True)
class AnalyticWarp:
    """Closed-form displacement field ``u(x)`` in mm."""

    kind: str = "identity"
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    matrix: tuple[tuple[float, ...], ...] | None = None
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    peak_mm: float = 0.0
    width_mm: float = 1.0
    direction: tuple[float, float, float] = (0.0, 1.0, 0.0)

    @classmethod
    def identity(cls) -> "AnalyticWarp":
        return cls("identity")

    @classmethod
    def make_translation(cls, t) -> "AnalyticWarp":
        return cls("translation", translation=tuple(float(v) for v in t))

    @classmethod
    def make_linear(cls, matrix) -> "AnalyticWarp":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidSpec("linear warp needs a 3x3 matrix")
        if np.linalg.det(np.eye(3) + m) <= 0:
            raise InvalidSpec("linear warp is not orientation preserving")
        return cls("linear", matrix=tuple(tuple(r) for r in m))

    @classmethod
    def make_bulge(cls, center, peak_mm: float, width_mm: float, direction=(0, 1, 0)) -> "AnalyticWarp":
        n = np.asarray(direction, dtype=np.float64)
        if width_mm <= 0 or np.linalg.norm(n) == 0:
            raise InvalidSpec("bulge needs a positive width and a non-zero direction")
        if abs(peak_mm) / width_mm > 0.6:
            raise InvalidSpec(f"bulge amplitude/width ratio {abs(peak_mm) / width_mm:.3g} exceeds 0.6")
        w = cls("radial_bulge", center=tuple(float(v) for v in center), peak_mm=float(peak_mm),
                width_mm=float(width_mm), direction=tuple(n / np.linalg.norm(n)))
        # det(I + grad u) is extremal on the line through the centre along n.
        t = np.linspace(-5 * width_mm, 5 * width_mm, 2001)
        line = np.asarray(w.center) + t[:, None] * np.asarray(w.direction)
        if np.linalg.det(np.eye(3) + w.jacobian(line)).min() <= 0:
            raise InvalidSpec("bulge warp folds space")
        return w

    def displacement(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.kind == "identity":
            return np.zeros_like(p)
        if self.kind == "translation":
            return np.broadcast_to(np.asarray(self.translation), p.shape).copy()
        if self.kind == "linear":
            return p @ np.asarray(self.matrix).T
        if self.kind == "radial_bulge":
            d = p - self.center
            g = np.exp(-np.einsum("...i,...i->...", d, d) / (2.0 * self.width_mm ** 2))
            return (self.peak_mm * g)[..., None] * np.asarray(self.direction)
        raise InvalidSpec(f"unknown warp kind {self.kind!r}")

    def jacobian(self, points) -> np.ndarray:
        """Closed-form ``grad u`` with ``[..., i, j] = d u_i / d x_j``."""
        p = np.asarray(points, dtype=np.float64)
        shape = p.shape[:-1] + (3, 3)
        if self.kind in ("identity", "translation"):
            return np.zeros(shape)
        if self.kind == "linear":
            return np.broadcast_to(np.asarray(self.matrix), shape).copy()
        d = p - self.center
        g = np.exp(-np.einsum("...i,...i->...", d, d) / (2.0 * self.width_mm ** 2))
        coef = -self.peak_mm * g / self.width_mm ** 2
        return coef[..., None, None] * np.asarray(self.direction)[:, None] * d[..., None, :]

    def inverse_points(self, points, max_iter: int = 20, tol: float = 1e-3) -> np.ndarray:
        """Solve ``x + u(x) = y`` for ``x`` by fixed-point iteration."""
        y = np.asarray(points, dtype=np.float64)
        if self.kind == "identity":
            return y.copy()
        x = y - self.displacement(y)
        for _ in range(max_iter):
            x_new = y - self.displacement(x)
            err = np.abs(x_new - x).max() if x.size else 0.0
            x = x_new
            if err <= tol:
                return x
        raise InversionDiverged(f"fixed-point inverse did not reach {tol} mm in {max_iter} iterations")


def evaluate_warp(warp: AnalyticWarp, point_mm) -> np.ndarray:
    return warp.displacement(point_mm)


@dataclass
class Phantom:
    image: ImageVolume
    labels: ImageVolume
    spec: PhantomSpec = field(repr=False)
    warp: AnalyticWarp = field(default_factory=AnalyticWarp.identity)

    def body_indicator(self) -> ImageVolume:
        """Exact (unthresholded) body outline on the phantom grid."""
        grid = self.image.grid
        data = np.zeros(grid.dims, dtype=np.uint8)
        for sl, pts in _chunks(grid):
            src = self.warp.inverse_points(pts)
            data[..., sl] = self.spec.outline(src)
        return ImageVolume(data, grid.spacing, grid.origin, MASK)


def _chunks(grid: Grid):
    """Yield ``(z-slice, world points)`` slabs covering the grid."""
    nx, ny, nz = grid.dims
    step = max(1, _CHUNK_VOXELS // (nx * ny))
    xs, ys, zs = grid.world_axes()
    for z0 in range(0, nz, step):
        sl = slice(z0, min(nz, z0 + step))
        X, Y, Z = np.meshgrid(xs, ys, zs[sl], indexing="ij")
        yield sl, np.stack([X, Y, Z], axis=-1)


def make_phantom(spec: PhantomSpec | None = None, warp: AnalyticWarp | None = None) -> Phantom:
    """HU image and label volume of ``spec``, optionally deformed by ``warp``.

    The patient table and arm fixture, when present, are not deformed.
    """
    spec = (spec or PhantomSpec()).validate()
    warp = warp or AnalyticWarp.identity()
    grid = spec.grid
    image = np.full(grid.dims, spec.hu_air, dtype=np.int16)
    labels = np.zeros(grid.dims, dtype=np.uint8)
    for sl, pts in _chunks(grid):
        src = warp.inverse_points(pts)
        img = image[..., sl]
        img[spec.outline(src)] = spec.hu_soft_tissue
        if spec.arm is not None:
            img[spec.arm.inside(pts)] = spec.hu_soft_tissue
        if spec.hu_table is not None:
            img[spec.table_at(pts)] = spec.hu_table
        labels[..., sl] = spec.labels_at(src)
    return Phantom(
        ImageVolume(image, grid.spacing, grid.origin, INTENSITY),
        ImageVolume(labels, grid.spacing, grid.origin, LABEL),
        spec,
        warp,
    )


def apply_warp(volume: ImageVolume, warp: AnalyticWarp) -> ImageVolume:
    """Deform a sampled volume: ``out(y) = in(x)`` with ``x + u(x) = y``.

    Intensities are interpolated trilinearly, masks and labels by nearest
    neighbour; samples beyond the grid replicate the edge value.
    """
    grid = volume.grid
    order = 0 if volume.kind in (LABEL, MASK) else 1
    src_data = volume.data if order == 0 else volume.data.astype(np.float64)
    out = np.empty(grid.dims, dtype=np.float64 if order else volume.data.dtype)
    for sl, pts in _chunks(grid):
        src = warp.inverse_points(pts)
        idx = np.moveaxis(grid.world_to_index(src), -1, 0)
        out[..., sl] = sample(src_data, idx, order=order, mode="nearest")
    if order and np.issubdtype(volume.data.dtype, np.integer):
        out = np.rint(out).astype(volume.data.dtype)
    return ImageVolume(out, volume.spacing, volume.origin, volume.kind)


def truth_field(warp: AnalyticWarp, grid: Grid) -> DisplacementField:
    """The exact forward field sampled at the voxel centres of ``grid``."""
    return DisplacementField(warp.displacement(grid.world_coords()), grid.spacing, grid.origin)


def default_bulge(spec: PhantomSpec, peak_mm: float = 30.0, width_mm: float = 60.0) -> AnalyticWarp:
    """Anterior bulge centred on the body's anterior pole, pointing anteriorly."""
    return AnalyticWarp.make_bulge(spec.anterior_pole(), peak_mm, width_mm, (0.0, 1.0, 0.0))


def _ellipsoid_top(e: Ellipsoid, x: float, z: float) -> float | None:
    c, (a, b, cz) = np.asarray(e.center), e.semi_axes
    rho = ((x - c[0]) / a) ** 2 + ((z - c[2]) / cz) ** 2
    return None if rho > 1.0 else float(c[1] + b * np.sqrt(1.0 - rho))


def anterior_surface_point(spec: PhantomSpec, x: float, z: float) -> np.ndarray | None:
    """Most anterior point of the body outline above ``(x, z)``, or None if the
    line of sight misses the body."""
    tops = [_ellipsoid_top(spec.body, x, z)]
    if spec.hernia is not None:
        tops.append(_ellipsoid_top(spec.hernia, x, z))
    tops = [t for t in tops if t is not None]
    if not tops:
        return None
    return np.array([x, max(tops), z])


def grid_landmarks(spec: PhantomSpec, warp: AnalyticWarp, pitch_mm: float = 50.0,
                   count: int = 30, max_level: float = 0.9):
    """Skin landmarks on a regular (x, z) grid over the anterior wall.

    Grid nodes are ``pitch_mm`` apart and offset by half a pitch in x from the
    anterior pole. The ``count`` nodes nearest the pole whose line of sight
    stays clear of the body's grazing rim (``max_level`` of the body ellipse)
    are kept. Valsalva positions follow the exact forward warp.
    """
    from .volume import LandmarkSet

    pole = spec.anterior_pole()
    c, (a, _, cz) = np.asarray(spec.body.center), spec.body.semi_axes
    half = int(np.ceil(max(a, cz) / pitch_mm)) + 1
    candidates = []
    for i in range(-half, half):
        for k in range(-half, half + 1):
            x = pole[0] + (i + 0.5) * pitch_mm
            z = pole[2] + k * pitch_mm
            if ((x - c[0]) / a) ** 2 + ((z - c[2]) / cz) ** 2 > max_level:
                continue
            candidates.append((np.hypot(x - pole[0], z - pole[2]), x, z))
    if len(candidates) < count:
        raise InvalidSpec(f"only {len(candidates)} grid nodes fit on the anterior wall")
    candidates.sort()
    chosen = sorted(candidates[:count], key=lambda t: (t[2], t[1]))
    rest = np.array([anterior_surface_point(spec, x, z) for _, x, z in chosen])
    valsalva = rest + warp.displacement(rest)
    ids = [f"L{n:02d}" for n in range(1, count + 1)]
    return LandmarkSet.from_arrays(ids, rest, valsalva)


def with_dims(spec: PhantomSpec, **changes) -> PhantomSpec:
    return replace(spec, **changes)
