"""Body surfaces: extraction, per-vertex scalars, unstable area and hotspots.

Meshes are written as legacy ASCII VTK PolyData so they open directly in
ParaView and other standard viewers.
"""

from __future__ import annotations

import io as _io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage import measure

from .errors import EmptySurface, InvalidConfig, IoFailure, MissingChannel, CorruptHeader
from .interp import gradient, sample
from .registration import sample_displacement
from .strain import StrainVolume
from .volume import MASK, DisplacementField, ImageVolume

__all__ = [
    "DISPLACEMENT", "STRAIN", "TriMesh", "InstabilityConfig", "Hotspot",
    "marching_cubes", "attach_scalars", "colorize", "unstable_area",
    "hedi_colormap", "hotspots", "export_mesh", "import_mesh",
]

DISPLACEMENT = "displacement_mm"
STRAIN = "max_principal_strain"
_CHANNEL_ALIASES = {"displacement": DISPLACEMENT, "strain": STRAIN}

BLUE = (0, 0, 255)
CYAN = (0, 255, 255)
RED = (255, 0, 0)
YELLOW = (255, 255, 0)
WHITE = (255, 255, 255)


@dataclass(frozen=True)
class InstabilityConfig:
    threshold_mm: float = 15.0

    def __post_init__(self):
        if not (np.isfinite(self.threshold_mm) and self.threshold_mm > 0):
            raise InvalidConfig(f"threshold_mm must be positive, got {self.threshold_mm}")


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray                 # (n, 3) mm, world frame
    triangles: np.ndarray                # (m, 3) vertex indices
    channels: dict = field(default_factory=dict)
    colors: np.ndarray | None = None     # (n, 3) uint8

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        chans = {}
        for name, values in self.channels.items():
            arr = np.asarray(values, dtype=np.float64).reshape(-1)
            if arr.shape[0] != v.shape[0]:
                raise ValueError(f"channel {name!r} has {arr.shape[0]} values for {len(v)} vertices")
            chans[name] = arr
        colors = self.colors
        if colors is not None:
            colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
            if colors.shape[0] != v.shape[0]:
                raise ValueError("color count differs from vertex count")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "colors", colors)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def _corners(self):
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_normals(self) -> np.ndarray:
        """Unnormalised normals (right-hand rule); length is twice the area."""
        a, b, c = self._corners()
        return np.cross(b - a, c - a)

    def triangle_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.triangle_normals(), axis=1)

    def triangle_centroids(self) -> np.ndarray:
        a, b, c = self._corners()
        return (a + b + c) / 3.0

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume(self) -> float:
        """Enclosed volume by the divergence theorem; positive for outward normals."""
        a, b, c = self._corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def channel(self, name: str) -> np.ndarray:
        name = _CHANNEL_ALIASES.get(name, name)
        if name not in self.channels:
            raise MissingChannel(f"mesh has no {name!r} channel")
        return self.channels[name]

    def triangle_means(self, name: str) -> np.ndarray:
        values = self.channel(name)
        return values[self.triangles].mean(axis=1)

    def with_channels(self, **channels) -> "TriMesh":
        merged = dict(self.channels)
        merged.update(channels)
        return replace(self, channels=merged)

    def translated(self, offset) -> "TriMesh":
        return replace(self, vertices=self.vertices + np.asarray(offset, dtype=np.float64))


def _clean(vertices: np.ndarray, triangles: np.ndarray, min_area: float):
    """Drop zero-area triangles and vertices no triangle references."""
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    triangles = triangles[areas > min_area]
    used = np.unique(triangles)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[triangles]


# Pre-smoothing width balancing two biases: the staircase of a binary sphere
# (+8.7 % area unsmoothed, +1.7 % here) against rounding of cube edges
# (-1.5 % unsmoothed, -2.7 % here).
DEFAULT_SMOOTH_SIGMA_VOX = 0.65


def marching_cubes(mask: ImageVolume, iso: float = 0.5,
                   smooth_sigma_vox: float | None = None) -> TriMesh:
    """Triangulated iso-surface of ``mask`` in world coordinates.

    The mask is treated as real valued and low-pass filtered with a Gaussian of
    ``smooth_sigma_vox`` voxels before extraction; on binary masks this removes
    most of the staircase that otherwise inflates the area. By default binary
    masks are smoothed with ``DEFAULT_SMOOTH_SIGMA_VOX`` and real-valued ones
    (already band limited, e.g. downsampled occupancy maps) are not. Triangles
    are wound so that normals point from inside (values above ``iso``) to
    outside.
    """
    if smooth_sigma_vox is None:
        smooth_sigma_vox = DEFAULT_SMOOTH_SIGMA_VOX if mask.kind == MASK else 0.0
    if min(mask.dims) < 2:
        raise EmptySurface(f"mask dims {mask.dims} too small for a surface")
    vol = np.asarray(mask.data, dtype=np.float64)
    if smooth_sigma_vox > 0:
        vol = ndimage.gaussian_filter(vol, smooth_sigma_vox, mode="nearest")
    if not (vol.min() < iso < vol.max()):
        raise EmptySurface(f"mask never crosses the iso level {iso}")
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=mask.spacing,
                                                allow_degenerate=False)
    verts = verts.astype(np.float64)
    faces = faces.astype(np.int64)
    if len(faces) == 0:
        raise EmptySurface("marching cubes produced no triangles")
    verts, faces = _clean(verts, faces, 1e-12 * min(mask.spacing) ** 2)
    if len(faces) == 0:
        raise EmptySurface("only degenerate triangles were produced")

    # Orientation: outward normals point down the smoothed-mask gradient.
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    normals = np.cross(b - a, c - a)
    centroid_idx = ((a + b + c) / 3.0 / np.asarray(mask.spacing)).T
    grad = gradient(vol, mask.spacing)
    g = np.stack([sample(grad[k], centroid_idx, order=1) for k in range(3)], axis=1)
    if np.einsum("ij,ij->i", normals, g).sum() > 0:
        faces = faces[:, [0, 2, 1]]
    return TriMesh(verts + np.asarray(mask.origin), faces)


def _sample_interior(strain: StrainVolume, points: np.ndarray) -> np.ndarray:
    """Trilinear sample of the max principal strain, keeping away from the border.

    Coordinates are clamped to the interior so that values computed with
    one-sided differences are only used when the grid is too thin otherwise.
    """
    idx = strain.grid.world_to_index(points).T
    for ax, n in enumerate(strain.dims):
        lo, hi = (1, n - 2) if n >= 3 else (0, n - 1)
        idx[ax] = np.clip(idx[ax], lo, hi)
    return sample(np.asarray(strain.max_principal, dtype=np.float64), idx, order=1)


def attach_scalars(mesh: TriMesh, field: DisplacementField,
                   strain: StrainVolume | None = None, strain_at_target: bool = False) -> TriMesh:
    """Add the displacement magnitude (and strain, when given) per vertex.

    Strain lives on the rest frame. For a Valsalva-frame surface paired with the
    inverse field, ``strain_at_target`` samples it at ``vertex + u(vertex)``,
    the corresponding rest-frame point.
    """
    disp = sample_displacement(field, mesh.vertices, clamp=True)
    channels = {DISPLACEMENT: np.linalg.norm(disp, axis=1)}
    if strain is not None:
        points = mesh.vertices + disp if strain_at_target else mesh.vertices
        channels[STRAIN] = _sample_interior(strain, points)
    return mesh.with_channels(**channels)


def hedi_colormap(displacement_mm, max_mm: float, config: InstabilityConfig | None = None) -> np.ndarray:
    """RGB8 colours for displacement magnitudes.

    Blue to cyan up to and including the threshold; above it the ramp jumps to
    red, reaches yellow halfway to ``max_mm`` and white at ``max_mm``.
    """
    cfg = config or InstabilityConfig()
    thr = cfg.threshold_mm
    if max_mm < thr:
        raise ValueError(f"max_mm ({max_mm}) must not be below the threshold ({thr})")
    d = np.asarray(displacement_mm, dtype=np.float64)
    rgb = np.zeros(d.shape + (3,), dtype=np.float64)

    below = d <= thr
    t = np.clip(d / thr, 0.0, 1.0)
    rgb[..., 1] = np.where(below, 255.0 * t, 0.0)
    rgb[..., 2] = np.where(below, 255.0, 0.0)

    span = max_mm - thr
    s = np.clip((d - thr) / span, 0.0, 1.0) if span > 0 else np.ones_like(d)
    above = ~below
    rgb[..., 0] = np.where(above, 255.0, rgb[..., 0])
    rgb[..., 1] = np.where(above, np.where(s <= 0.5, 510.0 * s, 255.0), rgb[..., 1])
    rgb[..., 2] = np.where(above, np.where(s <= 0.5, 0.0, 510.0 * s - 255.0), rgb[..., 2])
    return np.rint(rgb).astype(np.uint8)


def colorize(mesh: TriMesh, config: InstabilityConfig | None = None,
             max_mm: float | None = None) -> TriMesh:
    """Colour vertices by displacement; ``max_mm`` defaults to the mesh maximum."""
    cfg = config or InstabilityConfig()
    disp = mesh.channel(DISPLACEMENT)
    top = float(disp.max()) if max_mm is None else float(max_mm)
    return replace(mesh, colors=hedi_colormap(disp, max(top, cfg.threshold_mm), cfg))


def unstable_area(mesh: TriMesh, config: InstabilityConfig | None = None,
                  z_range_mm: tuple[float, float] | None = None) -> float:
    """Area (mm²) of triangles whose mean vertex displacement exceeds the threshold.

    ``z_range_mm`` restricts the count to triangles whose centroid lies in the
    given axial slab.
    """
    cfg = config or InstabilityConfig()
    selected = mesh.triangle_means(DISPLACEMENT) > cfg.threshold_mm
    if z_range_mm is not None:
        z = mesh.triangle_centroids()[:, 2]
        lo, hi = sorted(z_range_mm)
        selected &= (z >= lo) & (z <= hi)
    return float(mesh.triangle_areas()[selected].sum())


@dataclass(frozen=True)
class Hotspot:
    triangle_ids: np.ndarray
    area_mm2: float
    peak_value: float
    centroid_mm: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {
            "n_triangles": int(len(self.triangle_ids)),
            "area_mm2": self.area_mm2,
            "peak_value": self.peak_value,
            "centroid_mm": list(self.centroid_mm),
        }


def _triangle_adjacency(triangles: np.ndarray) -> coo_matrix:
    """Sparse graph linking triangles that share an edge."""
    m = len(triangles)
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    edges.sort(axis=1)
    owner = np.tile(np.arange(m), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    same = np.all(edges[1:] == edges[:-1], axis=1)
    a, b = owner[:-1][same], owner[1:][same]
    return coo_matrix((np.ones(len(a)), (a, b)), shape=(m, m))


def hotspots(mesh: TriMesh, channel: str = "strain", percentile: float = 95.0) -> list[Hotspot]:
    """Edge-connected surface regions at or above the channel's percentile.

    Triangles qualify when their mean vertex value is at least the vertex
    percentile; regions are returned largest first.
    """
    if not 0 < percentile < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {percentile}")
    values = mesh.channel(channel)
    thr = float(np.percentile(values, percentile))
    means = values[mesh.triangles].mean(axis=1)
    # ties (e.g. a uniform channel) must qualify despite round-off in the mean
    slack = 4 * np.finfo(float).eps * max(abs(thr), float(np.abs(values).max()))
    chosen = np.flatnonzero(means >= thr - slack)
    if len(chosen) == 0:
        return []
    sub = mesh.triangles[chosen]
    n_comp, comp = connected_components(_triangle_adjacency(sub), directed=False)
    areas = mesh.triangle_areas()[chosen]
    cents = mesh.triangle_centroids()[chosen]
    regions = []
    for k in range(n_comp):
        member = comp == k
        ids = chosen[member]
        area = float(areas[member].sum())
        weights = areas[member] if area > 0 else np.ones(member.sum())
        centroid = (cents[member] * weights[:, None]).sum(axis=0) / weights.sum()
        peak = float(values[np.unique(sub[member])].max())
        regions.append(Hotspot(ids, area, peak, tuple(float(c) for c in centroid)))
    regions.sort(key=lambda r: (-r.area_mm2, int(r.triangle_ids[0])))
    return regions


# -- VTK legacy ASCII ------------------------------------------------------------

def _block(arr: np.ndarray, fmt: str) -> str:
    buf = _io.StringIO()
    np.savetxt(buf, arr, fmt=fmt)
    return buf.getvalue()


def export_mesh(mesh: TriMesh, path, title: str = "HEDI surface") -> None:
    """Write legacy ASCII VTK PolyData with every scalar channel and the colours."""
    path = Path(path)
    if not path.parent.is_dir() or not os.access(path.parent, os.W_OK):
        raise IoFailure(f"parent directory of {path} is not writable")
    n, m = mesh.n_vertices, mesh.n_triangles
    parts = [
        "# vtk DataFile Version 3.0\n",
        title.replace("\n", " ")[:255] + "\n",
        "ASCII\n",
        "DATASET POLYDATA\n",
        f"POINTS {n} double\n",
        _block(mesh.vertices, "%.17g"),
        f"POLYGONS {m} {4 * m}\n",
        _block(np.column_stack([np.full(m, 3), mesh.triangles]), "%d"),
    ]
    if mesh.channels or mesh.colors is not None:
        parts.append(f"POINT_DATA {n}\n")
        for name in sorted(mesh.channels):
            parts.append(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            parts.append(_block(mesh.channels[name].reshape(-1, 1), "%.17g"))
        if mesh.colors is not None:
            parts.append("COLOR_SCALARS colors 3\n")
            parts.append(_block(mesh.colors / 255.0, "%.9g"))
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("".join(parts))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def import_mesh(path) -> TriMesh:
    """Read a mesh written by :func:`export_mesh` (triangles only)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if len(lines) < 4 or not lines[0].startswith("# vtk DataFile"):
        raise CorruptHeader(f"{path}: not a legacy VTK file")
    if lines[2].strip() != "ASCII" or lines[3].split() != ["DATASET", "POLYDATA"]:
        raise CorruptHeader(f"{path}: only ASCII POLYDATA is supported")
    tokens = " ".join(lines[4:]).split()
    pos = 0

    def take(count: int) -> list[str]:
        nonlocal pos
        if pos + count > len(tokens):
            raise CorruptHeader(f"{path}: file ends early")
        out = tokens[pos:pos + count]
        pos += count
        return out

    vertices = triangles = colors = None
    channels: dict[str, np.ndarray] = {}
    n = 0
    while pos < len(tokens):
        key = take(1)[0]
        if key == "POINTS":
            n = int(take(2)[0])
            vertices = np.array(take(3 * n), dtype=np.float64).reshape(n, 3)
        elif key == "POLYGONS":
            m, size = (int(v) for v in take(2))
            raw = np.array(take(size), dtype=np.int64)
            if size != 4 * m or np.any(raw[::4] != 3):
                raise CorruptHeader(f"{path}: only triangular polygons are supported")
            triangles = raw.reshape(m, 4)[:, 1:]
        elif key == "POINT_DATA":
            if int(take(1)[0]) != n:
                raise CorruptHeader(f"{path}: POINT_DATA count differs from POINTS")
        elif key == "SCALARS":
            name, _, *rest = take(3)
            if take(2)[0] != "LOOKUP_TABLE":
                raise CorruptHeader(f"{path}: SCALARS {name} lacks LOOKUP_TABLE")
            channels[name] = np.array(take(n), dtype=np.float64)
        elif key == "COLOR_SCALARS":
            _, ncomp = take(2)
            raw = np.array(take(n * int(ncomp)), dtype=np.float64).reshape(n, int(ncomp))
            colors = np.rint(raw[:, :3] * 255.0).astype(np.uint8)
        else:
            raise CorruptHeader(f"{path}: unexpected keyword {key!r}")
    if vertices is None or triangles is None:
        raise CorruptHeader(f"{path}: POINTS or POLYGONS missing")
    return TriMesh(vertices, triangles, channels, colors)
