from __future__ import annotations

import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hedi.errors import EmptySurface, InvalidConfig, IoFailure, MissingChannel
from hedi.phantom import PhantomSpec, default_bulge, make_phantom, truth_field
from hedi.preprocess import body_mask, downsample
from hedi.strain import strain_from_field
from hedi.surface import (DISPLACEMENT, STRAIN, InstabilityConfig, TriMesh, attach_scalars,
                          colorize, export_mesh, hedi_colormap, hotspots, import_mesh,
                          marching_cubes, unstable_area)
from hedi.volume import MASK, SCALAR, DisplacementField, Grid, ImageVolume

R = 50.0
SPHERE_AREA = 4 * np.pi * R ** 2            # 31415.9 mm²
CAP_AREA = 2 * np.pi * R ** 2 * (1 - np.cos(np.pi / 3))   # 7854.0 mm²


def sphere_mask(radius=R, spacing=1.0, center=(0.0, 0.0, 0.0), n=None) -> ImageVolume:
    n = n or int(np.ceil(2 * (radius + 6) / spacing))
    origin = np.asarray(center) - (n - 1) / 2 * spacing
    grid = Grid((n, n, n), (spacing,) * 3, tuple(origin))
    inside = np.linalg.norm(grid.world_coords() - center, axis=-1) <= radius
    return ImageVolume(inside.astype(np.uint8), grid.spacing, grid.origin, MASK)


@pytest.fixture(scope="module")
def sphere():
    return marching_cubes(sphere_mask())


def field_on(mask: ImageVolume, fn) -> DisplacementField:
    return DisplacementField(fn(mask.grid.world_coords()), mask.spacing, mask.origin)


class TestMarchingCubes:
    def test_sphere_area(self, sphere):
        assert abs(sphere.area() / SPHERE_AREA - 1) < 0.02

    def test_sphere_is_closed_and_outward(self, sphere):
        assert sphere.signed_volume() > 0
        assert abs(sphere.signed_volume() / (4 / 3 * np.pi * R ** 3) - 1) < 0.02
        edges = np.sort(np.concatenate([sphere.triangles[:, [0, 1]], sphere.triangles[:, [1, 2]],
                                        sphere.triangles[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert np.all(counts == 2)

    def test_normals_point_outward(self, sphere):
        radial = sphere.triangle_centroids()
        assert np.all(np.einsum("ij,ij->i", sphere.triangle_normals(), radial) > 0)

    def test_cube_area(self):
        data = np.zeros((60, 60, 60), np.uint8)
        data[10:50, 10:50, 10:50] = 1
        mesh = marching_cubes(ImageVolume(data, (1, 1, 1), kind=MASK))
        assert abs(mesh.area() / 9600.0 - 1) < 0.03

    def test_no_degenerate_triangles(self, sphere):
        assert sphere.triangle_areas().min() > 0
        assert sphere.triangles.max() < sphere.n_vertices

    def test_world_coordinates(self):
        mesh = marching_cubes(sphere_mask(20.0, 2.0, center=(100.0, -40.0, 7.0)))
        c = mesh.vertices.mean(axis=0)
        assert np.allclose(c, (100.0, -40.0, 7.0), atol=0.5)

    def test_area_invariant_under_origin_shift(self):
        m = sphere_mask(20.0, 1.5)
        shifted = ImageVolume(m.data, m.spacing, (123.4, -56.7, 8.9), MASK)
        assert marching_cubes(shifted).area() == pytest.approx(marching_cubes(m).area(), rel=1e-12)

    def test_empty(self):
        with pytest.raises(EmptySurface):
            marching_cubes(ImageVolume(np.zeros((8, 8, 8), np.uint8), (1, 1, 1), kind=MASK))

    def test_fractional_masks_are_not_smoothed(self):
        m = sphere_mask(30.0, 1.0)
        occupancy = downsample(m, 3)
        assert occupancy.kind == SCALAR
        mesh = marching_cubes(occupancy)
        assert abs(mesh.area() / (4 * np.pi * 30.0 ** 2) - 1) < 0.03


class TestAttachScalars:
    def test_zero_field(self, sphere):
        m = sphere_mask()
        mesh = attach_scalars(sphere, DisplacementField.zeros(m.grid))
        assert not mesh.channel(DISPLACEMENT).any()

    def test_constant_field(self, sphere):
        m = sphere_mask()
        mesh = attach_scalars(sphere, field_on(m, lambda p: np.zeros_like(p) + (0, 0, 20.0)))
        assert np.allclose(mesh.channel(DISPLACEMENT), 20.0, atol=1e-12)

    def test_bulge_matches_analytic(self):
        spec = PhantomSpec()
        w = default_bulge(spec)
        work = downsample(body_mask(make_phantom(spec).image), 3)
        mesh = attach_scalars(marching_cubes(work), truth_field(w, work.grid))
        exact = np.linalg.norm(w.displacement(mesh.vertices), axis=1)
        rms = np.sqrt(np.mean((mesh.channel(DISPLACEMENT) - exact) ** 2))
        assert rms < 1.0

    def test_strain_channel(self, sphere):
        m = sphere_mask()
        f = field_on(m, lambda p: 0.1 * p)
        mesh = attach_scalars(sphere, f, strain_from_field(f))
        assert np.allclose(mesh.channel("strain"), 0.105, atol=1e-9)

    def test_vertices_outside_are_clamped(self):
        m = sphere_mask(10.0, 1.0, n=24)
        mesh = TriMesh(np.array([[0.0, 0, 0], [500.0, 0, 0], [0, 500.0, 0]]), np.array([[0, 1, 2]]))
        out = attach_scalars(mesh, field_on(m, lambda p: np.zeros_like(p) + (3.0, 4.0, 0.0)))
        assert np.allclose(out.channel(DISPLACEMENT), 5.0)


def with_displacement(mesh, values):
    return mesh.with_channels(**{DISPLACEMENT: np.asarray(values, dtype=float)})


class TestUnstableArea:
    def test_below_threshold(self, sphere):
        assert unstable_area(with_displacement(sphere, np.full(sphere.n_vertices, 10.0))) == 0.0

    def test_whole_sphere(self, sphere):
        area = unstable_area(with_displacement(sphere, np.full(sphere.n_vertices, 20.0)))
        assert abs(area / SPHERE_AREA - 1) < 0.02

    def test_cap(self, sphere):
        # |u| = 7.5 + 0.3 z exceeds 15 mm exactly on the cap z > r cos 60°
        m = sphere_mask()
        f = field_on(m, lambda p: np.stack([0 * p[..., 0], 0 * p[..., 0], 7.5 + 0.3 * p[..., 2]], -1))
        mesh = attach_scalars(sphere, f)
        assert abs(unstable_area(mesh, InstabilityConfig(15.0)) / CAP_AREA - 1) < 0.05

    def test_missing_channel(self, sphere):
        with pytest.raises(MissingChannel):
            unstable_area(sphere)

    def test_invalid_threshold(self):
        for bad in (0.0, -1.0, float("nan")):
            with pytest.raises(InvalidConfig):
                InstabilityConfig(bad)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(0.01, 60.0), min_size=2, max_size=10), st.integers(0, 2 ** 16))
    def test_monotone_in_threshold(self, sphere, thresholds, seed):
        d = np.random.default_rng(seed).uniform(0, 40, sphere.n_vertices)
        mesh = with_displacement(sphere, d)
        ts = sorted(thresholds)
        areas = [unstable_area(mesh, InstabilityConfig(t)) for t in ts]
        assert all(a >= b for a, b in zip(areas, areas[1:]))

    def test_small_threshold_covers_everything(self, sphere):
        d = np.random.default_rng(0).uniform(0.5, 40, sphere.n_vertices)
        mesh = with_displacement(sphere, d)
        assert unstable_area(mesh, InstabilityConfig(1e-6)) == pytest.approx(mesh.area(), rel=1e-12)

    def test_z_range(self, sphere):
        mesh = with_displacement(sphere, np.full(sphere.n_vertices, 20.0))
        upper = unstable_area(mesh, z_range_mm=(0.0, 100.0))
        lower = unstable_area(mesh, z_range_mm=(-100.0, 0.0))
        assert upper + lower == pytest.approx(mesh.area(), rel=1e-12)
        assert abs(upper / (SPHERE_AREA / 2) - 1) < 0.03


class TestColormap:
    cfg = InstabilityConfig(15.0)

    def test_stops(self):
        cm = lambda d: tuple(hedi_colormap(d, 45.0, self.cfg))
        assert cm(0.0) == (0, 0, 255)
        assert cm(15.0) == (0, 255, 255)
        assert cm(15.0 + 1e-9) == (255, 0, 0)
        assert cm(30.0) == (255, 255, 0)
        assert cm(45.0) == (255, 255, 255)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(15.5, 200.0))
    def test_channel_rules(self, frac, top):
        d = frac * top
        r, g, b = (int(v) for v in hedi_colormap(d, top, self.cfg))
        if d <= 15.0:
            assert r == 0 and b == 255
        else:
            assert r == 255
            if d <= (15.0 + top) / 2:
                assert b == 0

    def test_max_equal_to_threshold(self):
        assert tuple(hedi_colormap(15.0, 15.0, self.cfg)) == (0, 255, 255)

    def test_max_below_threshold(self):
        with pytest.raises(ValueError):
            hedi_colormap(1.0, 10.0, self.cfg)

    def test_colorize(self, sphere):
        mesh = colorize(with_displacement(sphere, np.linspace(0, 30, sphere.n_vertices)))
        assert mesh.colors.shape == (sphere.n_vertices, 3) and mesh.colors.dtype == np.uint8
        assert tuple(mesh.colors[-1]) == (255, 255, 255)


def bump_channel(mesh, apexes, width=12.0):
    v = mesh.vertices
    out = np.zeros(len(v))
    for a in apexes:
        out += np.exp(-np.sum((v - a) ** 2, axis=1) / (2 * width ** 2))
    return out


class TestHotspots:
    def test_uniform(self, sphere):
        mesh = sphere.with_channels(**{STRAIN: np.full(sphere.n_vertices, 0.3)})
        spots = hotspots(mesh)
        assert len(spots) == 1
        assert spots[0].area_mm2 == pytest.approx(sphere.area(), rel=1e-12)

    def test_single_bump(self, sphere):
        apex = np.array([0.0, 0.0, R])
        mesh = sphere.with_channels(**{STRAIN: bump_channel(sphere, [apex])})
        spots = hotspots(mesh)
        assert len(spots) == 1
        top = np.argmin(np.linalg.norm(sphere.vertices - apex, axis=1))
        member = np.unique(sphere.triangles[spots[0].triangle_ids])
        assert top in member
        assert np.linalg.norm(np.asarray(spots[0].centroid_mm) - apex) < 5.0

    def test_two_equal_bumps(self, sphere):
        apexes = [np.array([0.0, 0.0, R]), np.array([0.0, 0.0, -R])]
        mesh = sphere.with_channels(**{STRAIN: bump_channel(sphere, apexes)})
        spots = hotspots(mesh, "strain")
        assert len(spots) == 2
        a, b = spots[0].area_mm2, spots[1].area_mm2
        assert abs(a - b) / max(a, b) < 0.10

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 16), st.floats(50.0, 99.0))
    def test_regions_partition_selected_triangles(self, sphere, seed, pct):
        vals = np.random.default_rng(seed).uniform(0, 1, sphere.n_vertices)
        mesh = sphere.with_channels(**{DISPLACEMENT: vals})
        spots = hotspots(mesh, "displacement", pct)
        ids = np.concatenate([s.triangle_ids for s in spots]) if spots else np.array([], int)
        assert len(ids) == len(np.unique(ids))
        thr = np.percentile(vals, pct)
        selected = np.flatnonzero(vals[sphere.triangles].mean(axis=1) >= thr)
        assert set(ids.tolist()) == set(selected.tolist())
        areas = [s.area_mm2 for s in spots]
        assert areas == sorted(areas, reverse=True)

    def test_errors(self, sphere):
        with pytest.raises(MissingChannel):
            hotspots(sphere, "strain")
        mesh = sphere.with_channels(**{STRAIN: np.zeros(sphere.n_vertices)})
        for bad in (0, 100):
            with pytest.raises(ValueError):
                hotspots(mesh, "strain", bad)


# -- VTK export ------------------------------------------------------------------

_NUM = r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?"


def check_vtk_polydata(text: str) -> dict:
    """Strict line-oriented check of the legacy ASCII PolyData layout.

    Written from the file-format description, independently of
    ``import_mesh``: sections must appear in the order POINTS, POLYGONS,
    POINT_DATA, SCALARS/LOOKUP_TABLE blocks, COLOR_SCALARS, and every data
    line must carry the right number of values.
    """
    lines = text.split("\n")
    assert lines[-1] == "", "file must end with a newline"
    lines = lines[:-1]
    assert re.fullmatch(r"# vtk DataFile Version \d\.\d", lines[0])
    assert len(lines[1]) <= 256
    assert lines[2] == "ASCII" and lines[3] == "DATASET POLYDATA"
    pos = 4
    m = re.fullmatch(r"POINTS (\d+) (float|double)", lines[pos])
    assert m, lines[pos]
    n = int(m.group(1))
    for line in lines[pos + 1:pos + 1 + n]:
        vals = line.split()
        assert len(vals) == 3 and all(re.fullmatch(_NUM, v) for v in vals)
    pos += 1 + n
    m = re.fullmatch(r"POLYGONS (\d+) (\d+)", lines[pos])
    assert m, lines[pos]
    n_poly, size = int(m.group(1)), int(m.group(2))
    total = 0
    for line in lines[pos + 1:pos + 1 + n_poly]:
        ids = [int(t) for t in line.split()]
        assert ids[0] == len(ids) - 1 and all(0 <= i < n for i in ids[1:])
        total += len(ids)
    assert total == size
    pos += 1 + n_poly
    info = {"points": n, "polygons": n_poly, "scalars": [], "colors": False}
    if pos == len(lines):
        return info
    assert lines[pos] == f"POINT_DATA {n}"
    pos += 1
    while pos < len(lines) and lines[pos].startswith("SCALARS "):
        m = re.fullmatch(r"SCALARS (\S+) (float|double) 1", lines[pos])
        assert m and lines[pos + 1] == "LOOKUP_TABLE default"
        block = lines[pos + 2:pos + 2 + n]
        assert len(block) == n and all(re.fullmatch(_NUM, b.strip()) for b in block)
        info["scalars"].append(m.group(1))
        pos += 2 + n
    if pos < len(lines):
        assert lines[pos] == "COLOR_SCALARS colors 3"
        block = lines[pos + 1:pos + 1 + n]
        assert len(block) == n
        for b in block:
            vals = [float(t) for t in b.split()]
            assert len(vals) == 3 and all(0.0 <= v <= 1.0 for v in vals)
        info["colors"] = True
        pos += 1 + n
    assert pos == len(lines), f"unexpected trailing content at line {pos}"
    return info


class TestExport:
    def test_one_triangle(self, tmp_path):
        mesh = TriMesh(np.eye(3), np.array([[0, 1, 2]]))
        export_mesh(mesh, tmp_path / "t.vtk")
        text = (tmp_path / "t.vtk").read_text()
        info = check_vtk_polydata(text)
        assert info["points"] == 3 and info["polygons"] == 1
        assert "POINTS 3 " in text and "POLYGONS 1 4" in text

    def test_round_trip(self, tmp_path, sphere):
        rng = np.random.default_rng(0)
        mesh = colorize(sphere.with_channels(**{DISPLACEMENT: rng.uniform(0, 30, sphere.n_vertices),
                                                STRAIN: rng.normal(0, 0.1, sphere.n_vertices)}))
        export_mesh(mesh, tmp_path / "s.vtk")
        back = import_mesh(tmp_path / "s.vtk")
        assert back.n_vertices == mesh.n_vertices
        assert np.array_equal(back.triangles, mesh.triangles)
        assert np.array_equal(back.vertices, mesh.vertices)
        for name in (DISPLACEMENT, STRAIN):
            assert np.abs(back.channel(name) - mesh.channel(name)).max() <= 1e-6
        assert np.array_equal(back.colors, mesh.colors)

    def test_sphere_file_is_valid_polydata(self, tmp_path, sphere):
        mesh = colorize(sphere.with_channels(**{DISPLACEMENT: np.linspace(0, 30, sphere.n_vertices),
                                                STRAIN: np.zeros(sphere.n_vertices)}))
        export_mesh(mesh, tmp_path / "s.vtk")
        info = check_vtk_polydata((tmp_path / "s.vtk").read_text())
        assert info == {"points": mesh.n_vertices, "polygons": len(mesh.triangles),
                        "scalars": sorted([DISPLACEMENT, STRAIN]), "colors": True}

    def test_reference_vtk_reader(self, tmp_path, sphere):
        vtk = pytest.importorskip("vtk")
        export_mesh(sphere.with_channels(**{DISPLACEMENT: np.ones(sphere.n_vertices)}),
                    tmp_path / "s.vtk")
        reader = vtk.vtkPolyDataReader()
        reader.SetFileName(str(tmp_path / "s.vtk"))
        reader.Update()
        poly = reader.GetOutput()
        assert poly.GetNumberOfPoints() == sphere.n_vertices
        assert poly.GetNumberOfPolys() == len(sphere.triangles)

    def test_unwritable(self, tmp_path, sphere):
        with pytest.raises(IoFailure):
            export_mesh(sphere, tmp_path / "missing" / "s.vtk")

    def test_trimesh_validation(self):
        with pytest.raises(ValueError):
            TriMesh(np.eye(3), np.array([[0, 1, 3]]))
        with pytest.raises(ValueError):
            TriMesh(np.eye(3), np.array([[0, 1, 2]]), {DISPLACEMENT: np.zeros(2)})
