"""Command line entry point: ``hedi {validate,run,eval-landmarks,phantom}``.

Exit codes: 0 success, 1 domain rejection, 2 I/O failure, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BothZero, HediError, InvalidConfig, IoFailure
from .io import (load_field, load_landmarks, load_volume, save_channels, save_field,
                 save_landmarks, save_volume)
from .metrics import (CONVENTIONS, HerniaReport, evaluate_landmarks, label_volumes,
                      loss_of_domain, mesh_defect_ratio, write_report)
from .phantom import (AnalyticWarp, PhantomSpec, abdomen_spec, ct_spec, default_bulge,
                      grid_landmarks, make_phantom, truth_field)
from .preprocess import (PreprocessConfig, body_mask, downsample, resample,
                         resample_to_grid, validate_scan_pair)
from .registration import RegistrationConfig, jacobian_determinant, register_symmetric
from .strain import strain_from_field
from .surface import (DISPLACEMENT, STRAIN, InstabilityConfig, attach_scalars, colorize,
                      export_mesh, hotspots, marching_cubes, unstable_area)
from .volume import INTENSITY, LABEL

log = logging.getLogger("hedi")

EXIT_OK, EXIT_DOMAIN, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3
N_HOTSPOTS_REPORTED = 5


@dataclass
class RunConfig:
    rest_path: str
    valsalva_path: str
    out_dir: str
    labels_rest_path: str | None = None
    labels_valsalva_path: str | None = None
    threshold_mm: float = 15.0
    downsample: int = 3
    iso_spacing_mm: float = 1.0
    hu_threshold: float = -300.0
    defect_area_cm2: float | None = None
    mesh_area_cm2: float | None = None
    landmarks_path: str | None = None
    z_range_mm: tuple[float, float] | None = None
    force: bool = False
    figures: bool = True
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(hu_threshold=self.hu_threshold, iso_spacing_mm=self.iso_spacing_mm,
                                downsample_factor=self.downsample)

    def validate(self) -> "RunConfig":
        InstabilityConfig(self.threshold_mm)
        self.preprocess_config().validate()
        self.registration.validate()
        for name in ("defect_area_cm2", "mesh_area_cm2"):
            value = getattr(self, name)
            if value is not None and not (np.isfinite(value) and value >= 0):
                raise InvalidConfig(f"{name} must be a non-negative number")
        if self.defect_area_cm2 == 0 and self.mesh_area_cm2 is not None:
            raise InvalidConfig("defect_area_cm2 must be positive to form the mesh-defect ratio")
        if self.z_range_mm is not None and len(self.z_range_mm) != 2:
            raise InvalidConfig("z_range_mm needs two values")
        return self

    def snapshot(self) -> dict:
        d = asdict(self)
        d.pop("out_dir")
        d.pop("figures")
        d["registration"] = self.registration.to_dict()
        if self.z_range_mm is not None:
            d["z_range_mm"] = list(self.z_range_mm)
        return d


# -- run -----------------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _phase_volumes(path: str | None):
    if path is None:
        return None
    return label_volumes(load_volume(path, kind=LABEL))


def _figures(out: Path, rest_work, forward, strain, dmap, rest_mesh, cfg: InstabilityConfig):
    from . import plotting

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    outline = rest_work.data
    plotting.plot_orthogonal_slices(forward.magnitude(), forward.spacing,
                                    fig_dir / "displacement_slices.png",
                                    "displacement magnitude (rest frame)", "mm", outline)
    plotting.plot_orthogonal_slices(strain.max_principal, strain.spacing,
                                    fig_dir / "strain_slices.png",
                                    "maximum principal strain", "-", outline, cmap="magma")
    plotting.plot_metric_trace(dmap.metric_trace, dmap.iterations_per_level,
                               fig_dir / "metric_trace.png")
    plotting.plot_displacement_histogram(rest_mesh, cfg, fig_dir / "displacement_histogram.png")
    plotting.plot_surface_projection(rest_mesh, fig_dir / "rest_surface_anterior.png")


def cmd_run(cfg: RunConfig) -> tuple[int, HerniaReport | None]:
    """Full pipeline; returns the exit code and the report (None on rejection)."""
    started = time.perf_counter()
    cfg.validate()
    out = Path(cfg.out_dir)
    try:
        (out / "intermediates").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    inst = InstabilityConfig(cfg.threshold_mm)
    pre = cfg.preprocess_config()

    rest = load_volume(cfg.rest_path, kind=INTENSITY)
    valsalva = load_volume(cfg.valsalva_path, kind=INTENSITY)
    # read the small optional inputs up front so a bad path fails before registration
    vols = {"rest": _phase_volumes(cfg.labels_rest_path),
            "valsalva": _phase_volumes(cfg.labels_valsalva_path)}
    landmarks = load_landmarks(cfg.landmarks_path) if cfg.landmarks_path else None
    validation = validate_scan_pair(rest, valsalva)
    (out / "validation.json").write_text(json.dumps(validation.to_dict(), indent=2) + "\n")
    if not validation.valid:
        if not cfg.force:
            log.error("scan pair rejected: %s", ", ".join(validation.codes))
            return EXIT_DOMAIN, None
        log.warning("scan pair has findings %s; continuing because of --force", validation.codes)

    log.info("resampling to %.3g mm and extracting body outlines", cfg.iso_spacing_mm)
    masks = {}
    for name, vol in (("rest", rest), ("valsalva", valsalva)):
        iso = resample(vol, cfg.iso_spacing_mm)
        mask = body_mask(iso, pre)
        del iso
        save_volume(mask, out / "intermediates" / f"{name}_body_mask.mha")
        masks[name] = downsample(mask, cfg.downsample)
    del rest, valsalva
    rest_work = masks["rest"]
    val_work = resample_to_grid(masks["valsalva"], rest_work.grid)
    save_volume(rest_work, out / "intermediates" / "rest_working_mask.mha")
    save_volume(val_work, out / "intermediates" / "valsalva_working_mask.mha")

    log.info("registering on %s voxels at %s mm", rest_work.dims, rest_work.spacing)
    dmap = register_symmetric(rest_work, val_work, cfg.registration)
    forward, inverse = dmap.forward, dmap.inverse
    save_field(forward, out / "displacement_forward.mha")
    save_field(inverse, out / "displacement_inverse.mha")
    save_volume(jacobian_determinant(forward), out / "jacobian_determinant.mha")
    _write_csv(out / "metric_trace.csv", ["level", "iteration", "metric"],
               [(lvl, i, _fmt(v)) for lvl, i, v in _trace_rows(dmap)])

    strain = strain_from_field(forward)
    save_channels(strain.tensors, strain.spacing, strain.origin, out / "strain_tensors.mha")
    save_volume(strain.max_principal_volume(), out / "strain_max_principal.mha")

    rest_mesh = attach_scalars(marching_cubes(rest_work), forward, strain)
    val_mesh = attach_scalars(marching_cubes(val_work), inverse, strain, strain_at_target=True)
    max_disp = float(rest_mesh.channel(DISPLACEMENT).max())
    rest_mesh = colorize(rest_mesh, inst, max_disp)
    val_mesh = colorize(val_mesh, inst, max_disp)
    export_mesh(rest_mesh, out / "rest_surface.vtk", "HEDI rest surface")
    export_mesh(val_mesh, out / "valsalva_surface.vtk", "HEDI Valsalva surface")
    _write_csv(out / "rest_surface_vertices.csv",
               ["x_mm", "y_mm", "z_mm", DISPLACEMENT, STRAIN],
               [[_fmt(c) for c in row] for row in np.column_stack(
                   [rest_mesh.vertices, rest_mesh.channel(DISPLACEMENT), rest_mesh.channel(STRAIN)])])

    area_cm2 = unstable_area(rest_mesh, inst, cfg.z_range_mm) / 100.0
    spots = hotspots(rest_mesh, "strain")[:N_HOTSPOTS_REPORTED]
    report = HerniaReport(
        threshold_mm=cfg.threshold_mm,
        unstable_area_cm2=area_cm2,
        max_displacement_mm=max_disp,
        max_principal_strain_peak=float(rest_mesh.channel(STRAIN).max()),
        strain_hotspots=[h.to_dict() for h in spots],
        surface_z_range_mm=None if cfg.z_range_mm is None else list(cfg.z_range_mm),
        defect_area_cm2=cfg.defect_area_cm2,
        mesh_area_cm2=cfg.mesh_area_cm2,
    )
    if cfg.defect_area_cm2 is not None and cfg.mesh_area_cm2 is not None:
        report.mesh_defect_ratio = mesh_defect_ratio(cfg.mesh_area_cm2, cfg.defect_area_cm2)

    if any(v is not None for v in vols.values()):
        report.cavity_volume_mm3 = {k: v["cavity"] for k, v in vols.items() if v is not None}
        report.hernia_volume_mm3 = {k: v["hernia"] for k, v in vols.items() if v is not None}
        report.loss_of_domain_convention = CONVENTIONS["sabbagh"]
        for phase, attr in (("rest", "loss_of_domain"), ("valsalva", "loss_of_domain_valsalva")):
            v = vols[phase]
            if v is None:
                continue
            try:
                setattr(report, attr, loss_of_domain(v["hernia"], v["cavity"]))
            except BothZero:
                log.warning("%s labels contain neither cavity nor hernia; ratio omitted", phase)

    if landmarks is not None:
        evaluation = evaluate_landmarks(landmarks, forward)
        report.landmark_eval = evaluation.to_dict()

    report.provenance = {
        "inputs": {k: getattr(cfg, k) for k in ("rest_path", "valsalva_path", "labels_rest_path",
                                                "labels_valsalva_path", "landmarks_path")
                   if getattr(cfg, k) is not None},
        "config": cfg.snapshot(),
        "forced": bool(cfg.force),
        "validation_findings": validation.codes,
        "notes": list(validation.notes),
        "working_grid": {"dims": list(rest_work.dims), "spacing_mm": list(rest_work.spacing)},
        "registration_iterations": list(dmap.iterations_per_level),
        "tool_version": __version__,
        "wall_clock_seconds": time.perf_counter() - started,
    }
    write_report(report, out / "report.json")
    if cfg.figures:
        _figures(out, rest_work, forward, strain, dmap, rest_mesh, inst)
    return EXIT_OK, report


def _trace_rows(dmap):
    start = 0
    for level, n in enumerate(dmap.iterations_per_level):
        for i in range(n):
            yield level, i, dmap.metric_trace[start + i]
        start += n


# -- phantom -------------------------------------------------------------------

def cmd_phantom(args) -> int:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    spacing = args.spacing
    if spacing is not None:
        if len(spacing) not in (1, 3):
            raise InvalidConfig("--spacing takes one or three values")
        spacing = tuple(spacing) * 3 if len(spacing) == 1 else tuple(spacing)
    if args.preset == "abdomen":
        if spacing is not None and len(set(spacing)) != 1:
            raise InvalidConfig("the abdomen preset needs isotropic spacing")
        spec = abdomen_spec(spacing[0] if spacing else 1.5, args.table_hu)
    elif args.preset == "ct":
        spec = ct_spec(args.dims or (256, 256, 200), spacing or (1.5, 1.5, 2.0), args.table_hu)
    else:
        spec = PhantomSpec(dims=tuple(args.dims or (128, 128, 128)),
                           spacing=spacing or (1.0, 1.0, 1.0), hu_table=args.table_hu)
    spec.validate()
    if args.warp == "translation":
        warp = AnalyticWarp.make_translation(args.translation)
    elif args.warp == "bulge":
        warp = default_bulge(spec, args.peak_mm, args.width_mm)
    else:
        warp = AnalyticWarp.identity()
    ext = "." + args.format
    rest = make_phantom(spec)
    save_volume(rest.image, out / f"rest{ext}")
    save_volume(rest.labels, out / f"labels{ext}")
    val = make_phantom(spec, warp)
    save_volume(val.image, out / f"valsalva{ext}")
    if args.valsalva_labels:
        save_volume(val.labels, out / f"labels_valsalva{ext}")
    truth = truth_field(warp, spec.grid)
    save_field(type(truth)(truth.vectors.astype(np.float32), truth.spacing, truth.origin),
               out / "truth_field.mha")
    if args.landmarks:
        save_landmarks(grid_landmarks(spec, warp, args.landmark_pitch_mm, args.landmark_count),
                       out / "landmarks.csv")
    print(json.dumps({"out_dir": str(out), "dims": list(spec.dims), "spacing_mm": list(spec.spacing),
                      "warp": warp.kind}, indent=2))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def _kebab(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_registration_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("registration overrides")
    defaults = RegistrationConfig()
    for f in fields(RegistrationConfig):
        default = getattr(defaults, f.name)
        if f.name == "iterations_per_level":
            group.add_argument(_kebab(f.name), type=int, nargs="+", default=None,
                               help=f"iterations per level, coarse to fine (default {list(default)})")
        elif f.name == "metric":
            group.add_argument(_kebab(f.name), choices=("cc", "ssd"), default=None,
                               help=f"similarity metric (default {default})")
        else:
            group.add_argument(_kebab(f.name), type=type(default), default=None,
                               help=f"default {default}")


def _registration_from(args) -> RegistrationConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RegistrationConfig)
                 if getattr(args, f.name, None) is not None}
    return RegistrationConfig(**overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hedi", description=(
        "Abdominal wall displacement, strain and instability from a rest/Valsalva scan pair."))
    parser.add_argument("--version", action="version", version=f"hedi {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="preflight checks on a scan pair (JSON on stdout)")
    p.add_argument("rest")
    p.add_argument("valsalva")

    p = sub.add_parser("run", help="full pipeline into an output directory")
    p.add_argument("rest", help="rest scan (.mha, .mhd or .nii)")
    p.add_argument("valsalva", help="Valsalva scan")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--labels-rest-path", "--labels-rest", dest="labels_rest_path")
    p.add_argument("--labels-valsalva-path", "--labels-valsalva", dest="labels_valsalva_path")
    p.add_argument("--threshold-mm", type=float, default=15.0)
    p.add_argument("--downsample", type=int, default=3)
    p.add_argument("--iso-spacing-mm", type=float, default=1.0)
    p.add_argument("--hu-threshold", type=float, default=-300.0)
    p.add_argument("--defect-area-cm2", type=float)
    p.add_argument("--mesh-area-cm2", type=float)
    p.add_argument("--landmarks-path", "--landmarks", dest="landmarks_path")
    p.add_argument("--z-range-mm", type=float, nargs=2, metavar=("ZMIN", "ZMAX"))
    p.add_argument("--force", action="store_true", help="run despite preflight findings")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    _add_registration_flags(p)

    p = sub.add_parser("eval-landmarks", help="compare landmark travel with a displacement field")
    p.add_argument("field")
    p.add_argument("landmarks")

    p = sub.add_parser("phantom", help="write a synthetic scan pair with its ground-truth field")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", choices=("small", "abdomen", "ct"), default="small")
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--spacing", type=float, nargs="+")
    p.add_argument("--warp", choices=("identity", "translation", "bulge"), default="bulge")
    p.add_argument("--translation", type=float, nargs=3, default=(9.0, 0.0, 0.0))
    p.add_argument("--peak-mm", type=float, default=30.0)
    p.add_argument("--width-mm", type=float, default=60.0)
    p.add_argument("--table-hu", type=float)
    p.add_argument("--format", choices=("mha", "mhd", "nii"), default="mha")
    p.add_argument("--landmarks", action="store_true", help="also write a skin landmark grid")
    p.add_argument("--landmark-pitch-mm", type=float, default=50.0)
    p.add_argument("--landmark-count", type=int, default=30)
    p.add_argument("--valsalva-labels", action="store_true")
    return parser


def _run_config(args) -> RunConfig:
    return RunConfig(
        rest_path=args.rest, valsalva_path=args.valsalva, out_dir=args.out_dir,
        labels_rest_path=args.labels_rest_path, labels_valsalva_path=args.labels_valsalva_path,
        threshold_mm=args.threshold_mm, downsample=args.downsample,
        iso_spacing_mm=args.iso_spacing_mm, hu_threshold=args.hu_threshold,
        defect_area_cm2=args.defect_area_cm2, mesh_area_cm2=args.mesh_area_cm2,
        landmarks_path=args.landmarks_path,
        z_range_mm=tuple(args.z_range_mm) if args.z_range_mm else None,
        force=args.force, figures=not args.no_figures,
        registration=_registration_from(args),
    )


def _dispatch(args) -> int:
    if args.command == "validate":
        report = validate_scan_pair(load_volume(args.rest, kind=INTENSITY),
                                    load_volume(args.valsalva, kind=INTENSITY))
        print(json.dumps(report.to_dict(), indent=2))
        return EXIT_OK if report.valid else EXIT_DOMAIN
    if args.command == "run":
        code, report = cmd_run(_run_config(args))
        if report is not None:
            print(json.dumps({"out_dir": args.out_dir,
                              "unstable_area_cm2": report.to_dict()["unstable_area_cm2"],
                              "max_displacement_mm": report.to_dict()["max_displacement_mm"]},
                             indent=2))
        return code
    if args.command == "eval-landmarks":
        evaluation = evaluate_landmarks(load_landmarks(args.landmarks), load_field(args.field))
        print(json.dumps(evaluation.to_dict(), indent=2))
        return EXIT_OK
    if args.command == "phantom":
        return cmd_phantom(args)
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except HediError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
