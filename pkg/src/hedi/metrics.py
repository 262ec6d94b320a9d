"""Hernia metrics, landmark evaluation and the JSON report."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BothZero, EmptyLandmarkSet, IoFailure, ReportInvariantError,
                     ZeroDefectArea)
from .volume import LABEL, DisplacementField, ImageVolume, LabelCodes, LandmarkSet

__all__ = [
    "CONVENTIONS", "volume_of_label", "loss_of_domain", "mesh_defect_ratio",
    "LandmarkResult", "LandmarkEvaluation", "evaluate_landmarks",
    "HerniaReport", "write_report", "read_report", "label_volumes",
]

# Loss-of-domain conventions: hernia share of the total content (default) or
# hernia relative to the cavity alone.
CONVENTIONS = {
    "sabbagh": "hernia / (hernia + cavity)",
    "tanaka": "hernia / cavity",
}
SIGNIFICANT_DIGITS = 6


def volume_of_label(labels: ImageVolume, code: int) -> float:
    """Volume in mm³ of all voxels equal to ``code``."""
    if labels.kind != LABEL:
        raise ValueError(f"volume_of_label expects a label volume, got {labels.kind}")
    count = int(np.count_nonzero(labels.data == code))
    return count * labels.grid.voxel_volume


def label_volumes(labels: ImageVolume) -> dict[str, float]:
    """Cavity and hernia-sac volumes (mm³) from a label volume."""
    return {
        "cavity": volume_of_label(labels, LabelCodes.ABDOMINAL_CAVITY),
        "hernia": volume_of_label(labels, LabelCodes.HERNIA_SAC),
    }


def loss_of_domain(hernia_mm3: float, cavity_mm3: float, convention: str = "sabbagh") -> float:
    if hernia_mm3 < 0 or cavity_mm3 < 0:
        raise ValueError("volumes must be non-negative")
    if convention == "sabbagh":
        total = hernia_mm3 + cavity_mm3
        if total == 0:
            raise BothZero("hernia and cavity volumes are both zero")
        return hernia_mm3 / total
    if convention == "tanaka":
        if cavity_mm3 == 0:
            raise BothZero("cavity volume is zero")
        return hernia_mm3 / cavity_mm3
    raise ValueError(f"unknown loss-of-domain convention {convention!r}")


def mesh_defect_ratio(mesh_area_cm2: float, defect_area_cm2: float) -> float:
    if not defect_area_cm2 > 0:
        raise ZeroDefectArea(f"defect area must be positive, got {defect_area_cm2}")
    if mesh_area_cm2 < 0:
        raise ValueError("mesh area must be non-negative")
    return mesh_area_cm2 / defect_area_cm2


# -- landmarks -----------------------------------------------------------------

@dataclass(frozen=True)
class LandmarkResult:
    id: str
    measured_mm: float
    predicted_mm: float | None
    abs_error_mm: float | None
    in_bounds: bool

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "measured_mm": self.measured_mm,
            "predicted_mm": self.predicted_mm,
            "abs_error_mm": self.abs_error_mm,
            "in_bounds": self.in_bounds,
        }


@dataclass(frozen=True)
class LandmarkEvaluation:
    per_landmark: list[LandmarkResult]
    mae_mm: float
    normalized_error: float | None
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mae_mm": self.mae_mm,
            "normalized_error": self.normalized_error,
            "n_used": len(self.per_landmark) - len(self.excluded),
            "excluded_out_of_bounds": list(self.excluded),
            "per_landmark": [r.to_dict() for r in self.per_landmark],
        }


def evaluate_landmarks(landmarks: LandmarkSet, field: DisplacementField) -> LandmarkEvaluation:
    """Compare measured landmark travel with the field's displacement magnitude.

    Landmarks whose rest point lies outside the field are reported with
    ``in_bounds=False`` and left out of the aggregates. Sums use ``math.fsum``
    so the aggregates do not depend on landmark order.
    """
    if len(landmarks) == 0:
        raise EmptyLandmarkSet("landmark set is empty")
    from .registration import sample_displacement

    rest = landmarks.rest_points
    measured = np.linalg.norm(landmarks.valsalva_points - rest, axis=1)
    grid = field.grid
    inside = grid.contains(rest, tol=1e-6 * max(grid.spacing))
    predicted = np.full(len(rest), np.nan)
    if inside.any():
        vec = sample_displacement(field, rest[inside])
        predicted[inside] = np.linalg.norm(vec, axis=1)

    results, excluded, errors, used_measured = [], [], [], []
    for lm, meas, pred, ok in zip(landmarks, measured, predicted, inside):
        if ok:
            err = abs(float(meas) - float(pred))
            results.append(LandmarkResult(lm.id, float(meas), float(pred), err, True))
            errors.append(err)
            used_measured.append(float(meas))
        else:
            results.append(LandmarkResult(lm.id, float(meas), None, None, False))
            excluded.append(lm.id)
    if not errors:
        raise EmptyLandmarkSet("every landmark lies outside the displacement field")
    mae = math.fsum(errors) / len(errors)
    peak = max(used_measured)
    normalized = mae / peak if peak > 0 else (0.0 if mae == 0 else None)
    return LandmarkEvaluation(results, mae, normalized, excluded)


# -- report --------------------------------------------------------------------

def _round(value):
    """Round floats to 6 significant digits, recursively."""
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return float(f"{v:.{SIGNIFICANT_DIGITS}g}") if math.isfinite(v) else v
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, dict):
        return {k: _round(v) for k, v in value.items() if v is not None}
    if isinstance(value, (list, tuple)):
        return [_round(v) for v in value]
    return value


@dataclass
class HerniaReport:
    threshold_mm: float
    unstable_area_cm2: float
    max_displacement_mm: float
    cavity_volume_mm3: dict | None = None      # {"rest": ..., "valsalva": ...}
    hernia_volume_mm3: dict | None = None
    loss_of_domain: float | None = None        # from the rest-scan volumes
    loss_of_domain_valsalva: float | None = None
    loss_of_domain_convention: str | None = None
    defect_area_cm2: float | None = None
    mesh_area_cm2: float | None = None
    mesh_defect_ratio: float | None = None
    landmark_eval: dict | None = None          # {"mae_mm", "normalized_error", ...}
    max_principal_strain_peak: float | None = None
    strain_hotspots: list | None = None
    surface_z_range_mm: list | None = None
    provenance: dict = field(default_factory=dict)

    def check(self) -> "HerniaReport":
        problems = []

        def nonneg(name, value):
            if value is not None and not (math.isfinite(value) and value >= 0):
                problems.append(f"{name} must be finite and non-negative, got {value}")

        for name in ("threshold_mm", "unstable_area_cm2", "max_displacement_mm",
                     "defect_area_cm2", "mesh_area_cm2", "mesh_defect_ratio"):
            nonneg(name, getattr(self, name))
        for name in ("cavity_volume_mm3", "hernia_volume_mm3"):
            for phase, value in (getattr(self, name) or {}).items():
                nonneg(f"{name}.{phase}", value)
        for name in ("loss_of_domain", "loss_of_domain_valsalva"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                problems.append(f"{name} must lie in [0, 1], got {value}")
        has_areas = self.defect_area_cm2 is not None and self.mesh_area_cm2 is not None
        if (self.mesh_defect_ratio is not None) != has_areas:
            problems.append("mesh_defect_ratio requires both defect_area_cm2 and mesh_area_cm2")
        if self.loss_of_domain is not None and self.loss_of_domain_convention is None:
            problems.append("loss_of_domain needs its convention")
        if problems:
            raise ReportInvariantError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        out = {
            "threshold_mm": self.threshold_mm,
            "unstable_area_cm2": self.unstable_area_cm2,
            "max_displacement_mm": self.max_displacement_mm,
            "cavity_volume_mm3": self.cavity_volume_mm3,
            "hernia_volume_mm3": self.hernia_volume_mm3,
            "loss_of_domain": self.loss_of_domain,
            "loss_of_domain_valsalva": self.loss_of_domain_valsalva,
            "loss_of_domain_convention": self.loss_of_domain_convention,
            "defect_area_cm2": self.defect_area_cm2,
            "mesh_area_cm2": self.mesh_area_cm2,
            "mesh_defect_ratio": self.mesh_defect_ratio,
            "landmark_eval": self.landmark_eval,
            "max_principal_strain_peak": self.max_principal_strain_peak,
            "strain_hotspots": self.strain_hotspots,
            "surface_z_range_mm": self.surface_z_range_mm,
            "provenance": self.provenance,
        }
        return _round(out)

    @classmethod
    def from_dict(cls, data: dict) -> "HerniaReport":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ReportInvariantError(f"unknown report keys: {sorted(unknown)}")
        return cls(**data).check()


def write_report(report: HerniaReport, path) -> None:
    """Write UTF-8 JSON with fixed key order and 6-significant-digit floats."""
    report.check()
    path = Path(path)
    if not path.parent.is_dir() or not os.access(path.parent, os.W_OK):
        raise IoFailure(f"parent directory of {path} is not writable")
    text = json.dumps(report.to_dict(), indent=2, ensure_ascii=False, allow_nan=False)
    try:
        path.write_text(text + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_report(path) -> HerniaReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return HerniaReport.from_dict(data)
