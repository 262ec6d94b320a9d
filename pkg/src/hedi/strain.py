"""Green-Lagrange strain and principal strains from a displacement field.

Tensors are stored per voxel as six components in the order
``Exx, Eyy, Ezz, Exy, Exz, Eyz``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGrid
from .volume import SCALAR, DisplacementField, Grid, ImageVolume

__all__ = [
    "COMPONENTS", "StrainVolume", "deformation_gradient", "green_lagrange",
    "max_principal_strain", "principal_strains", "strain_from_field",
    "pack_symmetric", "unpack_symmetric",
]

COMPONENTS = ("Exx", "Eyy", "Ezz", "Exy", "Exz", "Eyz")
_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))

# Relative size of the deviatoric part below which the tensor is treated as
# isotropic, and the |r| margin at which acos loses too many digits.
_ISOTROPIC_RTOL = 1e-12
_ACOS_MARGIN = 1e-9


def pack_symmetric(m: np.ndarray) -> np.ndarray:
    """(..., 3, 3) symmetric matrices -> (..., 6) components (upper triangle)."""
    return np.stack([m[..., i, j] for i, j in _PAIRS], axis=-1)


def unpack_symmetric(e: np.ndarray) -> np.ndarray:
    """(..., 6) components -> (..., 3, 3) symmetric matrices."""
    m = np.empty(e.shape[:-1] + (3, 3), dtype=e.dtype)
    for c, (i, j) in enumerate(_PAIRS):
        m[..., i, j] = e[..., c]
        m[..., j, i] = e[..., c]
    return m


@dataclass(frozen=True)
class StrainVolume:
    tensors: np.ndarray        # (nx, ny, nz, 6), dimensionless
    max_principal: np.ndarray  # (nx, ny, nz)
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.max_principal.shape  # type: ignore[return-value]

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin)

    @property
    def border(self) -> np.ndarray:
        """True where one-sided differences were used (outermost voxel layer)."""
        flag = np.ones(self.dims, dtype=bool)
        flag[1:-1, 1:-1, 1:-1] = False
        return flag

    def component(self, name: str) -> np.ndarray:
        return self.tensors[..., COMPONENTS.index(name)]

    def max_principal_volume(self) -> ImageVolume:
        return ImageVolume(self.max_principal, self.spacing, self.origin, SCALAR)


def deformation_gradient(field: DisplacementField) -> np.ndarray:
    """F = I + grad(u), shape ``dims + (3, 3)`` with ``F[..., i, j] = d x_i / d X_j``."""
    if min(field.dims) < 3:
        raise DegenerateGrid(f"strain needs at least 3 voxels per axis, got {field.dims}")
    F = np.empty(field.dims + (3, 3), dtype=np.float64)
    for i in range(3):
        grads = np.gradient(field.vectors[..., i].astype(np.float64), *field.spacing,
                            edge_order=1)
        for j in range(3):
            F[..., i, j] = grads[j]
        F[..., i, i] += 1.0
    return F


def green_lagrange(F: np.ndarray) -> np.ndarray:
    """E = (F^T F - I) / 2 as ``(..., 6)`` components."""
    out = np.empty(F.shape[:-2] + (6,), dtype=np.float64)
    for c, (i, j) in enumerate(_PAIRS):
        # (F^T F)_ij = sum_k F_ki F_kj
        cij = F[..., 0, i] * F[..., 0, j] + F[..., 1, i] * F[..., 1, j] + F[..., 2, i] * F[..., 2, j]
        out[..., c] = 0.5 * (cij - 1.0) if i == j else 0.5 * cij
    return out


def _jacobi_eigenvalues(m: np.ndarray, sweeps: int = 12) -> np.ndarray:
    """Cyclic Jacobi rotations on a stack of symmetric 3x3 matrices; ascending."""
    a = m.astype(np.float64, copy=True)
    n = a.shape[0]
    for _ in range(sweeps):
        off = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
        if not np.any(off > 0):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            active = apq != 0
            theta = np.zeros(n)
            with np.errstate(over="ignore"):
                # a huge theta means the rotation is negligible; t -> 0 below
                theta[active] = (a[active, q, q] - a[active, p, p]) / (2.0 * apq[active])
            t = np.where(active, np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            t = np.where(active & (theta == 0), 1.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            rot[:, p, p] = c
            rot[:, q, q] = c
            rot[:, p, q] = s
            rot[:, q, p] = -s
            a = np.einsum("nji,njk,nkl->nil", rot, a, rot)
    return np.sort(np.diagonal(a, axis1=1, axis2=2), axis=1)


def principal_strains(E: np.ndarray) -> np.ndarray:
    """All three eigenvalues of ``(..., 6)`` tensors, descending along the last axis.

    Closed-form trigonometric solution of the characteristic cubic; entries
    whose cubic is numerically degenerate (nearly repeated roots) are redone
    with Jacobi rotations.
    """
    E = np.asarray(E, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = (E[..., c] for c in range(6))
    q = (xx + yy + zz) / 3.0
    dx, dy, dz = xx - q, yy - q, zz - q
    off = xy * xy + xz * xz + yz * yz
    p = np.sqrt((dx * dx + dy * dy + dz * dz + 2.0 * off) / 6.0)
    scale = np.maximum(np.abs(E).max(axis=-1), np.finfo(float).tiny)
    isotropic = p <= _ISOTROPIC_RTOL * scale
    ps = np.where(isotropic, 1.0, p)
    # det(B) / 2 with B = (E - qI) / p
    bx, by, bz = dx / ps, dy / ps, dz / ps
    bxy, bxz, byz = xy / ps, xz / ps, yz / ps
    det = bx * (by * bz - byz * byz) - bxy * (bxy * bz - byz * bxz) + bxz * (bxy * byz - by * bxz)
    r = np.clip(0.5 * det, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    out = np.stack([l1, l2, l3], axis=-1)
    out[isotropic] = q[isotropic][:, None]

    fallback = ~isotropic & (np.abs(r) > 1.0 - _ACOS_MARGIN)
    if np.any(fallback):
        ev = _jacobi_eigenvalues(unpack_symmetric(E[fallback]))
        out[fallback] = ev[:, ::-1]
    return out


def max_principal_strain(E: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of each ``(..., 6)`` strain tensor."""
    return principal_strains(E)[..., 0]


def strain_from_field(field: DisplacementField) -> StrainVolume:
    F = deformation_gradient(field)
    E = green_lagrange(F)
    return StrainVolume(E, max_principal_strain(E), field.spacing, field.origin)
