"""Greedy symmetric diffeomorphic registration of body masks.

Both images are deformed towards a common midpoint space ``R``. Two half
maps are kept on the shared grid, ``A: R -> static`` and ``B: R -> moving``.
Each iteration computes metric-gradient updates for both sides, smooths and
rescales them to a small maximum step and composes them into the half maps.
Once the finest level has finished, the half maps are inverted by fixed-point
iteration and the final transforms are ``forward = B o A^-1`` (static frame
to moving frame) and ``inverse = A o B^-1``.

Internally fields are component-first arrays in voxel units; they are
converted to mm ``DisplacementField`` objects at the boundary.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .errors import (DivergenceDetected, EmptyInput, GridMismatch,
                     InvalidConfig, OutOfBounds)
from .interp import gradient, index_grid, sample, sample_components
from .volume import (LABEL, MASK, SCALAR, DisplacementField, Grid,
                     ImageVolume, require_same_grid)

log = logging.getLogger(__name__)

__all__ = [
    "RegistrationConfig", "DiffeomorphicMap", "register_symmetric", "warp",
    "compose", "jacobian_determinant", "sample_displacement", "invert_field",
]


@dataclass
class RegistrationConfig:
    pyramid_levels: int = 3
    iterations_per_level: tuple[int, ...] = (100, 50, 25)
    metric: str = "cc"
    cc_radius_vox: int = 4
    update_smoothing_sigma_vox: float = 4.0
    total_smoothing_sigma_vox: float = 1.0
    step_length_vox: float = 0.25
    convergence_window: int = 10
    convergence_eps: float = 1e-5
    # Relative rise over a strictly increasing window that counts as divergence.
    # Fixed-length steps near the optimum can creep up by a few 1e-4.
    divergence_tolerance: float = 1e-3
    # Gaussian blur applied to the (near-binary) masks at every pyramid level.
    image_smoothing_sigma_vox: float = 1.0
    # Upper bound on fixed-point sweeps when inverting the half maps.
    inverse_iterations: int = 30

    def __post_init__(self):
        self.iterations_per_level = tuple(int(n) for n in self.iterations_per_level)

    def validate(self) -> "RegistrationConfig":
        if self.pyramid_levels < 1:
            raise InvalidConfig("pyramid_levels must be >= 1")
        if len(self.iterations_per_level) != self.pyramid_levels:
            raise InvalidConfig(
                f"iterations_per_level has {len(self.iterations_per_level)} entries, "
                f"expected {self.pyramid_levels}"
            )
        if any(n < 1 for n in self.iterations_per_level):
            raise InvalidConfig("iterations_per_level entries must be positive")
        if not 0 < self.step_length_vox <= 0.5:
            raise InvalidConfig("step_length_vox must lie in (0, 0.5]")
        if self.metric not in ("cc", "ssd"):
            raise InvalidConfig(f"unknown metric {self.metric!r}")
        if self.cc_radius_vox < 1:
            raise InvalidConfig("cc_radius_vox must be >= 1")
        if self.convergence_window < 2:
            raise InvalidConfig("convergence_window must be >= 2")
        for name in ("update_smoothing_sigma_vox", "total_smoothing_sigma_vox",
                     "image_smoothing_sigma_vox", "convergence_eps",
                     "divergence_tolerance"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iterations_per_level"] = list(self.iterations_per_level)
        return d


@dataclass
class DiffeomorphicMap:
    forward: DisplacementField
    inverse: DisplacementField
    metric_trace: list[float] = field(default_factory=list)
    iterations_per_level: list[int] = field(default_factory=list)

    @property
    def grid(self) -> Grid:
        return self.forward.grid


# -- field utilities (mm, world frame) -----------------------------------------

def _components(f: DisplacementField) -> np.ndarray:
    """mm vectors ``(nx, ny, nz, 3)`` -> component-first voxel units."""
    sp = np.asarray(f.spacing).reshape(3, 1, 1, 1)
    return np.moveaxis(np.asarray(f.vectors, dtype=np.float64), -1, 0) / sp


def _to_field(comp: np.ndarray, grid: Grid) -> DisplacementField:
    sp = np.asarray(grid.spacing).reshape(3, 1, 1, 1)
    return DisplacementField(np.moveaxis(comp * sp, 0, -1).copy(), grid.spacing, grid.origin)


def _compose_vox(f: np.ndarray, g: np.ndarray, ident: np.ndarray) -> np.ndarray:
    """``(f o g)(x) = g(x) + f(x + g(x))`` for component-first voxel fields."""
    return g + sample_components(f, ident + g)


def _invert_vox(f: np.ndarray, inv: np.ndarray, ident: np.ndarray, sweeps: int,
                tol: float = 1e-3) -> np.ndarray:
    """Fixed-point refinement of ``inv`` so that ``x + inv(x) + f(x + inv(x)) = x``.

    Stops early once no vector changes by more than ``tol`` voxels.
    """
    for _ in range(sweeps):
        new = -sample_components(f, ident + inv)
        change = np.abs(new - inv).max()
        inv = new
        if change < tol:
            break
    return inv


def compose(f: DisplacementField, g: DisplacementField) -> DisplacementField:
    """Displacement of the map ``x -> x + g(x) -> (x + g(x)) + f(x + g(x))``."""
    require_same_grid(f, g, "composed fields")
    grid = f.grid
    comp = _compose_vox(_components(f), _components(g), index_grid(grid.dims))
    return _to_field(comp, grid)


def invert_field(f: DisplacementField, iterations: int = 20,
                 initial: DisplacementField | None = None) -> DisplacementField:
    """Numerical inverse of ``x -> x + f(x)`` by fixed-point iteration."""
    grid = f.grid
    fc = _components(f)
    inv = -fc if initial is None else _components(initial)
    inv = _invert_vox(fc, inv, index_grid(grid.dims), iterations)
    return _to_field(inv, grid)


def jacobian_determinant(field: DisplacementField) -> ImageVolume:
    """``det(I + grad u)`` per voxel, spacing aware."""
    vec = np.asarray(field.vectors, dtype=np.float64)
    jac = np.empty(field.dims + (3, 3))
    for c in range(3):
        grads = np.gradient(vec[..., c], *field.spacing, edge_order=1)
        for a in range(3):
            jac[..., c, a] = grads[a]
    jac += np.eye(3)
    det = np.linalg.det(jac)
    return ImageVolume(det, field.spacing, field.origin, SCALAR)


def sample_displacement(field: DisplacementField, point_mm, clamp: bool = False) -> np.ndarray:
    """Trilinearly interpolated displacement (mm) at world point(s) ``point_mm``.

    Accepts a single point or an array of shape ``(..., 3)``. Points outside the
    field's bounding box raise ``OutOfBounds`` unless ``clamp`` is set.
    """
    pts = np.asarray(point_mm, dtype=np.float64)
    grid = field.grid
    if not clamp:
        inside = grid.contains(pts, tol=1e-6 * max(grid.spacing))
        if not np.all(inside):
            raise OutOfBounds(f"point(s) outside field bounds {grid.bounds}")
    idx = grid.world_to_index(pts.reshape(-1, 3)).T
    vec = np.asarray(field.vectors, dtype=np.float64)
    out = np.stack([sample(vec[..., c], idx, order=1, mode="nearest") for c in range(3)], axis=-1)
    return out.reshape(pts.shape)


def warp(volume: ImageVolume, field: DisplacementField, mode: str = "linear") -> ImageVolume:
    """Resample ``volume`` as ``out(x) = in(x + u(x))`` on the volume's own grid.

    The field is interpolated at the volume's voxel centres, so both grids must
    cover the same world region (within one field voxel). Samples falling
    outside the input take the background value 0.
    """
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    vgrid, fgrid = volume.grid, field.grid
    vlo, vhi = vgrid.bounds
    flo, fhi = fgrid.bounds
    tol = np.asarray(fgrid.spacing)
    if np.any(vlo < flo - tol) or np.any(vhi > fhi + tol):
        raise GridMismatch("volume extends beyond the displacement field's world bounds")
    if vgrid.matches(fgrid):
        disp = np.moveaxis(np.asarray(field.vectors, dtype=np.float64), -1, 0)
    else:
        fidx = fgrid.world_to_index(vgrid.world_coords()).reshape(-1, 3).T
        vec = np.asarray(field.vectors, dtype=np.float64)
        disp = np.stack([sample(vec[..., c], fidx, order=1).reshape(vgrid.dims)
                         for c in range(3)], axis=0)
    sp = np.asarray(vgrid.spacing).reshape(3, 1, 1, 1)
    coords = index_grid(vgrid.dims) + disp / sp
    order = 0 if mode == "nearest" or volume.kind == LABEL else 1
    data = volume.data
    out = sample(data if order == 0 else data.astype(np.float64), coords, order=order,
                 mode="constant", cval=0.0)
    if order == 0:
        out = out.astype(data.dtype)
        kind = volume.kind
    else:
        kind = volume.kind if volume.kind != MASK else SCALAR
        if np.issubdtype(data.dtype, np.floating):
            out = out.astype(data.dtype)
    return ImageVolume(out, volume.spacing, volume.origin, kind)


# -- similarity metrics ---------------------------------------------------------

def _cc_steps(I: np.ndarray, J: np.ndarray, radius: int):
    """Local normalised cross-correlation and its gradient factors.

    Returns ``(energy, dI, dJ)`` where ``dI``/``dJ`` are the derivatives of the
    local correlation with respect to the intensities of ``I`` and ``J``.
    """
    size = 2 * radius + 1
    mI = uniform_filter(I, size, mode="nearest")
    mJ = uniform_filter(J, size, mode="nearest")
    sII = uniform_filter(I * I, size, mode="nearest") - mI * mI
    sJJ = uniform_filter(J * J, size, mode="nearest") - mJ * mJ
    sIJ = uniform_filter(I * J, size, mode="nearest") - mI * mJ
    valid = (sII > 1e-5) & (sJJ > 1e-5)
    sII = np.where(valid, sII, 1.0)
    sJJ = np.where(valid, sJJ, 1.0)
    sIJ = np.where(valid, sIJ, 0.0)
    Ih = I - mI
    Jh = J - mJ
    factor = 2.0 * sIJ / (sII * sJJ)
    dI = factor * (Jh - sIJ / sII * Ih)
    dJ = factor * (Ih - sIJ / sJJ * Jh)
    cc = sIJ * sIJ / (sII * sJJ)
    energy = -float(np.sum(np.minimum(cc, 1.0))) / I.size
    return energy, dI, dJ


def _ssd_steps(I: np.ndarray, J: np.ndarray):
    diff = I - J
    return float(np.mean(diff * diff)), -diff, diff


# -- optimisation ---------------------------------------------------------------

def _smooth_vec(v: np.ndarray, sigma: float, mode: str = "nearest") -> np.ndarray:
    if sigma <= 0:
        return v
    return np.stack([gaussian_filter(v[c], sigma, mode=mode) for c in range(3)])


def _zero_border(v: np.ndarray) -> np.ndarray:
    v[:, 0] = v[:, -1] = 0
    v[:, :, 0] = v[:, :, -1] = 0
    v[:, :, :, 0] = v[:, :, :, -1] = 0
    return v


def _downsample2(img: np.ndarray) -> np.ndarray:
    return gaussian_filter(img, 1.0, mode="nearest")[::2, ::2, ::2]


def _upsample_field(v: np.ndarray, shape) -> np.ndarray:
    """Resample a coarse voxel-unit field onto the grid twice as fine."""
    coords = index_grid(shape) / 2.0
    return 2.0 * sample_components(v, coords)


class _LevelState:
    """Half maps ``a`` (R -> static) and ``b`` (R -> moving) in voxel units."""

    def __init__(self, shape):
        self.a = np.zeros((3,) + tuple(shape))
        self.b = np.zeros((3,) + tuple(shape))

    def upsample(self, shape) -> "_LevelState":
        new = _LevelState.__new__(_LevelState)
        new.a = _upsample_field(self.a, shape)
        new.b = _upsample_field(self.b, shape)
        return new


def _check_progress(trace: list[float], window: int, eps: float,
                    divergence_tol: float = 1e-3) -> bool:
    """Return True when the moving-window relative improvement drops below ``eps``.

    The improvement compares the mean metric over the last ``window``
    iterations with the mean over the ``window`` before it. Fixed-length steps
    make the metric jitter near the optimum, and window means keep that jitter
    from ending a level that is still improving.
    """
    if len(trace) >= window + 1:
        recent = trace[-window - 1:]
        if all(b > a for a, b in zip(recent, recent[1:])):
            rise = (recent[-1] - recent[0]) / max(abs(recent[0]), 1e-12)
            if rise > divergence_tol:
                raise DivergenceDetected(
                    f"metric increased monotonically over {window} iterations "
                    f"({recent[0]:.6g} -> {recent[-1]:.6g})"
                )
    if len(trace) < 2 * window:
        return False
    previous = float(np.mean(trace[-2 * window:-window]))
    current = float(np.mean(trace[-window:]))
    improvement = (previous - current) / max(abs(previous), 1e-12)
    return improvement < eps


def _run_level(S: np.ndarray, M: np.ndarray, st: _LevelState, cfg: RegistrationConfig,
               n_iter: int, trace: list[float]) -> int:
    ident = index_grid(S.shape)
    level_trace: list[float] = []
    done = 0
    for _ in range(n_iter):
        SR = sample(S, ident + st.a, order=1, mode="nearest")
        MR = sample(M, ident + st.b, order=1, mode="nearest")
        if cfg.metric == "cc":
            energy, dS, dM = _cc_steps(SR, MR, cfg.cc_radius_vox)
        else:
            energy, dS, dM = _ssd_steps(SR, MR)
        level_trace.append(energy)
        trace.append(energy)
        done += 1

        step_s = _zero_border(_smooth_vec(dS * gradient(SR), cfg.update_smoothing_sigma_vox))
        step_m = _zero_border(_smooth_vec(dM * gradient(MR), cfg.update_smoothing_sigma_vox))
        max_norm = max(np.sqrt((step_s ** 2).sum(0)).max(), np.sqrt((step_m ** 2).sum(0)).max())
        if max_norm <= 1e-12:
            break
        scale = cfg.step_length_vox / max_norm
        step_s *= scale
        step_m *= scale

        st.a = _compose_vox(st.a, step_s, ident)
        st.b = _compose_vox(st.b, step_m, ident)
        if cfg.total_smoothing_sigma_vox > 0:
            st.a = _smooth_vec(st.a, cfg.total_smoothing_sigma_vox)
            st.b = _smooth_vec(st.b, cfg.total_smoothing_sigma_vox)

        if _check_progress(level_trace, cfg.convergence_window, cfg.convergence_eps,
                           cfg.divergence_tolerance):
            break
    return done


def register_symmetric(static_mask: ImageVolume, moving_mask: ImageVolume,
                       config: RegistrationConfig | None = None) -> DiffeomorphicMap:
    """Register ``moving_mask`` to ``static_mask`` with a symmetric diffeomorphism.

    ``forward`` is defined on the static grid and maps static points ``x`` to
    ``x + forward(x)`` in the moving frame, so ``warp(moving, forward)``
    approximates ``static``. ``inverse`` is the opposite map on the same grid.
    """
    cfg = (config or RegistrationConfig()).validate()
    require_same_grid(static_mask, moving_mask, "static and moving masks")
    S0 = np.asarray(static_mask.data, dtype=np.float64)
    M0 = np.asarray(moving_mask.data, dtype=np.float64)
    if not S0.any() or not M0.any():
        raise EmptyInput("registration needs non-empty masks")
    if min(S0.shape) < 4:
        raise EmptyInput(f"grid {S0.shape} is too small to register")

    pyramid = [(S0, M0)]
    for _ in range(cfg.pyramid_levels - 1):
        s, m = pyramid[-1]
        if min(s.shape) < 8:
            break
        pyramid.append((_downsample2(s), _downsample2(m)))
    n_levels = len(pyramid)
    iterations = list(cfg.iterations_per_level[-n_levels:])

    trace: list[float] = []
    done_per_level: list[int] = []
    state = None
    for level in range(n_levels - 1, -1, -1):
        S, M = pyramid[level]
        if cfg.image_smoothing_sigma_vox > 0:
            S = gaussian_filter(S, cfg.image_smoothing_sigma_vox, mode="nearest")
            M = gaussian_filter(M, cfg.image_smoothing_sigma_vox, mode="nearest")
        state = _LevelState(S.shape) if state is None else state.upsample(S.shape)
        n_iter = iterations[n_levels - 1 - level]
        done = _run_level(S, M, state, cfg, n_iter, trace)
        done_per_level.append(done)
        log.debug("level %d: %d iterations, metric %.6g", level, done, trace[-1])

    ident = index_grid(S0.shape)
    # The half-map inverses are not needed while optimising, only here.
    ai = _invert_vox(state.a, -state.a, ident, cfg.inverse_iterations)
    bi = _invert_vox(state.b, -state.b, ident, cfg.inverse_iterations)
    fwd = _compose_vox(state.b, ai, ident)
    inv = _compose_vox(state.a, bi, ident)
    grid = static_mask.grid
    return DiffeomorphicMap(_to_field(fwd, grid), _to_field(inv, grid), trace, done_per_level)
