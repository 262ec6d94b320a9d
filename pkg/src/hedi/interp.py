"""Trilinear / nearest sampling helpers on voxel grids."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates


def sample(data: np.ndarray, coords: np.ndarray, order: int = 1,
           mode: str = "nearest", cval: float = 0.0) -> np.ndarray:
    """Sample a scalar array at index coordinates ``coords`` (shape ``(3, ...)``)."""
    out = map_coordinates(data, coords, order=order, mode=mode, cval=cval, prefilter=False)
    return out


def sample_components(vectors: np.ndarray, coords: np.ndarray, mode: str = "nearest") -> np.ndarray:
    """Trilinearly sample a component-first vector array ``(3, nx, ny, nz)``."""
    out = np.empty((3,) + coords.shape[1:], dtype=np.float64)
    for c in range(3):
        out[c] = map_coordinates(vectors[c], coords, order=1, mode=mode, prefilter=False)
    return out


def index_grid(shape) -> np.ndarray:
    """Identity index coordinates, shape ``(3,) + shape``."""
    return np.indices(shape, dtype=np.float64)


def gradient(data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Central differences inside, one-sided at the borders; shape ``(3,) + data.shape``."""
    return np.stack(np.gradient(data, *spacing, edge_order=1), axis=0)
