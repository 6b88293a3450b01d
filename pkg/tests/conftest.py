import numpy as np
import pytest

from cycreg.grid import Grid, MASK, Volume3, VectorField3


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_grid(n=8, spacing=(1.0, 1.0, 1.0)):
    return Grid((n, n, n), spacing)


def sphere_mask(grid, center, radius):
    coords = np.indices(grid.dims, dtype=np.float64)
    r2 = sum((coords[i] - center[i]) ** 2 for i in range(3))
    return Volume3(grid, (r2 <= radius * radius).astype(np.float64), MASK)


def soft_sphere(grid, center, radius, steep=1.5):
    coords = np.indices(grid.dims, dtype=np.float64)
    d = np.sqrt(sum((coords[i] - center[i]) ** 2 for i in range(3)))
    return Volume3(grid, 1.0 / (1.0 + np.exp((d - radius) * steep)), MASK)


def smooth_field(grid, rng, scale=0.5, sigma=1.0, semantics="displacement"):
    from scipy.ndimage import gaussian_filter
    data = np.stack([gaussian_filter(rng.standard_normal(grid.dims), sigma=sigma)
                     for _ in range(3)])
    data *= scale / max(np.abs(data).max(), 1e-12)
    return VectorField3(grid, np.ascontiguousarray(data), semantics)
