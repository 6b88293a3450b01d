"""Regular-grid 3D volumes and vector fields.

Scalars are stored as float64 arrays of shape (nx, ny, nz); vector fields
as (3, nx, ny, nz) with components in voxel units. Axis 0 of a position is
x, axis 2 is z; on disk the payload is written x-fastest. Volumes and
fields are treated as immutable after construction.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DataError, EmptyMaskError, GridMismatchError

INTENSITY = "intensity"
MASK = "mask"
VELOCITY = "velocity"
DISPLACEMENT = "displacement"

#: Grid the clinical pipeline resamples to: (160, 160, 100) voxels at
#: (1.5, 1.37, 2) mm.
CLINICAL_DIMS = (160, 160, 100)
CLINICAL_SPACING = (1.5, 1.37, 2.0)


@dataclass(frozen=True)
class Grid:
    """Regular 3D voxel grid with physical spacing in mm."""

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise DataError("grid needs 3 dims, 3 spacings, 3 origin components")
        if any(d < 2 for d in dims):
            raise DataError(f"all dims must be >= 2, got {dims}")
        if any(s <= 0 for s in spacing):
            raise DataError(f"all spacings must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_count(self):
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self):
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def half(self):
        """Half-resolution grid covering the same physical extent."""
        dims = tuple(max(2, (d + 1) // 2) for d in self.dims)
        spacing = tuple(2.0 * s for s in self.spacing)
        return Grid(dims, spacing, self.origin)


def _as_volume_data(grid, data):
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.shape != grid.dims:
        if arr.size == grid.voxel_count:
            arr = arr.reshape(grid.dims)
        else:
            raise DataError(f"data shape {arr.shape} does not match grid dims {grid.dims}")
    return arr


@dataclass(frozen=True)
class Volume3:
    """Scalar image or soft mask on a regular grid."""

    grid: Grid
    data: np.ndarray
    kind: str = INTENSITY

    def __post_init__(self):
        arr = _as_volume_data(self.grid, self.data)
        if self.kind not in (INTENSITY, MASK):
            raise DataError(f"unknown volume kind {self.kind!r}")
        if not np.isfinite(arr).all():
            raise DataError("volume contains non-finite values")
        if self.kind == MASK and (arr.min() < 0.0 or arr.max() > 1.0):
            raise DataError("mask values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    def same_grid_as(self, other):
        return self.grid == other.grid


@dataclass(frozen=True)
class VectorField3:
    """Per-voxel 3-vector field in voxel units (velocity or displacement)."""

    grid: Grid
    data: np.ndarray
    semantics: str = DISPLACEMENT

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        expected = (3,) + self.grid.dims
        if arr.shape != expected:
            if arr.size == 3 * self.grid.voxel_count:
                arr = arr.reshape(expected)
            else:
                raise DataError(f"field shape {arr.shape} does not match {expected}")
        if self.semantics not in (VELOCITY, DISPLACEMENT):
            raise DataError(f"unknown field semantics {self.semantics!r}")
        if not np.isfinite(arr).all():
            raise DataError("field contains non-finite values")
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, grid, semantics=DISPLACEMENT):
        return cls(grid, np.zeros((3,) + grid.dims), semantics)


def zeros_like_grid(grid, kind=INTENSITY):
    return Volume3(grid, np.zeros(grid.dims), kind)


# ---------------------------------------------------------------------------
# Sampling


def _prep_points(p):
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise DataError(f"points must have 3 components, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise DataError("sampling points must be finite")
    return pts, single


def sample_trilinear(vol, p):
    """Trilinear interpolation of `vol` at voxel-coordinate point(s) `p`.

    Coordinates outside the grid are clamped to the boundary. `p` may be a
    single (3,) point or an (N, 3) array; returns a scalar or an (N,) array.
    """
    pts, single = _prep_points(p)
    out = np.empty(pts.shape[0])
    _kernels.sample_points_scalar(
        vol.data,
        np.ascontiguousarray(pts[:, 0]),
        np.ascontiguousarray(pts[:, 1]),
        np.ascontiguousarray(pts[:, 2]),
        out,
    )
    return float(out[0]) if single else out


def sample_field_trilinear(f, p):
    """Componentwise trilinear interpolation of a vector field at `p`."""
    pts, single = _prep_points(p)
    px = np.ascontiguousarray(pts[:, 0])
    py = np.ascontiguousarray(pts[:, 1])
    pz = np.ascontiguousarray(pts[:, 2])
    out = np.empty((pts.shape[0], 3))
    col = np.empty(pts.shape[0])
    for c in range(3):
        _kernels.sample_points_scalar(f.data[c], px, py, pz, col)
        out[:, c] = col
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Finite differences


def central_diff(arr, axis):
    """Central differences along `axis`, one-sided at the two boundary slabs.

    Unit voxel steps; spacing is deliberately not applied.
    """
    out = np.empty_like(arr)
    n = arr.shape[axis]
    src = np.moveaxis(arr, axis, 0)
    dst = np.moveaxis(out, axis, 0)
    dst[1:n - 1] = 0.5 * (src[2:n] - src[0:n - 2])
    dst[0] = src[1] - src[0]
    dst[n - 1] = src[n - 1] - src[n - 2]
    return out


def central_diff_adjoint(g, axis):
    """Exact adjoint of central_diff (transpose of the stencil matrix)."""
    out = np.zeros_like(g)
    n = g.shape[axis]
    gs = np.moveaxis(g, axis, 0)
    dst = np.moveaxis(out, axis, 0)
    dst[2:n] += 0.5 * gs[1:n - 1]
    dst[0:n - 2] -= 0.5 * gs[1:n - 1]
    dst[1] += gs[0]
    dst[0] -= gs[0]
    dst[n - 1] += gs[n - 1]
    dst[n - 2] -= gs[n - 1]
    return out


def gradient_central(f):
    """Per-voxel Jacobian of a field: J[i, j] = d f_i / d x_j.

    Central differences at interior voxels, one-sided at boundaries, in
    per-voxel units. Returns an array of shape (3, 3, nx, ny, nz).
    """
    nx, ny, nz = f.grid.dims
    out = np.empty((3, 3, nx, ny, nz))
    for i in range(3):
        for j in range(3):
            out[i, j] = central_diff(f.data[i], axis=j)
    return out


# ---------------------------------------------------------------------------
# Resolution changes


def _upsample_axis(arr, n_fine, axis):
    # Separable linear interpolation at fine coordinates i/2, clamped at the
    # far edge when n_fine is even.
    src = np.moveaxis(arr, axis, 0)
    hn = src.shape[0]
    out_shape = (n_fine,) + src.shape[1:]
    dst = np.empty(out_shape, dtype=arr.dtype)
    n_even = (n_fine + 1) // 2
    dst[0::2] = src[:n_even]
    q = n_fine // 2
    if q > 0:
        odd = dst[1::2]
        if n_fine % 2 == 1:
            odd[:] = 0.5 * (src[0:q] + src[1:q + 1])
        else:
            odd[:q - 1] = 0.5 * (src[0:q - 1] + src[1:q])
            odd[q - 1] = src[hn - 1]
    return np.moveaxis(dst, 0, axis)


def _upsample_axis_adjoint(g, hn, axis):
    gs = np.moveaxis(g, axis, 0)
    n_fine = gs.shape[0]
    out = np.zeros((hn,) + gs.shape[1:], dtype=g.dtype)
    n_even = (n_fine + 1) // 2
    out[:n_even] += gs[0::2]
    q = n_fine // 2
    if q > 0:
        odd = gs[1::2]
        out[0:q] += 0.5 * odd
        if n_fine % 2 == 1:
            out[1:q + 1] += 0.5 * odd
        else:
            out[1:hn] += 0.5 * odd[:q - 1]
            out[hn - 1] += 0.5 * odd[q - 1]
    return np.moveaxis(out, 0, axis)


def upsample_array(arr, fine_dims):
    """Trilinear upsampling of (..., hx, hy, hz) data to fine_dims (no rescale)."""
    out = arr
    for axis in range(3):
        out = _upsample_axis(out, fine_dims[axis], axis=out.ndim - 3 + axis)
    return out


def upsample_array_adjoint(g, coarse_dims):
    out = g
    for axis in range(2, -1, -1):
        out = _upsample_axis_adjoint(out, coarse_dims[axis], axis=out.ndim - 3 + axis)
    return out


def _check_upsample_dims(coarse_dims, fine_dims):
    for c, f in zip(coarse_dims, fine_dims):
        if max(2, (f + 1) // 2) != c:
            raise DataError(
                f"fine dims {fine_dims} are not a 2x refinement of {coarse_dims}")


def upsample2x(f, target_dims=None):
    """Upsample a half-resolution field to double dims (clipped to target).

    Component values are multiplied by 2 so displacements stay in voxel
    units of the fine grid.
    """
    coarse = f.grid
    if target_dims is None:
        target_dims = tuple(2 * d for d in coarse.dims)
    else:
        target_dims = tuple(int(d) for d in target_dims)
        _check_upsample_dims(coarse.dims, target_dims)
    fine_grid = Grid(target_dims,
                     tuple(s / 2.0 for s in coarse.spacing),
                     coarse.origin)
    data = 2.0 * upsample_array(f.data, target_dims)
    return VectorField3(fine_grid, data, f.semantics)


# ---------------------------------------------------------------------------
# Cropping


def crop_to_bbox(vol, mask, margin=0):
    """Crop `vol` to the bounding box of mask > 0.5, dilated by `margin`.

    Returns the cropped volume and the (x, y, z) offset of its first voxel
    in the original grid.
    """
    if vol.grid != mask.grid:
        raise GridMismatchError("volume and mask grids differ")
    sel = mask.data > 0.5
    if not sel.any():
        raise EmptyMaskError("cannot crop to an empty mask")
    lo = []
    hi = []
    for axis in range(3):
        proj = sel.any(axis=tuple(a for a in range(3) if a != axis))
        idx = np.nonzero(proj)[0]
        lo.append(max(0, int(idx[0]) - int(margin)))
        hi.append(min(vol.grid.dims[axis] - 1, int(idx[-1]) + int(margin)))
    data = vol.data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    origin = tuple(vol.grid.origin[a] + lo[a] * vol.grid.spacing[a] for a in range(3))
    grid = Grid(tuple(h - l + 1 for l, h in zip(lo, hi)), vol.grid.spacing, origin)
    return Volume3(grid, data.copy(), vol.kind), tuple(lo)
