"""Displacement-field operations: warping, integration, composition,
inverse estimation, and Jacobian analysis.

Warps use the pull-back convention out(p) = vol(p + phi(p)). The raw-array
``*_fw`` / ``*_bw`` pairs implement the exact adjoint of each forward
operation and are chained by the energy module into full-pipeline
gradients; the public functions wrap them in the domain types.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import EmptyMaskError, GridMismatchError
from .grid import (
    DISPLACEMENT,
    MASK,
    VectorField3,
    Volume3,
    central_diff,
    central_diff_adjoint,
)


@dataclass(frozen=True)
class IntegrationConfig:
    """Scaling-and-squaring settings for velocity integration."""

    squaring_steps: int = 7

    def __post_init__(self):
        if not 0 <= self.squaring_steps <= 12:
            raise ValueError(f"squaring_steps must be in [0, 12], got {self.squaring_steps}")


@dataclass(frozen=True)
class JacobianStats:
    """Field-regularity summary over a mask region.

    l2_norm_mean is the per-voxel mean of the squared Frobenius norm of the
    displacement Jacobian; nonpositive_count counts voxels where the
    transform Jacobian det(I + grad phi) is <= 0.
    """

    l2_norm_mean: float
    nonpositive_count: int
    det_min: float


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError(f"grids differ: {a.grid.dims} vs {b.grid.dims}")


# ---------------------------------------------------------------------------
# Raw-array forward/backward primitives. Fields are (3, nx, ny, nz) float64.


def warp_fw(vol, f):
    """Warped volume and d(out)/d(coordinate) per axis; both (nx,ny,nz)."""
    out = np.empty_like(vol)
    pg = np.empty((3,) + vol.shape)
    _kernels.warp_scalar_pgrad(vol, f[0], f[1], f[2], out, pg[0], pg[1], pg[2])
    return out, pg


def warp_bw(pg, g_out):
    """Cotangent w.r.t. the displacement field from d(out)/d(coordinate)."""
    return pg * g_out


def resample_fw(a, d):
    """Field a sampled at identity + d."""
    out = np.empty_like(a)
    _kernels.resample_field(a[0], a[1], a[2], d[0], d[1], d[2],
                            out[0], out[1], out[2])
    return out


def resample_bw(a, d, g_out):
    """Adjoint of resample_fw: cotangents w.r.t. (a, d)."""
    ga = np.zeros_like(a)
    gp = np.empty_like(a)
    _kernels.resample_field_vjp(a[0], a[1], a[2], d[0], d[1], d[2],
                                g_out[0], g_out[1], g_out[2],
                                ga[0], ga[1], ga[2], gp[0], gp[1], gp[2])
    return ga, gp


def compose_fw(f1, f2):
    """Combined field of applying f1 then f2: c(p) = f2(p) + f1(p + f2(p))."""
    return f2 + resample_fw(f1, f2)


def compose_bw(f1, f2, g):
    gf1, gp = resample_bw(f1, f2, g)
    gp += g
    return gf1, gp


def integrate_fw(v, steps):
    """Scaling-and-squaring exponentiation of a stationary velocity field.

    Returns the displacement field and the list of intermediate fields
    needed by integrate_bw.
    """
    phi = v * (2.0 ** -steps)
    saved = []
    for _ in range(steps):
        saved.append(phi)
        phi = compose_fw(phi, phi)
    return phi, saved


def integrate_bw(saved, g):
    for phi in reversed(saved):
        ga, gp = resample_bw(phi, phi, g)
        ga += g
        ga += gp
        g = ga
    return g * (2.0 ** -len(saved))


def zeta_fw(f_fwd, f_bwd):
    """Inverse estimate: the backward field negated and resampled at
    forward-warped positions."""
    return -resample_fw(f_bwd, f_fwd)


def zeta_bw(f_fwd, f_bwd, g):
    gb, gp = resample_bw(f_bwd, f_fwd, -g)
    return gp, gb


# ---------------------------------------------------------------------------
# Public operations on domain types


def warp(vol, phi):
    """Resample `vol` through a displacement field (out(p) = vol(p + phi(p))).

    Mask volumes stay soft masks in [0, 1].
    """
    _check_same_grid(vol, phi)
    out = np.empty_like(vol.data)
    _kernels.warp_scalar(vol.data, phi.data[0], phi.data[1], phi.data[2], out)
    if vol.kind == MASK:
        np.clip(out, 0.0, 1.0, out=out)
    return Volume3(vol.grid, out, vol.kind)


def integrate_velocity(v, cfg=IntegrationConfig()):
    """Time-1 flow of a stationary velocity field by scaling and squaring."""
    phi, _ = integrate_fw(v.data, cfg.squaring_steps)
    return VectorField3(v.grid, phi, DISPLACEMENT)


def compose(phi1, phi2):
    """Single field equivalent to warping by phi1 then by phi2."""
    _check_same_grid(phi1, phi2)
    return VectorField3(phi1.grid, compose_fw(phi1.data, phi2.data), DISPLACEMENT)


def estimate_inverse_zeta(phi_fwd, phi_bwd):
    """Estimate the inverse of phi_fwd from the opposite-direction field."""
    _check_same_grid(phi_fwd, phi_bwd)
    return VectorField3(phi_fwd.grid, zeta_fw(phi_fwd.data, phi_bwd.data),
                        DISPLACEMENT)


def jacobian_det(phi_arr):
    """Determinant of the transform Jacobian det(I + grad phi) per voxel."""
    j = np.empty((3, 3) + phi_arr.shape[1:])
    for i in range(3):
        for a in range(3):
            j[i, a] = central_diff(phi_arr[i], axis=a)
    j[0, 0] += 1.0
    j[1, 1] += 1.0
    j[2, 2] += 1.0
    det = (
        j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
        - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
        + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0])
    )
    return det


def jacobian_stats(phi, mask):
    """Jacobian regularity statistics over voxels with mask > 0.5."""
    _check_same_grid(phi, mask)
    sel = mask.data > 0.5
    if not sel.any():
        raise EmptyMaskError("jacobian_stats needs a nonempty mask")
    sq = np.zeros(phi.grid.dims)
    for i in range(3):
        for a in range(3):
            d = central_diff(phi.data[i], axis=a)
            sq += d * d
    det = jacobian_det(phi.data)
    det_in = det[sel]
    return JacobianStats(
        l2_norm_mean=float(sq[sel].mean()),
        nonpositive_count=int((det_in <= 0.0).sum()),
        det_min=float(det_in.min()),
    )


__all__ = [
    "IntegrationConfig",
    "JacobianStats",
    "warp",
    "integrate_velocity",
    "compose",
    "estimate_inverse_zeta",
    "jacobian_det",
    "jacobian_stats",
    "central_diff",
    "central_diff_adjoint",
]
