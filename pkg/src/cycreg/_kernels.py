"""Low-level trilinear sampling kernels and their adjoints.

All kernels operate on C-contiguous float64 arrays of shape (nx, ny, nz),
with vector fields passed as three separate component arrays. Sampling
coordinates are voxel-index coordinates; coordinates outside the grid are
clamped to the boundary (border replication). Loops are serial so results
are bit-reproducible.

The *_vjp kernels implement the exact adjoints of the forward kernels.
Derivatives with respect to a sampling coordinate are gated to zero where
the raw coordinate falls outside the open interval (0, n-1), matching the
clamped forward evaluation.
"""

import numpy as np
from numba import njit

__all__ = [
    "warp_scalar",
    "warp_scalar_pgrad",
    "resample_field",
    "resample_field_vjp",
    "sample_points_scalar",
]


@njit(cache=True, fastmath=False)
def warp_scalar(vol, dx, dy, dz, out):
    """out[p] = trilinear(vol, p + d(p)) over the full grid."""
    nx, ny, nz = vol.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                cx = i + dx[i, j, k]
                cy = j + dy[i, j, k]
                cz = k + dz[i, j, k]
                if cx < 0.0:
                    cx = 0.0
                elif cx > nx - 1.0:
                    cx = nx - 1.0
                if cy < 0.0:
                    cy = 0.0
                elif cy > ny - 1.0:
                    cy = ny - 1.0
                if cz < 0.0:
                    cz = 0.0
                elif cz > nz - 1.0:
                    cz = nz - 1.0
                x0 = int(cx)
                y0 = int(cy)
                z0 = int(cz)
                if x0 > nx - 2:
                    x0 = nx - 2
                if y0 > ny - 2:
                    y0 = ny - 2
                if z0 > nz - 2:
                    z0 = nz - 2
                fx = cx - x0
                fy = cy - y0
                fz = cz - z0
                c000 = vol[x0, y0, z0]
                c100 = vol[x0 + 1, y0, z0]
                c010 = vol[x0, y0 + 1, z0]
                c110 = vol[x0 + 1, y0 + 1, z0]
                c001 = vol[x0, y0, z0 + 1]
                c101 = vol[x0 + 1, y0, z0 + 1]
                c011 = vol[x0, y0 + 1, z0 + 1]
                c111 = vol[x0 + 1, y0 + 1, z0 + 1]
                gx0 = 1.0 - fx
                gy0 = 1.0 - fy
                gz0 = 1.0 - fz
                out[i, j, k] = (
                    gz0 * (gy0 * (gx0 * c000 + fx * c100) + fy * (gx0 * c010 + fx * c110))
                    + fz * (gy0 * (gx0 * c001 + fx * c101) + fy * (gx0 * c011 + fx * c111))
                )


@njit(cache=True, fastmath=False)
def warp_scalar_pgrad(vol, dx, dy, dz, out, gx, gy, gz):
    """Like warp_scalar, also storing d out / d coordinate per axis."""
    nx, ny, nz = vol.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                cx = i + dx[i, j, k]
                cy = j + dy[i, j, k]
                cz = k + dz[i, j, k]
                inx = 1.0 if (cx > 0.0 and cx < nx - 1.0) else 0.0
                iny = 1.0 if (cy > 0.0 and cy < ny - 1.0) else 0.0
                inz = 1.0 if (cz > 0.0 and cz < nz - 1.0) else 0.0
                if cx < 0.0:
                    cx = 0.0
                elif cx > nx - 1.0:
                    cx = nx - 1.0
                if cy < 0.0:
                    cy = 0.0
                elif cy > ny - 1.0:
                    cy = ny - 1.0
                if cz < 0.0:
                    cz = 0.0
                elif cz > nz - 1.0:
                    cz = nz - 1.0
                x0 = int(cx)
                y0 = int(cy)
                z0 = int(cz)
                if x0 > nx - 2:
                    x0 = nx - 2
                if y0 > ny - 2:
                    y0 = ny - 2
                if z0 > nz - 2:
                    z0 = nz - 2
                fx = cx - x0
                fy = cy - y0
                fz = cz - z0
                c000 = vol[x0, y0, z0]
                c100 = vol[x0 + 1, y0, z0]
                c010 = vol[x0, y0 + 1, z0]
                c110 = vol[x0 + 1, y0 + 1, z0]
                c001 = vol[x0, y0, z0 + 1]
                c101 = vol[x0 + 1, y0, z0 + 1]
                c011 = vol[x0, y0 + 1, z0 + 1]
                c111 = vol[x0 + 1, y0 + 1, z0 + 1]
                ax = 1.0 - fx
                ay = 1.0 - fy
                az = 1.0 - fz
                out[i, j, k] = (
                    az * (ay * (ax * c000 + fx * c100) + fy * (ax * c010 + fx * c110))
                    + fz * (ay * (ax * c001 + fx * c101) + fy * (ax * c011 + fx * c111))
                )
                gx[i, j, k] = inx * (
                    az * (ay * (c100 - c000) + fy * (c110 - c010))
                    + fz * (ay * (c101 - c001) + fy * (c111 - c011))
                )
                gy[i, j, k] = iny * (
                    az * (ax * (c010 - c000) + fx * (c110 - c100))
                    + fz * (ax * (c011 - c001) + fx * (c111 - c101))
                )
                gz[i, j, k] = inz * (
                    ay * (ax * (c001 - c000) + fx * (c101 - c100))
                    + fy * (ax * (c011 - c010) + fx * (c111 - c110))
                )


@njit(cache=True, fastmath=False)
def resample_field(ax_, ay_, az_, dx, dy, dz, ox, oy, oz):
    """o[p] = trilinear(a, p + d(p)) componentwise over the full grid."""
    nx, ny, nz = ax_.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                cx = i + dx[i, j, k]
                cy = j + dy[i, j, k]
                cz = k + dz[i, j, k]
                if cx < 0.0:
                    cx = 0.0
                elif cx > nx - 1.0:
                    cx = nx - 1.0
                if cy < 0.0:
                    cy = 0.0
                elif cy > ny - 1.0:
                    cy = ny - 1.0
                if cz < 0.0:
                    cz = 0.0
                elif cz > nz - 1.0:
                    cz = nz - 1.0
                x0 = int(cx)
                y0 = int(cy)
                z0 = int(cz)
                if x0 > nx - 2:
                    x0 = nx - 2
                if y0 > ny - 2:
                    y0 = ny - 2
                if z0 > nz - 2:
                    z0 = nz - 2
                fx = cx - x0
                fy = cy - y0
                fz = cz - z0
                gx0 = 1.0 - fx
                gy0 = 1.0 - fy
                gz0 = 1.0 - fz
                w000 = gx0 * gy0 * gz0
                w100 = fx * gy0 * gz0
                w010 = gx0 * fy * gz0
                w110 = fx * fy * gz0
                w001 = gx0 * gy0 * fz
                w101 = fx * gy0 * fz
                w011 = gx0 * fy * fz
                w111 = fx * fy * fz
                ox[i, j, k] = (
                    w000 * ax_[x0, y0, z0] + w100 * ax_[x0 + 1, y0, z0]
                    + w010 * ax_[x0, y0 + 1, z0] + w110 * ax_[x0 + 1, y0 + 1, z0]
                    + w001 * ax_[x0, y0, z0 + 1] + w101 * ax_[x0 + 1, y0, z0 + 1]
                    + w011 * ax_[x0, y0 + 1, z0 + 1] + w111 * ax_[x0 + 1, y0 + 1, z0 + 1]
                )
                oy[i, j, k] = (
                    w000 * ay_[x0, y0, z0] + w100 * ay_[x0 + 1, y0, z0]
                    + w010 * ay_[x0, y0 + 1, z0] + w110 * ay_[x0 + 1, y0 + 1, z0]
                    + w001 * ay_[x0, y0, z0 + 1] + w101 * ay_[x0 + 1, y0, z0 + 1]
                    + w011 * ay_[x0, y0 + 1, z0 + 1] + w111 * ay_[x0 + 1, y0 + 1, z0 + 1]
                )
                oz[i, j, k] = (
                    w000 * az_[x0, y0, z0] + w100 * az_[x0 + 1, y0, z0]
                    + w010 * az_[x0, y0 + 1, z0] + w110 * az_[x0 + 1, y0 + 1, z0]
                    + w001 * az_[x0, y0, z0 + 1] + w101 * az_[x0 + 1, y0, z0 + 1]
                    + w011 * az_[x0, y0 + 1, z0 + 1] + w111 * az_[x0 + 1, y0 + 1, z0 + 1]
                )


@njit(cache=True, fastmath=False)
def resample_field_vjp(ax_, ay_, az_, dx, dy, dz, gox, goy, goz,
                       gax, gay, gaz, gpx, gpy, gpz):
    """Adjoint of resample_field.

    Accumulates (+=) the cotangent w.r.t. the sampled field into gax/gay/gaz
    and writes (=) the cotangent w.r.t. the sampling coordinates into
    gpx/gpy/gpz. Callers must zero gax/gay/gaz beforehand.
    """
    nx, ny, nz = ax_.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                cx = i + dx[i, j, k]
                cy = j + dy[i, j, k]
                cz = k + dz[i, j, k]
                inx = 1.0 if (cx > 0.0 and cx < nx - 1.0) else 0.0
                iny = 1.0 if (cy > 0.0 and cy < ny - 1.0) else 0.0
                inz = 1.0 if (cz > 0.0 and cz < nz - 1.0) else 0.0
                if cx < 0.0:
                    cx = 0.0
                elif cx > nx - 1.0:
                    cx = nx - 1.0
                if cy < 0.0:
                    cy = 0.0
                elif cy > ny - 1.0:
                    cy = ny - 1.0
                if cz < 0.0:
                    cz = 0.0
                elif cz > nz - 1.0:
                    cz = nz - 1.0
                x0 = int(cx)
                y0 = int(cy)
                z0 = int(cz)
                if x0 > nx - 2:
                    x0 = nx - 2
                if y0 > ny - 2:
                    y0 = ny - 2
                if z0 > nz - 2:
                    z0 = nz - 2
                fx = cx - x0
                fy = cy - y0
                fz = cz - z0
                ux = 1.0 - fx
                uy = 1.0 - fy
                uz = 1.0 - fz
                w000 = ux * uy * uz
                w100 = fx * uy * uz
                w010 = ux * fy * uz
                w110 = fx * fy * uz
                w001 = ux * uy * fz
                w101 = fx * uy * fz
                w011 = ux * fy * fz
                w111 = fx * fy * fz
                gx_acc = 0.0
                gy_acc = 0.0
                gz_acc = 0.0
                for m in range(3):
                    if m == 0:
                        a = ax_
                        ga = gax
                        g = gox[i, j, k]
                    elif m == 1:
                        a = ay_
                        ga = gay
                        g = goy[i, j, k]
                    else:
                        a = az_
                        ga = gaz
                        g = goz[i, j, k]
                    ga[x0, y0, z0] += g * w000
                    ga[x0 + 1, y0, z0] += g * w100
                    ga[x0, y0 + 1, z0] += g * w010
                    ga[x0 + 1, y0 + 1, z0] += g * w110
                    ga[x0, y0, z0 + 1] += g * w001
                    ga[x0 + 1, y0, z0 + 1] += g * w101
                    ga[x0, y0 + 1, z0 + 1] += g * w011
                    ga[x0 + 1, y0 + 1, z0 + 1] += g * w111
                    c000 = a[x0, y0, z0]
                    c100 = a[x0 + 1, y0, z0]
                    c010 = a[x0, y0 + 1, z0]
                    c110 = a[x0 + 1, y0 + 1, z0]
                    c001 = a[x0, y0, z0 + 1]
                    c101 = a[x0 + 1, y0, z0 + 1]
                    c011 = a[x0, y0 + 1, z0 + 1]
                    c111 = a[x0 + 1, y0 + 1, z0 + 1]
                    gx_acc += g * (
                        uz * (uy * (c100 - c000) + fy * (c110 - c010))
                        + fz * (uy * (c101 - c001) + fy * (c111 - c011))
                    )
                    gy_acc += g * (
                        uz * (ux * (c010 - c000) + fx * (c110 - c100))
                        + fz * (ux * (c011 - c001) + fx * (c111 - c101))
                    )
                    gz_acc += g * (
                        uy * (ux * (c001 - c000) + fx * (c101 - c100))
                        + fy * (ux * (c011 - c010) + fx * (c111 - c110))
                    )
                gpx[i, j, k] = inx * gx_acc
                gpy[i, j, k] = iny * gy_acc
                gpz[i, j, k] = inz * gz_acc


@njit(cache=True, fastmath=False)
def sample_points_scalar(vol, px, py, pz, out):
    """Trilinear sampling at an arbitrary flat list of points."""
    nx, ny, nz = vol.shape
    n = px.shape[0]
    for t in range(n):
        cx = px[t]
        cy = py[t]
        cz = pz[t]
        if cx < 0.0:
            cx = 0.0
        elif cx > nx - 1.0:
            cx = nx - 1.0
        if cy < 0.0:
            cy = 0.0
        elif cy > ny - 1.0:
            cy = ny - 1.0
        if cz < 0.0:
            cz = 0.0
        elif cz > nz - 1.0:
            cz = nz - 1.0
        x0 = int(cx)
        y0 = int(cy)
        z0 = int(cz)
        if x0 > nx - 2:
            x0 = nx - 2
        if y0 > ny - 2:
            y0 = ny - 2
        if z0 > nz - 2:
            z0 = nz - 2
        fx = cx - x0
        fy = cy - y0
        fz = cz - z0
        ux = 1.0 - fx
        uy = 1.0 - fy
        uz = 1.0 - fz
        out[t] = (
            uz * (uy * (ux * vol[x0, y0, z0] + fx * vol[x0 + 1, y0, z0])
                  + fy * (ux * vol[x0, y0 + 1, z0] + fx * vol[x0 + 1, y0 + 1, z0]))
            + fz * (uy * (ux * vol[x0, y0, z0 + 1] + fx * vol[x0 + 1, y0, z0 + 1])
                    + fy * (ux * vol[x0, y0 + 1, z0 + 1] + fx * vol[x0 + 1, y0 + 1, z0 + 1]))
        )


@njit(cache=True, fastmath=False)
def smooth_loss_grad(f, g, weight):
    """Sum over components/axes of squared central differences, with the
    exact stencil adjoint accumulated into g scaled by 2*weight/N.

    Returns the unnormalized sum of squares (caller divides by N).
    """
    nx, ny, nz = f.shape[1], f.shape[2], f.shape[3]
    n_vox = nx * ny * nz
    c = 2.0 * weight / n_vox
    total = 0.0
    for m in range(3):
        comp = f[m]
        grad = g[m]
        # axis 0
        for j in range(ny):
            for k in range(nz):
                d = comp[1, j, k] - comp[0, j, k]
                total += d * d
                grad[1, j, k] += c * d
                grad[0, j, k] -= c * d
                for i in range(1, nx - 1):
                    d = 0.5 * (comp[i + 1, j, k] - comp[i - 1, j, k])
                    total += d * d
                    grad[i + 1, j, k] += 0.5 * c * d
                    grad[i - 1, j, k] -= 0.5 * c * d
                d = comp[nx - 1, j, k] - comp[nx - 2, j, k]
                total += d * d
                grad[nx - 1, j, k] += c * d
                grad[nx - 2, j, k] -= c * d
        # axis 1
        for i in range(nx):
            for k in range(nz):
                d = comp[i, 1, k] - comp[i, 0, k]
                total += d * d
                grad[i, 1, k] += c * d
                grad[i, 0, k] -= c * d
                for j in range(1, ny - 1):
                    d = 0.5 * (comp[i, j + 1, k] - comp[i, j - 1, k])
                    total += d * d
                    grad[i, j + 1, k] += 0.5 * c * d
                    grad[i, j - 1, k] -= 0.5 * c * d
                d = comp[i, ny - 1, k] - comp[i, ny - 2, k]
                total += d * d
                grad[i, ny - 1, k] += c * d
                grad[i, ny - 2, k] -= c * d
        # axis 2
        for i in range(nx):
            for j in range(ny):
                d = comp[i, j, 1] - comp[i, j, 0]
                total += d * d
                grad[i, j, 1] += c * d
                grad[i, j, 0] -= c * d
                for k in range(1, nz - 1):
                    d = 0.5 * (comp[i, j, k + 1] - comp[i, j, k - 1])
                    total += d * d
                    grad[i, j, k + 1] += 0.5 * c * d
                    grad[i, j, k - 1] -= 0.5 * c * d
                d = comp[i, j, nz - 1] - comp[i, j, nz - 2]
                total += d * d
                grad[i, j, nz - 1] += c * d
                grad[i, j, nz - 2] -= c * d
    return total


@njit(cache=True, fastmath=False)
def antifold_loss_grad(f, g, weight):
    """Gated penalty on diagonal derivatives <= -1 with its adjoint
    accumulated into g scaled by 2*weight/N; returns the unnormalized sum."""
    nx, ny, nz = f.shape[1], f.shape[2], f.shape[3]
    n_vox = nx * ny * nz
    c = 2.0 * weight / n_vox
    total = 0.0
    comp = f[0]
    grad = g[0]
    for j in range(ny):
        for k in range(nz):
            d = comp[1, j, k] - comp[0, j, k]
            if d <= -1.0:
                total += d * d
                grad[1, j, k] += c * d
                grad[0, j, k] -= c * d
            for i in range(1, nx - 1):
                d = 0.5 * (comp[i + 1, j, k] - comp[i - 1, j, k])
                if d <= -1.0:
                    total += d * d
                    grad[i + 1, j, k] += 0.5 * c * d
                    grad[i - 1, j, k] -= 0.5 * c * d
            d = comp[nx - 1, j, k] - comp[nx - 2, j, k]
            if d <= -1.0:
                total += d * d
                grad[nx - 1, j, k] += c * d
                grad[nx - 2, j, k] -= c * d
    comp = f[1]
    grad = g[1]
    for i in range(nx):
        for k in range(nz):
            d = comp[i, 1, k] - comp[i, 0, k]
            if d <= -1.0:
                total += d * d
                grad[i, 1, k] += c * d
                grad[i, 0, k] -= c * d
            for j in range(1, ny - 1):
                d = 0.5 * (comp[i, j + 1, k] - comp[i, j - 1, k])
                if d <= -1.0:
                    total += d * d
                    grad[i, j + 1, k] += 0.5 * c * d
                    grad[i, j - 1, k] -= 0.5 * c * d
            d = comp[i, ny - 1, k] - comp[i, ny - 2, k]
            if d <= -1.0:
                total += d * d
                grad[i, ny - 1, k] += c * d
                grad[i, ny - 2, k] -= c * d
    comp = f[2]
    grad = g[2]
    for i in range(nx):
        for j in range(ny):
            d = comp[i, j, 1] - comp[i, j, 0]
            if d <= -1.0:
                total += d * d
                grad[i, j, 1] += c * d
                grad[i, j, 0] -= c * d
            for k in range(1, nz - 1):
                d = 0.5 * (comp[i, j, k + 1] - comp[i, j, k - 1])
                if d <= -1.0:
                    total += d * d
                    grad[i, j, k + 1] += 0.5 * c * d
                    grad[i, j, k - 1] -= 0.5 * c * d
            d = comp[i, j, nz - 1] - comp[i, j, nz - 2]
            if d <= -1.0:
                total += d * d
                grad[i, j, nz - 1] += c * d
                grad[i, j, nz - 2] -= c * d
    return total
