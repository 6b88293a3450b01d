"""Synthetic longitudinal liver phantoms with known fold-free ground-truth
deformations and scripted tumor evolution.

Pairs are built so the follow-up mask is exactly the warped-and-
rethresholded baseline mask, giving a closed-loop target for registration
without claiming interior field identifiability. Image content is a crude
three-level intensity model plus noise; it must not carry information the
masks do not."""

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .fields import IntegrationConfig, integrate_velocity, jacobian_stats, warp
from .grid import (
    DISPLACEMENT,
    INTENSITY,
    MASK,
    VELOCITY,
    Grid,
    VectorField3,
    Volume3,
    sample_field_trilinear,
)

TUMOR_KINDS = ("stable", "growing", "shrinking", "new", "vanished")

BACKGROUND_LEVEL = 0.15
LIVER_LEVEL = 0.55
TUMOR_LEVEL = 0.35
EFFUSION_LEVEL = 0.45


@dataclass(frozen=True)
class TumorSpec:
    """One scripted tumor: position at baseline, radii at both times."""

    center: tuple
    radius_t0: float
    radius_t1: float
    kind: str = "stable"

    def __post_init__(self):
        if self.kind not in TUMOR_KINDS:
            raise DataError(f"unknown tumor kind {self.kind!r}")
        if self.kind == "new":
            if self.radius_t0 != 0 or self.radius_t1 <= 0:
                raise DataError("new tumors need radius_t0 = 0 and radius_t1 > 0")
        elif self.kind == "vanished":
            if self.radius_t1 != 0 or self.radius_t0 <= 0:
                raise DataError("vanished tumors need radius_t1 = 0 and radius_t0 > 0")
        elif self.radius_t0 <= 0 or self.radius_t1 <= 0:
            raise DataError(f"{self.kind} tumors need positive radii at both times")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple = (64, 64, 64)
    deform_amplitude: float = 6.0
    tumor_plan: tuple = ()
    noise_sigma: float = 0.01
    effusion: bool = False

    def __post_init__(self):
        if self.deform_amplitude < 0:
            raise DataError("deform_amplitude must be >= 0")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "tumor_plan", tuple(self.tumor_plan))


@dataclass
class PhantomPair:
    image_a: Volume3
    image_b: Volume3
    mask_a: Volume3
    mask_b: Volume3
    tumor_a: Volume3
    tumor_b: Volume3
    phi_gt: VectorField3
    spec: PhantomSpec


# ---------------------------------------------------------------------------
# Liver mask


def gen_liver_mask(seed, dims):
    """Smoothed superellipsoid with low-frequency angular radius modulation,
    occupying 15-30% of the volume; deterministic in the seed."""
    dims = tuple(int(d) for d in dims)
    if any(d < 32 for d in dims):
        raise DataError(f"liver phantom needs dims >= 32 per axis, got {dims}")
    rng = np.random.default_rng(seed)
    grid = Grid(dims)
    nx, ny, nz = dims

    center = np.array([nx, ny, nz]) / 2.0 + rng.uniform(-2.0, 2.0, 3)
    exponent = rng.uniform(2.2, 2.8)
    aspect = rng.uniform(0.75, 1.0, 3)
    coords = np.indices(dims, dtype=np.float64)
    dx = [(coords[i] - center[i]) for i in range(3)]

    r = np.sqrt(dx[0] ** 2 + dx[1] ** 2 + dx[2] ** 2) + 1e-9
    theta = np.arctan2(dx[1], dx[0])
    polar = np.arccos(np.clip(dx[2] / r, -1.0, 1.0))
    # pronounced lobes: valleys between them give the shape the concave
    # creases real livers have
    modulation = np.zeros(dims)
    for k in range(3, 6):
        a_k = rng.uniform(0.10, 0.16) * rng.choice((-1.0, 1.0))
        b_k = rng.uniform(-0.08, 0.08)
        psi = rng.uniform(0, 2 * np.pi)
        chi = rng.uniform(0, 2 * np.pi)
        modulation += a_k * np.cos(k * theta + psi) * np.sin(polar) ** 2
        modulation += b_k * np.cos(k * polar + chi)

    target_fraction = rng.uniform(0.15, 0.20)

    def fraction_for(scale):
        radii = np.array([nx, ny, nz]) / 2.0 * aspect * scale
        rho = sum((np.abs(dx[i]) / radii[i]) ** exponent for i in range(3))
        inside = rho ** (1.0 / exponent) <= 1.0 + modulation
        return inside.mean(), inside

    lo, hi = 0.3, 0.95
    inside = None
    scale = 0.5
    for _ in range(24):
        scale = 0.5 * (lo + hi)
        frac, inside = fraction_for(scale)
        if frac < target_fraction:
            lo = scale
        else:
            hi = scale

    # thin lateral lobe: a flattened ellipsoid wing attached to the body,
    # the left-lobe-tip-like structure where deformations concentrate
    azimuth = rng.uniform(0, 2 * np.pi)
    wing_dir = np.array([np.cos(azimuth), np.sin(azimuth),
                         rng.uniform(-0.2, 0.2)])
    wing_dir /= np.linalg.norm(wing_dir)
    body_radius = scale * min(nx, ny, nz) / 2.0 * aspect.min()
    wing_center = center + wing_dir * (1.12 * body_radius)
    normal = np.array([0.0, 0.0, 1.0])
    third = np.cross(wing_dir, normal)
    third /= np.linalg.norm(third)
    rel_w = np.stack([coords[i] - wing_center[i] for i in range(3)])
    u = sum(wing_dir[i] * rel_w[i] for i in range(3))
    w_ = sum(third[i] * rel_w[i] for i in range(3))
    z_ = sum(normal[i] * rel_w[i] for i in range(3))
    wing = ((u / (0.55 * body_radius)) ** 2 + (w_ / (0.4 * body_radius)) ** 2
            + (z_ / 1.7) ** 2) <= 1.0
    inside = inside | wing

    smooth = ndimage.gaussian_filter(inside.astype(np.float64), sigma=1.3)
    mask = smooth > 0.5
    labels, count = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    if count > 1:
        sizes = ndimage.sum_labels(np.ones_like(labels), labels,
                                   index=range(1, count + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
    return Volume3(grid, mask.astype(np.float64), MASK)


# ---------------------------------------------------------------------------
# Ground-truth deformation


def gen_gt_deformation(seed, dims, amplitude, integration=IntegrationConfig(),
                       bulge_center=None, bulge_normal=None):
    """Fold-free displacement field with max magnitude near `amplitude`.

    Built by integrating a smooth random velocity (feature size >= 8
    voxels) plus one localized pancake-shaped dent (at bulge_center along
    bulge_normal when given). Raises if the result is not fold-free rather
    than emitting a folded ground truth.
    """
    if amplitude < 0:
        raise DataError("amplitude must be >= 0")
    dims = tuple(int(d) for d in dims)
    grid = Grid(dims)
    if amplitude == 0:
        return VectorField3.zeros(grid, DISPLACEMENT)

    rng = np.random.default_rng(seed)

    # three scales: whole-volume drift and patient shift (largely affine),
    # mid-frequency texture (feature size >= 8 voxels), one surface bulge
    drift = np.stack([ndimage.gaussian_filter(rng.standard_normal(dims),
                                              sigma=12.0) for _ in range(3)])
    drift /= np.sqrt((drift ** 2).mean())
    texture = np.stack([ndimage.gaussian_filter(rng.standard_normal(dims),
                                                sigma=4.0) for _ in range(3)])
    texture /= np.sqrt((texture ** 2).mean())
    shift = rng.standard_normal(3)
    shift *= rng.uniform(1.7, 2.3) / np.linalg.norm(shift)
    v = drift + 0.4 * texture
    for i in range(3):
        v[i] += shift[i]

    coords = np.indices(dims, dtype=np.float64)
    if bulge_center is None:
        bulge_center = np.array(dims) * rng.uniform(0.35, 0.65, 3)
    else:
        bulge_center = np.asarray(bulge_center, dtype=np.float64)
    if bulge_normal is None:
        direction = np.asarray(bulge_center) - np.array(dims) / 2.0
        if np.linalg.norm(direction) < 1e-6:
            direction = rng.standard_normal(3)
    else:
        direction = np.asarray(bulge_normal, dtype=np.float64)
    direction /= np.linalg.norm(direction)

    # pancake-shaped push along the bulge normal: wide tangentially, thin
    # along the push direction, the kind of imprint external pressure leaves
    sigma_n = rng.uniform(1.5, 1.9)
    sigma_t = rng.uniform(6.0, 8.0)
    rel = np.stack([coords[i] - bulge_center[i] for i in range(3)])
    along = direction[0] * rel[0] + direction[1] * rel[1] + direction[2] * rel[2]
    tang2 = (rel ** 2).sum(axis=0) - along ** 2
    bump = np.exp(-along ** 2 / (2.0 * sigma_n ** 2)
                  - tang2 / (2.0 * sigma_t ** 2))
    vmag_max = np.sqrt((v ** 2).sum(axis=0)).max()
    for i in range(3):
        v[i] -= 2.2 * vmag_max * direction[i] * bump

    v *= amplitude / np.sqrt((v ** 2).sum(axis=0)).max()
    field = None
    for _ in range(3):
        vf = VectorField3(grid, v, VELOCITY)
        field = integrate_velocity(vf, integration)
        max_disp = float(np.sqrt((field.data ** 2).sum(axis=0)).max())
        if abs(max_disp - amplitude) <= 0.05 * amplitude:
            break
        v *= amplitude / max_disp

    full = Volume3(grid, np.ones(dims), MASK)
    stats = jacobian_stats(field, full)
    for _ in range(3):
        if stats.nonpositive_count == 0:
            break
        # back off until the sampled determinant stays positive everywhere
        v *= 0.88
        field = integrate_velocity(VectorField3(grid, v, VELOCITY), integration)
        stats = jacobian_stats(field, full)
    if stats.nonpositive_count > 0:
        raise DataError(
            f"amplitude {amplitude} produced {stats.nonpositive_count} folded "
            "voxels; refusing to emit a folded ground truth")
    return field


# ---------------------------------------------------------------------------
# Pair assembly


def _sphere(dims, center, radius):
    coords = np.indices(dims, dtype=np.float64)
    r2 = sum((coords[i] - center[i]) ** 2 for i in range(3))
    return r2 <= radius * radius


def _thin_plate_target(mask):
    """Center and normal of the thinnest plate-like region of a mask.

    Medial voxels (local maxima of the distance transform) with small
    thickness mark thin structures; the normal is the least-variance
    principal axis of that cluster. Falls back to the deepest surface
    concavity for masks without thin parts."""
    dt = ndimage.distance_transform_edt(mask)
    medial = (dt > 0) & (dt <= 3.0) & \
        (dt >= ndimage.maximum_filter(dt, size=3) - 1e-9)
    labels, count = ndimage.label(medial, structure=np.ones((3, 3, 3)))
    centroid_all = np.argwhere(mask).mean(axis=0)
    if count:
        sizes = ndimage.sum_labels(np.ones_like(labels), labels,
                                   index=range(1, count + 1))
        best = 1 + int(np.argmax(sizes))
        cluster = np.argwhere(labels == best)
        if len(cluster) >= 12:
            center = cluster.mean(axis=0)
            # press the thin structure toward the body so the crease between
            # them seals in the follow-up mask
            normal = center - centroid_all
            normal /= max(np.linalg.norm(normal), 1e-9)
            return center, normal
    eroded = ndimage.binary_erosion(mask, iterations=2)
    surface = np.argwhere(mask & ~eroded)
    centroid = np.argwhere(mask).mean(axis=0)
    radii = np.sqrt(((surface - centroid) ** 2).sum(axis=1))
    point = surface[int(np.argmin(radii))].astype(np.float64)
    normal = point - centroid
    normal /= max(np.linalg.norm(normal), 1e-9)
    return point, normal


def _map_to_followup(center, phi_gt):
    """Follow-up position c' of a baseline point c, i.e. the fixed point of
    c' = c - phi(c') under the pull-back convention."""
    c = np.asarray(center, dtype=np.float64)
    cp = c.copy()
    for _ in range(8):
        cp = c - sample_field_trilinear(phi_gt, cp)
    return cp


def gen_pair(spec):
    """Longitudinal phantom pair with scripted tumors.

    The follow-up mask is the warped-and-rethresholded baseline mask; the
    baseline image/mask pair and the ground-truth field are deterministic
    in the spec."""
    mask_a = gen_liver_mask(spec.seed, spec.dims)
    grid = mask_a.grid

    # anchor the dent at the thinnest plate-like part of the liver (the
    # lateral lobe tip) and push along the plate normal; bending a thin
    # structure is the squeeze that demands the sharpest recovery
    bulge, normal = _thin_plate_target(mask_a.data > 0.5)
    phi_gt = gen_gt_deformation(spec.seed + 7919, spec.dims,
                                spec.deform_amplitude, bulge_center=bulge,
                                bulge_normal=normal)

    soft_b = warp(mask_a, phi_gt)
    mask_b = Volume3(grid, (soft_b.data > 0.5).astype(np.float64), MASK)

    tumor_a = np.zeros(spec.dims)
    tumor_b = np.zeros(spec.dims)
    for tumor in spec.tumor_plan:
        c0 = np.asarray(tumor.center, dtype=np.float64)
        idx = tuple(int(round(x)) for x in c0)
        if mask_a.data[idx] <= 0.5:
            raise DataError(f"tumor center {tumor.center} lies outside the liver")
        c1 = _map_to_followup(c0, phi_gt)
        if tumor.radius_t0 > 0:
            tumor_a[_sphere(spec.dims, c0, tumor.radius_t0)] = 1.0
        if tumor.radius_t1 > 0:
            tumor_b[_sphere(spec.dims, c1, tumor.radius_t1)] = 1.0

    rng = np.random.default_rng(spec.seed + 104729)

    def render(mask, tumor, effusion_rim=None):
        img = BACKGROUND_LEVEL + (LIVER_LEVEL - BACKGROUND_LEVEL) * mask
        img = np.where(tumor > 0.5, TUMOR_LEVEL, img)
        if effusion_rim is not None:
            img = np.where(effusion_rim, EFFUSION_LEVEL, img)
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, mask.shape)
        return Volume3(grid, np.clip(img, 0.0, 1.0), INTENSITY)

    rim = None
    if spec.effusion:
        dilated = ndimage.binary_dilation(mask_b.data > 0.5, iterations=2)
        rim = dilated & ~(mask_b.data > 0.5)

    image_a = render(mask_a.data, tumor_a)
    image_b = render(mask_b.data, tumor_b, rim)

    return PhantomPair(
        image_a=image_a,
        image_b=image_b,
        mask_a=mask_a,
        mask_b=mask_b,
        tumor_a=Volume3(grid, tumor_a, MASK),
        tumor_b=Volume3(grid, tumor_b, MASK),
        phi_gt=phi_gt,
        spec=spec,
    )


def default_tumor_plan(seed, mask, count=2, kinds=("stable", "stable")):
    """Pick tumor centers well inside the liver, radii 3-5 voxels."""
    rng = np.random.default_rng(seed)
    dist = ndimage.distance_transform_edt(mask.data > 0.5)
    plan = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        candidates = np.argwhere(dist >= 8.0)
        if len(candidates) == 0:
            raise DataError("liver too thin to place interior tumors")
        center = tuple(int(x) for x in candidates[rng.integers(len(candidates))])
        r0 = float(rng.uniform(4.0, 5.5))
        if kind == "stable":
            r0r1 = (r0, r0)
        elif kind == "growing":
            r0r1 = (r0, r0 * rng.uniform(1.3, 1.6))
        elif kind == "shrinking":
            r0r1 = (r0, r0 * rng.uniform(0.6, 0.8))
        elif kind == "new":
            r0r1 = (0.0, r0)
        else:
            r0r1 = (r0, 0.0)
        plan.append(TumorSpec(center=center, radius_t0=r0r1[0],
                              radius_t1=r0r1[1], kind=kind))
    return tuple(plan)
