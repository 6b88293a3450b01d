"""Quantitative evaluation of a registered pair: mask alignment, image
coherence, field regularity, cycle fidelity, and tumor-wise measures."""

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .engine import apply_affine
from .errors import DataError, EmptyMaskError, GridMismatchError
from .fields import jacobian_stats, warp
from .grid import INTENSITY, MASK, Volume3

MATCH_THRESHOLD = 0.10
MI_BINS = 32

_CONN26 = np.ones((3, 3, 3), dtype=bool)


# ---------------------------------------------------------------------------
# Scalar similarity metrics


def dsc(a, b):
    """Dice coefficient of two masks thresholded at 0.5 (both empty -> 1)."""
    if a.grid != b.grid:
        raise GridMismatchError("dsc needs a common grid")
    sa = a.data > 0.5
    sb = b.data > 0.5
    na, nb = int(sa.sum()), int(sb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((sa & sb).sum()) / (na + nb)


def ncc(a, b, mask):
    """Global zero-mean normalized cross-correlation over mask voxels."""
    if a.grid != b.grid or a.grid != mask.grid:
        raise GridMismatchError("ncc needs a common grid")
    sel = mask.data > 0.5
    if not sel.any():
        raise EmptyMaskError("ncc needs a nonempty mask")
    x = a.data[sel] - a.data[sel].mean()
    y = b.data[sel] - b.data[sel].mean()
    den = np.sqrt((x * x).sum() * (y * y).sum())
    if den == 0.0:
        raise DataError("ncc undefined: zero variance inside mask")
    return float((x * y).sum() / den)


def _bin_indices(values, bins):
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.intp)
    idx = ((values - lo) / (hi - lo) * bins).astype(np.intp)
    return np.minimum(idx, bins - 1)


def mi(a, b, mask, bins=MI_BINS):
    """Plug-in mutual information (natural log) from the joint histogram of
    min-max normalized intensities inside the mask."""
    if a.grid != b.grid or a.grid != mask.grid:
        raise GridMismatchError("mi needs a common grid")
    sel = mask.data > 0.5
    if not sel.any():
        raise EmptyMaskError("mi needs a nonempty mask")
    ia = _bin_indices(a.data[sel], bins)
    ib = _bin_indices(b.data[sel], bins)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())


def cycle_l1(a, a_cyc, mask=None):
    """Mean absolute intensity difference, over the mask when given."""
    if a.grid != a_cyc.grid:
        raise GridMismatchError("cycle_l1 needs a common grid")
    diff = np.abs(a.data - a_cyc.data)
    if mask is None:
        return float(diff.mean())
    sel = mask.data > 0.5
    if not sel.any():
        raise EmptyMaskError("cycle_l1 mask is empty")
    return float(diff[sel].mean())


# ---------------------------------------------------------------------------
# Tumor instances and matching


@dataclass(frozen=True)
class TumorInstance:
    """One 26-connected component of a tumor mask."""

    id: int
    voxels: np.ndarray  # (n, 3) integer indices
    volume_ml: float


@dataclass(frozen=True)
class TumorMatch:
    fixed_id: int
    inclusion: float
    matched: bool


def extract_tumor_instances(mask):
    """26-connected components of mask > 0.5, with physical volumes."""
    labels, count = ndimage.label(mask.data > 0.5, structure=_CONN26)
    vox_ml = mask.grid.voxel_volume_mm3 / 1000.0
    out = []
    for lab in range(1, count + 1):
        vox = np.argwhere(labels == lab)
        out.append(TumorInstance(id=lab, voxels=vox,
                                 volume_ml=len(vox) * vox_ml))
    return out


def match_tumors(warped_tumors, fixed_tumors):
    """Per fixed-image tumor: best inclusion ratio over warped instances.

    The inclusion ratio is the overlap volume divided by the fixed tumor's
    volume; a tumor is matched when it exceeds 10%.
    """
    if warped_tumors.grid != fixed_tumors.grid:
        raise GridMismatchError("tumor masks must share a grid")
    warped_labels, n_warp = ndimage.label(warped_tumors.data > 0.5,
                                          structure=_CONN26)
    fixed_labels, n_fixed = ndimage.label(fixed_tumors.data > 0.5,
                                          structure=_CONN26)
    matches = []
    for lab in range(1, n_fixed + 1):
        sel = fixed_labels == lab
        size = int(sel.sum())
        best = 0.0
        overlapped = warped_labels[sel]
        for wlab in np.unique(overlapped):
            if wlab == 0:
                continue
            best = max(best, int((overlapped == wlab).sum()) / size)
        matches.append(TumorMatch(fixed_id=lab, inclusion=best,
                                  matched=best > MATCH_THRESHOLD))
    return matches


def burden_ml(mask):
    """Total tumor volume in mL (voxels > 0.5 times voxel volume)."""
    return float((mask.data > 0.5).sum()) * mask.grid.voxel_volume_mm3 / 1000.0


def burden_relative_error(tumor_mask_pre, tumor_mask_post):
    """|burden_post - burden_pre| / burden_pre, burdens in mL."""
    pre = burden_ml(tumor_mask_pre)
    post = burden_ml(tumor_mask_post)
    if pre <= 0.0:
        raise EmptyMaskError("pre-registration tumor burden is zero")
    return abs(post - pre) / pre


def per_tumor_burden_errors(tumor_moving, phi):
    """Relative burden change of each moving-image tumor under a warp."""
    instances = extract_tumor_instances(tumor_moving)
    grid = tumor_moving.grid
    errors = []
    for inst in instances:
        single = np.zeros(grid.dims)
        single[tuple(inst.voxels.T)] = 1.0
        warped = warp(Volume3(grid, single, MASK), phi)
        pre = len(inst.voxels)
        post = int((warped.data > 0.5).sum())
        errors.append(abs(post - pre) / pre)
    return errors


# ---------------------------------------------------------------------------
# Report assembly


@dataclass
class MetricsReport:
    """All per-pair quantities; None marks not-applicable entries."""

    dsc: float
    ncc: float
    mi: float
    grad_l2: float
    cycle_l1: float
    folds: int
    matched_tumors: tuple
    mean_inclusion_ratio: float
    burden_relative_error: float

    def to_json_dict(self):
        d = {
            "dsc": self.dsc,
            "ncc": self.ncc,
            "mi": self.mi,
            "grad_l2": self.grad_l2,
            "cycle_l1": self.cycle_l1,
            "folds": self.folds,
            "matched_tumors": list(self.matched_tumors),
            "mean_inclusion_ratio": self.mean_inclusion_ratio,
            "burden_relative_error": self.burden_relative_error,
        }
        return d

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["matched_tumors"] = tuple(d["matched_tumors"])
        return cls(**d)


def _threshold(vol):
    return Volume3(vol.grid, (vol.data > 0.5).astype(np.float64), MASK)


def report(pair, result):
    """Assemble a MetricsReport for one registered pair.

    `pair` must expose mask_a/mask_b and may expose image_a/image_b and
    tumor_a/tumor_b; image and tumor entries are None when absent. Field
    regularity is evaluated within the fixed liver mask on the composed
    forward field.
    """
    mask_b = pair.mask_b
    stats = jacobian_stats(result.composed_forward, mask_b)

    image_a = getattr(pair, "image_a", None)
    image_b = getattr(pair, "image_b", None)
    ncc_val = mi_val = cyc_val = None
    if image_a is not None and image_b is not None:
        moving_img = apply_affine(image_a, result.affine)
        warped_img = warp(moving_img, result.composed_forward)
        ncc_val = ncc(warped_img, image_b, mask_b)
        mi_val = mi(warped_img, image_b, mask_b)
        if result.composed_backward is not None:
            cyc_img = warp(warped_img, result.composed_backward)
            moving_mask = apply_affine(pair.mask_a, result.affine)
            cyc_val = cycle_l1(moving_img, cyc_img, moving_mask)

    tumor_a = getattr(pair, "tumor_a", None)
    tumor_b = getattr(pair, "tumor_b", None)
    matched = (0, 0)
    mean_incl = 0.0
    burden_err = 0.0
    if tumor_a is not None and tumor_b is not None and (tumor_a.data > 0.5).any():
        moving_tum = apply_affine(tumor_a, result.affine)
        warped_tum = _threshold(warp(moving_tum, result.composed_forward))
        matches = match_tumors(warped_tum, tumor_b)
        n_matched = sum(m.matched for m in matches)
        matched = (n_matched, len(matches))
        if n_matched:
            mean_incl = float(np.mean([m.inclusion for m in matches if m.matched]))
        burden_err = burden_relative_error(_threshold(moving_tum), warped_tum)

    return MetricsReport(
        dsc=dsc(result.warped_mask, mask_b),
        ncc=ncc_val,
        mi=mi_val,
        grad_l2=stats.l2_norm_mean,
        cycle_l1=cyc_val,
        folds=stats.nonpositive_count,
        matched_tumors=matched,
        mean_inclusion_ratio=mean_incl,
        burden_relative_error=burden_err,
    )
