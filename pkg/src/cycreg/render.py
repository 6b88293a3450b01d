"""Byte-deterministic PPM slice rendering with mask contour overlays."""

import numpy as np

from .errors import DataError

_AXES = {"x": 0, "y": 1, "z": 2}
FILL_ALPHA = 0.25
CONTOUR_ALPHA = 0.7


def _slice2d(data, axis, index):
    n = data.shape[axis]
    if not 0 <= index < n:
        raise DataError(f"slice index {index} out of range [0, {n})")
    return np.take(data, index, axis=axis)


def _contour(mask2d):
    sel = mask2d > 0.5
    interior = sel.copy()
    interior[1:, :] &= sel[:-1, :]
    interior[:-1, :] &= sel[1:, :]
    interior[:, 1:] &= sel[:, :-1]
    interior[:, :-1] &= sel[:, 1:]
    return sel & ~interior


def render_slice(vol, overlays=(), axis="z", index=0, window=(0.0, 1.0)):
    """Render one slice as binary PPM (P6) bytes.

    overlays is a sequence of (mask_volume, (r, g, b)) pairs; each mask is
    alpha-blended over the grayscale base as a light fill plus a stronger
    contour.
    """
    ax = _AXES[axis] if isinstance(axis, str) else int(axis)
    if ax not in (0, 1, 2):
        raise DataError(f"axis must be x/y/z, got {axis!r}")
    base = _slice2d(vol.data, ax, index)
    lo, hi = window
    gray = np.clip((base - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    rgb = np.repeat((gray * 255.0)[:, :, None], 3, axis=2)

    for mask, color in overlays:
        if mask.grid != vol.grid:
            raise DataError("overlay mask grid differs from the base volume")
        sel = _slice2d(mask.data, ax, index) > 0.5
        edge = _contour(sel)
        col = np.asarray(color, dtype=np.float64)
        rgb[sel] = (1.0 - FILL_ALPHA) * rgb[sel] + FILL_ALPHA * col
        rgb[edge] = (1.0 - CONTOUR_ALPHA) * rgb[edge] + CONTOUR_ALPHA * col

    img = np.rint(rgb).astype(np.uint8)
    # rows top-to-bottom along the second slice axis, columns along the first
    h, w = img.shape[1], img.shape[0]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + img.transpose(1, 0, 2).tobytes()
