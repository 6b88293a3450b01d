"""Registration energy: the four loss terms, their weighted total, and the
exact gradient with respect to the half-resolution field parameters.

Every term is normalized per voxel so the weights transfer across grid
sizes. Gradients are hand-derived reverse accumulation through the fixed
pipeline (integrate -> upsample -> compose -> warp -> losses); there is no
runtime autodiff. The anti-folding indicator is treated as constant during
differentiation.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DataError, GridMismatchError
from .fields import (
    compose_fw,
    compose_bw,
    integrate_fw,
    integrate_bw,
    warp_fw,
    zeta_fw,
    zeta_bw,
)
from .grid import (
    central_diff,
    central_diff_adjoint,
    upsample_array,
    upsample_array_adjoint,
)

DICE_EPS = 1e-6

# smoothness/anti-folding granularity for incremental modes
REG_GRANULARITY = "composed"

MODES = ("direct", "diffeo", "diffeo_inc2", "diffeocyc_inc1", "diffeocyc_inc2")

# mode -> (forward steps, backward steps, integrate?, antifold term?, inv term?)
_MODE_TABLE = {
    "direct": (1, 0, False, False, False),
    "diffeo": (1, 0, True, True, False),
    "diffeo_inc2": (2, 0, True, True, False),
    "diffeocyc_inc1": (1, 1, True, True, True),
    "diffeocyc_inc2": (2, 2, True, True, True),
}


def mode_structure(mode):
    if mode not in _MODE_TABLE:
        raise DataError(f"unknown mode {mode!r}; expected one of {MODES}")
    return _MODE_TABLE[mode]


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the total energy."""

    alpha: float = 1.0
    beta: float = 0.8
    gamma: float = 1.0
    mu: float = 0.4

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "mu"):
            if getattr(self, name) < 0:
                raise DataError(f"loss weight {name} must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    """One energy evaluation, term by term (unweighted) plus the total."""

    sim: float
    smooth: float
    antifold: float
    inv: float
    total: float

    def as_dict(self):
        return {"sim": self.sim, "smooth": self.smooth,
                "antifold": self.antifold, "inv": self.inv, "total": self.total}


# ---------------------------------------------------------------------------
# Individual terms (raw arrays). Fields are (3, nx, ny, nz).


def smooth_raw(f):
    """Per-voxel mean of the squared Frobenius norm of the field Jacobian."""
    n = f[0].size
    diffs = np.empty((3, 3) + f.shape[1:])
    val = 0.0
    for i in range(3):
        for a in range(3):
            d = central_diff(f[i], axis=a)
            diffs[i, a] = d
            val += float((d * d).sum())
    return val / n, diffs


def smooth_raw_bw(diffs, g):
    n = diffs[0, 0].size
    gf = np.empty((3,) + diffs.shape[2:])
    for i in range(3):
        acc = central_diff_adjoint(diffs[i, 0] * (2.0 * g / n), axis=0)
        acc += central_diff_adjoint(diffs[i, 1] * (2.0 * g / n), axis=1)
        acc += central_diff_adjoint(diffs[i, 2] * (2.0 * g / n), axis=2)
        gf[i] = acc
    return gf


def antifold_raw(f):
    """Penalty on diagonal derivatives at or below -1 (folding onset)."""
    n = f[0].size
    diag = np.empty((3,) + f.shape[1:])
    gate = np.empty((3,) + f.shape[1:])
    val = 0.0
    for i in range(3):
        d = central_diff(f[i], axis=i)
        g = (d <= -1.0).astype(np.float64)
        diag[i] = d
        gate[i] = g
        val += float((g * d * d).sum())
    return val / n, (diag, gate)


def antifold_raw_bw(cache, g):
    diag, gate = cache
    n = diag[0].size
    gf = np.empty_like(diag)
    for i in range(3):
        gf[i] = central_diff_adjoint(gate[i] * diag[i] * (2.0 * g / n), axis=i)
    return gf


def dice_loss_raw(a, b):
    """Soft Dice loss 1 - (2*sum(ab) + eps) / (sum(a) + sum(b) + eps)."""
    t = float((a * b).sum())
    s = float(a.sum() + b.sum())
    return 1.0 - (2.0 * t + DICE_EPS) / (s + DICE_EPS), (t, s)


def dice_loss_raw_bw(a, b, cache, g):
    t, s = cache
    denom = s + DICE_EPS
    return g * (-(2.0 * b * denom - (2.0 * t + DICE_EPS)) / (denom * denom))


def inv_loss_raw(f_fwd, f_bwd):
    """Per-voxel mean squared distance between f_fwd and its zeta estimate."""
    n = f_fwd[0].size
    est = zeta_fw(f_fwd, f_bwd)
    r = f_fwd - est
    return float((r * r).sum()) / n, r


def inv_loss_raw_bw(f_fwd, f_bwd, r, g):
    n = f_fwd[0].size
    gr = r * (2.0 * g / n)
    gp, gb = zeta_bw(f_fwd, f_bwd, -gr)
    gp += gr
    return gp, gb


# ---------------------------------------------------------------------------
# Full pipeline


@dataclass
class PipelineState:
    """Everything the energy needs to evaluate one configuration.

    Parameters are per-increment half-resolution fields, shape
    (3, hx, hy, hz); the moving/fixed soft masks live on the fine grid.
    """

    mode: str
    moving: np.ndarray
    fixed: np.ndarray
    params_fwd: list
    params_bwd: list = field(default_factory=list)
    squaring_steps: int = 7

    def __post_init__(self):
        n_fwd, n_bwd, _, _, _ = mode_structure(self.mode)
        if len(self.params_fwd) != n_fwd or len(self.params_bwd) != n_bwd:
            raise DataError(
                f"mode {self.mode} expects {n_fwd} forward / {n_bwd} backward "
                f"parameter sets, got {len(self.params_fwd)}/{len(self.params_bwd)}")
        if self.moving.shape != self.fixed.shape:
            raise GridMismatchError("moving and fixed mask shapes differ")
        half = tuple(max(2, (n + 1) // 2) for n in self.moving.shape)
        for p in list(self.params_fwd) + list(self.params_bwd):
            if p.shape != (3,) + half:
                raise DataError(
                    f"parameter shape {p.shape} does not match half grid {half}")

    @property
    def fine_dims(self):
        return self.moving.shape


def _build_direction(params, integrate, steps, fine_dims):
    """Params -> fine-resolution incremental fields (+ caches for backward)."""
    fields = []
    int_caches = []
    for p in params:
        if integrate:
            phi_h, saved = integrate_fw(p, steps)
        else:
            phi_h, saved = p, None
        fields.append(2.0 * upsample_array(phi_h, fine_dims))
        int_caches.append(saved)
    if len(fields) == 1:
        composed = fields[0]
        comp_cache = None
    else:
        composed = compose_fw(fields[0], fields[1])
        comp_cache = (fields[0], fields[1])
    return fields, composed, comp_cache, int_caches


def _direction_bw(g_fields, g_composed, comp_cache, int_caches, params,
                  integrate, half_dims):
    """Push field cotangents back to the parameter sets of one direction.

    g_fields entries are owned accumulators and are updated in place."""
    if comp_cache is None:
        g_fields[0] += g_composed
    else:
        g0, g1 = compose_bw(comp_cache[0], comp_cache[1], g_composed)
        g_fields[0] += g0
        g_fields[1] += g1
    grads = []
    for gf, saved in zip(g_fields, int_caches):
        gh = 2.0 * upsample_array_adjoint(gf, half_dims)
        grads.append(integrate_bw(saved, gh) if integrate else gh)
    return grads


def _build_pipeline(state):
    """Fields, composed fields, and the warped mask with backward caches."""
    n_fwd, n_bwd, integrate, use_af, use_inv = mode_structure(state.mode)
    fine = state.fine_dims
    steps = state.squaring_steps

    f_fields, f_comp, f_ccache, f_icaches = _build_direction(
        state.params_fwd, integrate, steps, fine)
    if n_bwd:
        b_fields, b_comp, b_ccache, b_icaches = _build_direction(
            state.params_bwd, integrate, steps, fine)
    else:
        b_fields, b_comp, b_ccache, b_icaches = [], None, None, []

    warped, pgrad = warp_fw(state.moving, f_comp)
    sim, sim_cache = dice_loss_raw(warped, state.fixed)
    return {
        "f_fields": f_fields, "f_comp": f_comp, "f_ccache": f_ccache,
        "f_icaches": f_icaches, "b_fields": b_fields, "b_comp": b_comp,
        "b_ccache": b_ccache, "b_icaches": b_icaches,
        "warped": warped, "pgrad": pgrad, "sim": sim, "sim_cache": sim_cache,
        "use_af": use_af, "use_inv": use_inv, "integrate": integrate,
    }


def _breakdown(sim, smooth, antifold, inv, w):
    total = w.alpha * sim + w.beta * smooth + w.gamma * antifold + w.mu * inv
    return LossBreakdown(sim=sim, smooth=smooth, antifold=antifold, inv=inv,
                         total=total)


def _regularizer_targets(c):
    """Fields the smoothness/anti-folding terms act on.

    Incremental modes regularize the composed field per direction (the
    per-increment alternative under-penalizes the composition and breaks
    the smoothness ordering across modes)."""
    if REG_GRANULARITY == "composed":
        targets = [("fc", c["f_comp"])]
        if c["b_comp"] is not None:
            targets.append(("bc", c["b_comp"]))
        return targets
    targets = [("f", f) for f in c["f_fields"]]
    targets += [("b", f) for f in c["b_fields"]]
    return targets


def loss_total(state, w=LossWeights()):
    """Evaluate the weighted energy for the state's mode."""
    c = _build_pipeline(state)
    smooth = 0.0
    antifold = 0.0
    for _, f in _regularizer_targets(c):
        smooth += smooth_raw(f)[0]
        if c["use_af"]:
            antifold += antifold_raw(f)[0]
    inv = 0.0
    if c["use_inv"]:
        inv = inv_loss_raw(c["f_comp"], c["b_comp"])[0] \
            + inv_loss_raw(c["b_comp"], c["f_comp"])[0]
    return _breakdown(c["sim"], smooth, antifold, inv, w)


def grad_total(state, w=LossWeights()):
    """Energy and its exact gradient w.r.t. every parameter set.

    Returns (LossBreakdown, grads_fwd, grads_bwd) with gradients matching
    the shapes of state.params_fwd / state.params_bwd.
    """
    c = _build_pipeline(state)
    f_fields, b_fields = c["f_fields"], c["b_fields"]
    nf, nb = len(f_fields), len(b_fields)
    n_vox = f_fields[0][0].size
    gf_fields = [np.zeros_like(f) for f in f_fields]
    gb_fields = [np.zeros_like(f) for f in b_fields]
    gf_comp = np.zeros_like(c["f_comp"])
    gb_comp = np.zeros_like(c["b_comp"]) if nb else None

    # regularizers: fused value + gradient accumulation on the target fields
    smooth = 0.0
    antifold = 0.0
    if REG_GRANULARITY == "composed":
        reg_accum = {"fc": gf_comp, "bc": gb_comp}
    else:
        reg_accum = None
    for idx, (tag, f) in enumerate(_regularizer_targets(c)):
        if reg_accum is not None:
            g = reg_accum[tag]
        else:
            g = gf_fields[idx] if idx < nf else gb_fields[idx - nf]
        smooth += _kernels.smooth_loss_grad(f, g, w.beta) / n_vox
        if c["use_af"]:
            antifold += _kernels.antifold_loss_grad(f, g, w.gamma) / n_vox

    # similarity -> warped mask -> composed forward field
    g_warped = dice_loss_raw_bw(c["warped"], state.fixed, c["sim_cache"],
                                w.alpha)
    gf_comp += c["pgrad"] * g_warped

    inv = 0.0
    if c["use_inv"]:
        v1, r1 = inv_loss_raw(c["f_comp"], c["b_comp"])
        v2, r2 = inv_loss_raw(c["b_comp"], c["f_comp"])
        inv = v1 + v2
        ga, gb = inv_loss_raw_bw(c["f_comp"], c["b_comp"], r1, w.mu)
        gf_comp += ga
        gb_comp += gb
        ga, gb = inv_loss_raw_bw(c["b_comp"], c["f_comp"], r2, w.mu)
        gb_comp += ga
        gf_comp += gb

    bd = _breakdown(c["sim"], smooth, antifold, inv, w)

    half = state.params_fwd[0].shape[1:]
    grads_fwd = _direction_bw(gf_fields, gf_comp, c["f_ccache"],
                              c["f_icaches"], state.params_fwd,
                              c["integrate"], half)
    grads_bwd = []
    if nb:
        grads_bwd = _direction_bw(gb_fields, gb_comp, c["b_ccache"],
                                  c["b_icaches"], state.params_bwd,
                                  c["integrate"], half)
    return bd, grads_fwd, grads_bwd


# ---------------------------------------------------------------------------
# Public single-term wrappers on domain types


def loss_smooth(phi):
    """Mean squared Frobenius norm of the field Jacobian."""
    return smooth_raw(phi.data)[0]


def loss_antifold(phi):
    """Folding penalty from diagonal derivatives <= -1."""
    return antifold_raw(phi.data)[0]


def loss_sim(warped, fixed):
    """Soft Dice dissimilarity of two soft masks."""
    if warped.grid != fixed.grid:
        raise GridMismatchError("mask grids differ")
    return dice_loss_raw(warped.data, fixed.data)[0]


def loss_inv(phi_fwd, phi_bwd):
    """Inverse-consistency residual of a forward/backward field pair."""
    if phi_fwd.grid != phi_bwd.grid:
        raise GridMismatchError("field grids differ")
    return inv_loss_raw(phi_fwd.data, phi_bwd.data)[0]
