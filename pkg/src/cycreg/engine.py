"""Per-pair registration: affine pre-alignment, Adam-driven minimization of
the registration energy under one of five field parameterizations, and a
multi-mode comparison harness.

Parameters start at zero (identity transform), so iteration 0 of every
loss trace is the unregistered similarity. Optimization is deterministic
for a fixed configuration; different pairs and modes are independent.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .energy import (
    LossWeights,
    PipelineState,
    dice_loss_raw,
    dice_loss_raw_bw,
    grad_total,
    mode_structure,
)
from .errors import DataError, EmptyMaskError, GridMismatchError, NumericalAbortError
from .fields import IntegrationConfig, compose_fw, integrate_fw, warp_fw
from .grid import MASK, VectorField3, Volume3, upsample_array

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Adam


def adam_init(params):
    return {
        "m": [np.zeros_like(p) for p in params],
        "v": [np.zeros_like(p) for p in params],
    }


def adam_step(params, grads, moment_state, lr, t):
    """One Adam update with bias correction; returns (params, state)."""
    m, v = moment_state["m"], moment_state["v"]
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * (g * g)
        mhat = m[i] / (1.0 - ADAM_BETA1 ** t)
        vhat = v[i] / (1.0 - ADAM_BETA2 ** t)
        new_params.append(p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS))
    return new_params, moment_state


# ---------------------------------------------------------------------------
# Affine pre-alignment


@dataclass(frozen=True)
class AffineTransform:
    """Pull-back affine map: a fixed-grid voxel point p samples the moving
    volume at linear @ p + translation."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(lin)) <= 1e-6:
            raise DataError("affine linear part is singular")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def is_identity(self):
        return np.array_equal(self.linear, np.eye(3)) and \
            np.array_equal(self.translation, np.zeros(3))


def _identity_coords(dims):
    return np.indices(dims, dtype=np.float64)


def affine_displacement(transform, dims):
    """Displacement-field form of an affine map on a given grid."""
    p = _identity_coords(dims)
    lin, tr = transform.linear, transform.translation
    d = np.empty((3,) + tuple(dims))
    for i in range(3):
        d[i] = (lin[i, 0] * p[0] + lin[i, 1] * p[1] + lin[i, 2] * p[2]
                + tr[i]) - p[i]
    return np.ascontiguousarray(d)


def apply_affine(vol, transform):
    """Resample a volume through an affine transform (pull-back)."""
    if transform.is_identity():
        return vol
    d = affine_displacement(transform, vol.grid.dims)
    out = np.empty_like(vol.data)
    _kernels.warp_scalar(vol.data, d[0], d[1], d[2], out)
    if vol.kind == MASK:
        np.clip(out, 0.0, 1.0, out=out)
    return Volume3(vol.grid, out, vol.kind)


def _mask_moments(data):
    sel = data > 0.5
    if not sel.any():
        raise EmptyMaskError("affine pre-alignment needs nonempty masks")
    idx = np.array(np.nonzero(sel), dtype=np.float64)
    com = idx.mean(axis=1)
    std = idx.std(axis=1)
    return com, std


def affine_prereg(s_a, s_b, iters=150, lr_linear=0.01, lr_translation=0.2):
    """Affine alignment of moving mask s_a onto fixed mask s_b.

    Initializes from centers of mass and per-axis second moments, then
    refines the 12 parameters with Adam on the soft-Dice loss. Returns the
    best transform encountered.
    """
    if s_a.grid != s_b.grid:
        raise GridMismatchError("affine_prereg masks must share a grid")
    com_a, std_a = _mask_moments(s_a.data)
    com_b, std_b = _mask_moments(s_b.data)
    degenerate = (std_a < 0.5).any() or (std_b < 0.5).any()
    if degenerate:
        lin0 = np.eye(3)
    else:
        lin0 = np.diag(std_a / std_b)

    dims = s_a.grid.dims
    p = _identity_coords(dims)
    pc = [p[i] - com_b[i] for i in range(3)]
    fixed = s_b.data
    mov = s_a.data

    lin = lin0.copy()
    tr = np.zeros(3)

    def evaluate(lin, tr):
        d = np.empty((3,) + dims)
        for i in range(3):
            d[i] = (lin[i, 0] * pc[0] + lin[i, 1] * pc[1] + lin[i, 2] * pc[2]
                    + com_a[i] + tr[i]) - p[i]
        warped, pgrad = warp_fw(mov, np.ascontiguousarray(d))
        loss, cache = dice_loss_raw(warped, fixed)
        return loss, warped, pgrad, cache

    loss0, _, _, _ = evaluate(lin, tr)
    best = (loss0, lin.copy(), tr.copy())

    if degenerate:
        # optimize translation only; scaling is unidentifiable
        param_sets = [tr]
    else:
        param_sets = [lin, tr]
    state = adam_init(param_sets)
    lrs = [lr_linear, lr_translation] if not degenerate else [lr_translation]

    for t in range(1, iters + 1):
        loss, warped, pgrad, cache = evaluate(lin, tr)
        if loss < best[0]:
            best = (loss, lin.copy(), tr.copy())
        gq = pgrad * dice_loss_raw_bw(warped, fixed, cache, 1.0)
        g_tr = gq.sum(axis=(1, 2, 3))
        if degenerate:
            grads = [g_tr]
        else:
            g_lin = np.empty((3, 3))
            for i in range(3):
                for j in range(3):
                    g_lin[i, j] = float((gq[i] * pc[j]).sum())
            grads = [g_lin, g_tr]
        updated = []
        for k, (ps, g, lr) in enumerate(zip(param_sets, grads, lrs)):
            upd, _ = adam_step([ps], [g], {"m": [state["m"][k]], "v": [state["v"][k]]},
                               lr, t)
            updated.append(upd[0])
        if degenerate:
            tr = updated[0]
            param_sets = [tr]
        else:
            lin, tr = updated
            param_sets = [lin, tr]

    _, lin, tr = best
    translation = lin @ (-com_b) + com_a + tr
    return AffineTransform(lin, translation)


# ---------------------------------------------------------------------------
# Deformable registration


@dataclass(frozen=True)
class RegistrationConfig:
    mode: str = "diffeocyc_inc2"
    weights: LossWeights = field(default_factory=LossWeights)
    learn_rate: float = 0.05
    max_iters: int = 500
    patience: int = 25
    rel_tol: float = 1e-4
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    seed: int = 0
    dtype: str = "float64"  # inner-loop precision; float32 halves memory traffic

    def __post_init__(self):
        mode_structure(self.mode)
        if self.max_iters < 1:
            raise DataError("max_iters must be >= 1")
        if self.learn_rate <= 0:
            raise DataError("learn_rate must be > 0")
        if self.patience < 1:
            raise DataError("patience must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise DataError(f"dtype must be float64 or float32, got {self.dtype}")


@dataclass
class RegistrationResult:
    affine: AffineTransform
    forward_fields: list
    backward_fields: list
    warped_mask: Volume3
    cyclic_mask: Volume3
    loss_trace: list
    iterations_run: int
    best_total: float
    composed_forward: VectorField3
    composed_backward: VectorField3


def _half_dims(dims):
    return tuple(max(2, (n + 1) // 2) for n in dims)


def _fields_from_params(params, integrate, steps, fine_dims):
    out = []
    for prm in params:
        phi_h = integrate_fw(prm, steps)[0] if integrate else prm
        out.append(2.0 * upsample_array(phi_h, fine_dims))
    return out


def _compose_chain(fields):
    if not fields:
        return None
    composed = fields[0]
    for f in fields[1:]:
        composed = compose_fw(composed, f)
    return composed


def _check_finite(bd):
    for term in ("sim", "smooth", "antifold", "inv", "total"):
        if not np.isfinite(getattr(bd, term)):
            raise NumericalAbortError(term)


def register(s_a, s_b, cfg=RegistrationConfig(), run_affine=False):
    """Register moving mask s_a onto fixed mask s_b.

    With run_affine=True an affine pre-alignment is estimated first and the
    deformable stage operates on the affinely resampled moving mask.
    """
    if s_a.grid != s_b.grid:
        raise GridMismatchError("register needs masks on the same grid")
    if not (s_a.data > 0.5).any() or not (s_b.data > 0.5).any():
        raise EmptyMaskError("register needs nonempty masks")

    affine = affine_prereg(s_a, s_b) if run_affine else AffineTransform.identity()
    moving = apply_affine(s_a, affine)

    n_fwd, n_bwd, integrate, _, _ = mode_structure(cfg.mode)
    dims = s_a.grid.dims
    half = _half_dims(dims)
    steps = cfg.integration.squaring_steps

    dt = np.dtype(cfg.dtype)
    params = [np.zeros((3,) + half, dtype=dt) for _ in range(n_fwd + n_bwd)]
    state = PipelineState(cfg.mode, np.ascontiguousarray(moving.data, dtype=dt),
                          np.ascontiguousarray(s_b.data, dtype=dt),
                          params[:n_fwd], params[n_fwd:], steps)
    opt = adam_init(params)

    trace = []
    best_total = np.inf
    stall = 0
    iterations = 0

    for t in range(1, cfg.max_iters + 1):
        bd, gf, gb = grad_total(state, cfg.weights)
        _check_finite(bd)
        trace.append(bd)
        iterations = t
        significant = not np.isfinite(best_total) or \
            bd.total < best_total * (1.0 - cfg.rel_tol)
        best_total = min(best_total, bd.total)
        if significant:
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
        if t < cfg.max_iters:
            params, opt = adam_step(params, gf + gb, opt, cfg.learn_rate, t)
            state.params_fwd = params[:n_fwd]
            state.params_bwd = params[n_fwd:]

    # result carries the final parameters; best_total records the lowest
    # energy seen so the run can never be reported worse than identity
    final_params = [p.astype(np.float64) for p in params]
    fwd_arrays = _fields_from_params(final_params[:n_fwd], integrate, steps, dims)
    bwd_arrays = _fields_from_params(final_params[n_fwd:], integrate, steps, dims)
    f_comp = _compose_chain(fwd_arrays)
    b_comp = _compose_chain(bwd_arrays)

    grid = s_a.grid
    warped = Volume3(grid, np.clip(warp_fw(moving.data, f_comp)[0], 0.0, 1.0), MASK)
    cyclic = None
    if b_comp is not None:
        cyclic = Volume3(grid, np.clip(warp_fw(warped.data, b_comp)[0], 0.0, 1.0),
                         MASK)

    return RegistrationResult(
        affine=affine,
        forward_fields=[VectorField3(grid, f) for f in fwd_arrays],
        backward_fields=[VectorField3(grid, f) for f in bwd_arrays],
        warped_mask=warped,
        cyclic_mask=cyclic,
        loss_trace=trace,
        iterations_run=iterations,
        best_total=best_total,
        composed_forward=VectorField3(grid, f_comp),
        composed_backward=VectorField3(grid, b_comp) if b_comp is not None else None,
    )


def run_mode_suite(pair, modes, cfg_base, run_affine=False):
    """Register one pair under several modes with an identical budget.

    `pair` must expose mask_a/mask_b (and optionally images and tumor
    masks, see metrics.report). Returns {mode: (result, report)}.
    """
    from .metrics import report as build_report

    out = {}
    for mode in modes:
        cfg = replace(cfg_base, mode=mode)
        result = register(pair.mask_a, pair.mask_b, cfg, run_affine=run_affine)
        out[mode] = (result, build_report(pair, result))
    return out
