"""Cyclic incremental diffeomorphic registration of longitudinal liver
segmentation masks, with synthetic phantoms and a full evaluation suite."""

__version__ = "0.1.0"

from .energy import LossBreakdown, LossWeights, MODES, PipelineState, grad_total, loss_total
from .engine import (
    AffineTransform,
    RegistrationConfig,
    RegistrationResult,
    adam_step,
    affine_prereg,
    apply_affine,
    register,
    run_mode_suite,
)
from .errors import (
    DataError,
    EmptyMaskError,
    FileFormatError,
    GridMismatchError,
    NumericalAbortError,
)
from .fields import (
    IntegrationConfig,
    JacobianStats,
    compose,
    estimate_inverse_zeta,
    integrate_velocity,
    jacobian_stats,
    warp,
)
from .grid import (
    Grid,
    VectorField3,
    Volume3,
    crop_to_bbox,
    gradient_central,
    sample_field_trilinear,
    sample_trilinear,
    upsample2x,
)
from .io import read_volume, write_volume
from .metrics import (
    MetricsReport,
    TumorInstance,
    burden_relative_error,
    cycle_l1,
    dsc,
    extract_tumor_instances,
    match_tumors,
    mi,
    ncc,
    report,
)
from .phantom import PhantomPair, PhantomSpec, TumorSpec, gen_gt_deformation, gen_liver_mask, gen_pair
from .render import render_slice
