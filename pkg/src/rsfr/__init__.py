"""Coarse-to-fine reconstruction of undersampled cardiac diffusion-weighted MRI.

The package covers the full desk-scale pipeline: phantom simulation with
analytically known diffusion tensors, Cartesian k-space degradation, a
state-space (Mamba-style) reconstruction backbone, pluggable semantic-prior
segmenters, a semantic-fusion refinement network, end-to-end training,
diffusion-tensor post-processing, image/DT quality metrics, and a CLI that
chains the stages. A scikit-learn style estimator facade wraps the trainable
core for use in standard fit/predict workflows.
"""

__version__ = "0.1.0"

from .kspace import (  # noqa: F401
    ImageSlice,
    KSpaceData,
    NormalizationRecord,
    SamplingMask,
    center_crop,
    denormalize,
    forward_operator,
    generate_mask,
    normalize_minmax,
    zero_fill,
    zero_pad,
)
from .phantom import (  # noqa: F401
    PhantomSpec,
    TensorField,
    add_rician_noise,
    generate_tensor_field,
    simulate_dwis,
)
from .dtfit import (  # noqa: F401
    DTParams,
    DWISeries,
    DiffusionTensorMap,
    LineProfile,
    compute_dt_params,
    compute_fa,
    compute_ha,
    compute_md,
    eig_sorted,
    fit_tensor_lls,
    ha_gradient,
    ha_line_profile,
)
from .metrics import (  # noqa: F401
    MetricReport,
    format_mean_std,
    mae_global,
    mann_whitney_u,
    perceptual_distance,
    psnr,
    ssim,
)
from .semantics import SegmenterKind, SemanticPrior, fallback_segment, segment  # noqa: F401

__all__ = [
    "ImageSlice", "KSpaceData", "NormalizationRecord", "SamplingMask",
    "center_crop", "denormalize", "forward_operator", "generate_mask",
    "normalize_minmax", "zero_fill", "zero_pad",
    "PhantomSpec", "TensorField", "add_rician_noise", "generate_tensor_field",
    "simulate_dwis",
    "DTParams", "DWISeries", "DiffusionTensorMap", "LineProfile",
    "compute_dt_params", "compute_fa", "compute_ha", "compute_md",
    "eig_sorted", "fit_tensor_lls", "ha_gradient", "ha_line_profile",
    "MetricReport", "format_mean_std", "mae_global", "mann_whitney_u",
    "perceptual_distance", "psnr", "ssim",
    "SegmenterKind", "SemanticPrior", "fallback_segment", "segment",
    "RSFRReconstructor",
]


def __getattr__(name):
    # torch-backed modules stay lazy so the numpy-only surface imports fast
    if name == "RSFRReconstructor":
        from .estimator import RSFRReconstructor
        return RSFRReconstructor
    raise AttributeError(f"module 'rsfr' has no attribute {name!r}")
