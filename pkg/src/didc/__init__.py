"""Sharp difference-in-discontinuities estimation toolkit."""

from didc.data import CrossSection, PanelDataset, first_difference, load_panel, slice_period
from didc.kernels import KernelMoments, KernelSpec, kernel_moments, kernel_weight
from didc.lpreg import LocalPolyFit, ResidualVariance, estimate_residual_variance, fit_one_sided, sample_psi
from didc.bandwidth import BandwidthPlan, mse_optimal_b, mse_optimal_h, select_bandwidths
from didc.estimators import (
    DidcConfig,
    DidcEstimate,
    RdEstimate,
    bias_decomposition,
    estimate_didc,
    estimate_didc_as_difference_of_rds,
    estimate_rd,
    multiplicative_effect,
)

__version__ = "0.1.0"

__all__ = [
    "BandwidthPlan",
    "CrossSection",
    "DidcConfig",
    "DidcEstimate",
    "KernelMoments",
    "KernelSpec",
    "LocalPolyFit",
    "PanelDataset",
    "RdEstimate",
    "ResidualVariance",
    "bias_decomposition",
    "estimate_didc",
    "estimate_didc_as_difference_of_rds",
    "estimate_rd",
    "estimate_residual_variance",
    "first_difference",
    "fit_one_sided",
    "kernel_moments",
    "kernel_weight",
    "load_panel",
    "mse_optimal_b",
    "mse_optimal_h",
    "multiplicative_effect",
    "sample_psi",
    "select_bandwidths",
    "slice_period",
]
