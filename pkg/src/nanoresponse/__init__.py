"""Multiphoton response toolkit for single-photon nanodetectors.

Forward click-probability model for coherent probes, maximum-likelihood
reconstruction of (eta, p_n) from power sweeps, a shot-noise campaign
simulator, and the downstream analysis: iso-probability thresholds, the
energy-current scaling law, the universal response-curve collapse and
microscopic detection-model fits.
"""

from .photonics import (
    HC_EV_NM,
    DetectorResponse,
    PhotonEnergy,
    click_probability,
    contribution_decomposition,
    poisson_pmf,
)
from .tomography import (
    DetectorTomography,
    FitFailureError,
    FitOptions,
    ReconstructionResult,
    SweepData,
    SweepRecord,
    bootstrap_errors,
    fit_response,
    fit_shared_eta,
    select_model_order,
)
from .simulate import CampaignPlan, GroundTruthDetector, simulate_campaign, universal_p
from .analysis import (
    CollapseError,
    DarkExtrapolation,
    ModelFit,
    NoThresholdError,
    ResponseCurve,
    ScalingFit,
    ThresholdPoint,
    collapse,
    collapse_scan,
    extrapolate_dark,
    fit_model,
    fit_scaling,
    threshold_current,
)

__version__ = "0.1.0"

__all__ = [
    "HC_EV_NM",
    "DetectorResponse",
    "PhotonEnergy",
    "click_probability",
    "contribution_decomposition",
    "poisson_pmf",
    "DetectorTomography",
    "FitFailureError",
    "FitOptions",
    "ReconstructionResult",
    "SweepData",
    "SweepRecord",
    "bootstrap_errors",
    "fit_response",
    "fit_shared_eta",
    "select_model_order",
    "CampaignPlan",
    "GroundTruthDetector",
    "simulate_campaign",
    "universal_p",
    "CollapseError",
    "DarkExtrapolation",
    "ModelFit",
    "NoThresholdError",
    "ResponseCurve",
    "ScalingFit",
    "ThresholdPoint",
    "collapse",
    "collapse_scan",
    "extrapolate_dark",
    "fit_model",
    "fit_scaling",
    "threshold_current",
]
