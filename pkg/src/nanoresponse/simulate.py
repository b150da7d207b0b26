"""Synthetic measurement campaigns from a sigmoid universal response curve.

The ground-truth detector responds only through the combination
u = I_b - gamma * (n * E_photon); every per-photon-number probability is the
same logistic curve S(u) evaluated at that coordinate. Counts are drawn with
binomial shot noise from a counter-based RNG keyed per measurement cell, so a
campaign is reproducible bit for bit and independent of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .photonics import HC_EV_NM, DetectorResponse, click_probability
from .tomography import SweepData, SweepRecord

#: photon numbers carried explicitly; everything above is the lumped tail
SIM_NMAX = 6


@dataclass(frozen=True)
class GroundTruthDetector:
    """Parameters of the generating detector.

    gamma_true is the threshold-line slope in uA/eV (negative: more energy
    needs less current); the collapse coordinate is u = I_b - gamma_true * E.
    """

    gamma_true: float = -2.9
    u0_uA: float = 21.0
    width_uA: float = 0.7
    p_sat: float = 0.5
    eta_true: float = 1e-3
    Ic_uA: float = 29.0
    dark_rate_hz: float = 0.0

    def __post_init__(self):
        if not self.width_uA > 0:
            raise ValueError("sigmoid width must be positive")
        if not 0.0 < self.p_sat <= 1.0:
            raise ValueError("p_sat must lie in (0, 1]")
        if not 0.0 <= self.eta_true <= 1.0:
            raise ValueError("eta_true must lie in [0, 1]")
        if self.dark_rate_hz < 0:
            raise ValueError("dark rate must be >= 0")


@dataclass(frozen=True)
class CampaignPlan:
    """Grids and counting statistics of one synthetic campaign."""

    wavelengths_nm: tuple[float, ...]
    bias_currents_uA: tuple[float, ...]
    mean_photon_numbers: tuple[float, ...]
    pulses_per_window: int = 1_000_000
    repeats: int = 10
    seed: int = 0
    window_s: float = 0.1

    def __post_init__(self):
        if not (self.wavelengths_nm and self.bias_currents_uA and self.mean_photon_numbers):
            raise ValueError("all campaign grids must be non-empty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.pulses_per_window < 1:
            raise ValueError("pulses_per_window must be >= 1")


def universal_p(d: GroundTruthDetector, n: int, Ib_uA: float, E_photon_eV: float) -> float:
    """Detection probability for an n-photon excitation at bias Ib."""
    if n < 1:
        raise ValueError("photon number must be >= 1")
    if Ib_uA > d.Ic_uA:
        raise ValueError(f"bias {Ib_uA} uA exceeds the critical current {d.Ic_uA} uA")
    u = Ib_uA - d.gamma_true * (n * E_photon_eV)
    return float(d.p_sat * expit((u - d.u0_uA) / d.width_uA))


def response_at(d: GroundTruthDetector, wavelength_nm: float, Ib_uA: float) -> DetectorResponse:
    """Ground-truth DetectorResponse at one (wavelength, bias) setting."""
    E = HC_EV_NM / wavelength_nm
    p = tuple(universal_p(d, n, Ib_uA, E) for n in range(1, SIM_NMAX + 1))
    return DetectorResponse(eta=d.eta_true, p=p, p_tail=universal_p(d, SIM_NMAX + 1, Ib_uA, E))


def _cell_rng(seed: int, iw: int, ii: int, inn: int, rep: int) -> np.random.Generator:
    cell = (iw << 48) | (ii << 32) | (inn << 16) | rep
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, cell], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_campaign(d: GroundTruthDetector, plan: CampaignPlan) -> list[SweepData]:
    """One SweepData per (wavelength, bias current), deterministic in the plan.

    Dark counts enter as an independent Poisson window process: the per-pulse
    no-click probability is multiplied by exp(-dark_rate * window_s / pulses),
    spreading the window's dark exposure evenly over its pulses.
    """
    dark_per_pulse = d.dark_rate_hz * plan.window_s / plan.pulses_per_window
    sweeps = []
    for iw, wl in enumerate(plan.wavelengths_nm):
        for ii, Ib in enumerate(plan.bias_currents_uA):
            r = response_at(d, wl, Ib)
            records = []
            for inn, N in enumerate(plan.mean_photon_numbers):
                R = click_probability(r, N)
                R_tot = 1.0 - (1.0 - R) * math.exp(-dark_per_pulse)
                for rep in range(plan.repeats):
                    rng = _cell_rng(plan.seed, iw, ii, inn, rep)
                    clicks = int(rng.binomial(plan.pulses_per_window, R_tot))
                    records.append(
                        SweepRecord(
                            wavelength_nm=wl,
                            bias_current_uA=Ib,
                            mean_photon_number=float(N),
                            pulses=plan.pulses_per_window,
                            clicks=clicks,
                            repeat_index=rep,
                        )
                    )
            sweeps.append(SweepData(records=records, label=f"sim w{wl:g}nm I{Ib:g}uA"))
    return sweeps
