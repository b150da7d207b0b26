"""Coherent-state photon statistics and the click-probability forward model.

A detector is summarised by a linear efficiency ``eta`` and per-photon-number
detection probabilities ``p_1 .. p_nmax``, with a single lumped tail
probability applied to every higher photon number. Illuminated by a coherent
state of mean photon number N, the click probability is

    R = 1 - exp(-eta*N) * sum_n (1 - p_n) * (eta*N)**n / n!

Because all probabilities above ``nmax`` share one value, the infinite sum is
evaluated in closed form through the Poisson survival function; the result is
exact to floating-point rounding (well below 1e-12 absolute).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

# hc in eV*nm; photon_energy_eV = HC_EV_NM / wavelength_nm
HC_EV_NM = 1239.8419


@dataclass(frozen=True)
class PhotonEnergy:
    """Wavelength of the probe light with its derived photon energy."""

    wavelength_nm: float

    def __post_init__(self):
        if not (self.wavelength_nm > 0 and math.isfinite(self.wavelength_nm)):
            raise ValueError(f"wavelength must be positive, got {self.wavelength_nm}")

    @property
    def photon_energy_eV(self) -> float:
        return HC_EV_NM / self.wavelength_nm


@dataclass(frozen=True)
class DetectorResponse:
    """Detector parameters: efficiency, p_1..p_nmax and the lumped tail.

    p_0 is fixed at zero: dark counts are not part of the per-pulse model
    (the simulator adds them as an independent window process).
    """

    eta: float
    p: tuple[float, ...]
    p_tail: float

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))
        if len(self.p) < 1:
            raise ValueError("need at least p_1")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        for n, v in enumerate(self.p, start=1):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"p_{n} must lie in [0, 1], got {v}")
        if not (0.0 <= self.p_tail <= 1.0):
            raise ValueError(f"p_tail must lie in [0, 1], got {self.p_tail}")

    @property
    def nmax(self) -> int:
        return len(self.p)


def poisson_pmf(mu: float, n: int) -> float:
    """exp(-mu) * mu**n / n!, evaluated in log space via log-gamma."""
    if not (mu >= 0 and math.isfinite(mu)):
        raise ValueError(f"mean photon number must be finite and >= 0, got {mu}")
    n = int(n)
    if n < 0:
        raise ValueError(f"photon number must be >= 0, got {n}")
    if mu == 0.0:
        return 1.0 if n == 0 else 0.0
    return float(math.exp(n * math.log(mu) - mu - special.gammaln(n + 1)))


def poisson_sf(n: int, mu) -> np.ndarray | float:
    """P(X > n) for X ~ Poisson(mu), in closed form (regularized gamma)."""
    return special.gammainc(n + 1, mu)


def _pmf_table(mu: np.ndarray, nmax: int) -> np.ndarray:
    """Poisson pmf values for n = 0..nmax; shape (len(mu), nmax + 1)."""
    mu = np.asarray(mu, dtype=float)
    n = np.arange(nmax + 1)
    with np.errstate(divide="ignore"):
        logpmf = (
            special.xlogy(n[None, :], mu[:, None])
            - mu[:, None]
            - special.gammaln(n + 1)[None, :]
        )
    return np.exp(logpmf)


def click_probability(r: DetectorResponse, N) -> np.ndarray | float:
    """Click probability R for mean photon number N (scalar or array)."""
    N = np.asarray(N, dtype=float)
    if np.any(~np.isfinite(N)) or np.any(N < 0):
        raise ValueError("mean photon number must be finite and >= 0")
    scalar = N.ndim == 0
    mu = r.eta * np.atleast_1d(N)
    pmf = _pmf_table(mu, r.nmax)
    R = pmf[:, 1:] @ np.asarray(r.p) + r.p_tail * poisson_sf(r.nmax, mu)
    R = np.clip(R, 0.0, 1.0)
    return float(R[0]) if scalar else R


def contribution_decomposition(r: DetectorResponse, N: float) -> list[tuple]:
    """Per-photon-number contributions to the click probability.

    Returns [(1, C_1), ..., (nmax, C_nmax), ("tail", C_tail)] with
    C_n = p_n * Poisson(eta*N, n) and the tail lumped in closed form;
    the terms sum to click_probability(r, N).
    """
    N = float(N)
    if not (N >= 0 and math.isfinite(N)):
        raise ValueError("mean photon number must be finite and >= 0")
    mu = np.array([r.eta * N])
    pmf = _pmf_table(mu, r.nmax)[0]
    out: list[tuple] = [(n, r.p[n - 1] * pmf[n]) for n in range(1, r.nmax + 1)]
    out.append(("tail", r.p_tail * float(poisson_sf(r.nmax, mu[0]))))
    return out
