"""From reconstructed p_n curves to thresholds, scaling law and model fits.

Pipeline: interpolate iso-probability threshold currents from each
(wavelength, photon number) response curve, fit the threshold line I(E) by
weighted least squares, rescale every curve onto the collapse coordinate
u = I - gamma * E, and compare the threshold points against the three
microscopic detection models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from .photonics import HC_EV_NM

#: quadrature floor on interpolated threshold currents (current readout)
CURRENT_READOUT_FLOOR_UA = 0.05
#: default per-point sigma used when fitting the threshold line
SCALING_SIGMA_FLOOR_UA = 0.1
#: width of the u-bins used by the collapse score
COLLAPSE_BIN_UA = 0.2

MODEL_KINDS = ("normal-core", "diffusion", "fluctuation")


class NoThresholdError(ValueError):
    """The response curve does not bracket the requested level."""


class CollapseError(ValueError):
    """No u-bin holds points from two or more series."""


@dataclass
class ResponseCurve:
    """p_n versus bias current for one (wavelength, photon number) series."""

    wavelength_nm: float
    n: int
    currents_uA: np.ndarray
    p: np.ndarray
    sigma_p: np.ndarray

    def __post_init__(self):
        self.currents_uA = np.asarray(self.currents_uA, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.sigma_p = np.asarray(self.sigma_p, dtype=float)
        if not (len(self.currents_uA) == len(self.p) == len(self.sigma_p)):
            raise ValueError("curve arrays must have equal length")
        if np.any(np.diff(self.currents_uA) <= 0):
            raise ValueError("bias currents must be strictly increasing")
        if np.any((self.p < 0) | (self.p > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.n < 1:
            raise ValueError("photon number must be >= 1")

    @property
    def energy_eV(self) -> float:
        """Total excitation energy n * h*nu of this series."""
        return self.n * HC_EV_NM / self.wavelength_nm


@dataclass(frozen=True)
class ThresholdPoint:
    energy_eV: float
    current_uA: float
    sigma_current_uA: float

    def __post_init__(self):
        if self.energy_eV <= 0:
            raise ValueError("energy must be positive")
        if self.sigma_current_uA < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class ScalingFit:
    gamma_uA_per_eV: float
    intercept_uA: float
    covariance: np.ndarray  # 2x2 over (intercept, gamma)

    @property
    def gamma_se(self) -> float:
        return math.sqrt(max(self.covariance[1, 1], 0.0))

    @property
    def intercept_se(self) -> float:
        return math.sqrt(max(self.covariance[0, 0], 0.0))


@dataclass(frozen=True)
class ModelFit:
    kind: str
    params: dict
    param_errors: dict
    chi2_per_dof: float
    flagged: bool = False


@dataclass(frozen=True)
class DarkExtrapolation:
    intercept_uA: float
    sigma_uA: float
    Ic_uA: float

    @property
    def ratio_to_Ic(self) -> float:
        return self.intercept_uA / self.Ic_uA


# ---------------------------------------------------------------------------
# thresholds and the scaling law


def threshold_current(curve: ResponseCurve, level: float = 0.1) -> ThresholdPoint:
    """Bias current where the curve crosses `level`, by log-linear interpolation.

    log10(p) is taken linear in I between the two bracketing grid points; the
    uncertainty propagates both endpoint sigmas and adds the current-readout
    floor in quadrature.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    I = curve.currents_uA
    p = curve.p
    sp = curve.sigma_p

    exact = np.nonzero(p == level)[0]
    if len(exact):
        i = int(exact[0])
        return ThresholdPoint(curve.energy_eV, float(I[i]), CURRENT_READOUT_FLOOR_UA)

    for i in range(len(p) - 1):
        p1, p2 = p[i], p[i + 1]
        if p1 <= 0 or p2 <= 0:
            continue
        if (p1 - level) * (p2 - level) < 0:
            l1, l2 = math.log10(p1), math.log10(p2)
            L = math.log10(level)
            t = (L - l1) / (l2 - l1)
            Ith = I[i] + t * (I[i + 1] - I[i])
            dI = I[i + 1] - I[i]
            dl = l2 - l1
            dI_dl1 = dI * (L - l2) / dl**2
            dI_dl2 = -dI * (L - l1) / dl**2
            s1 = sp[i] / (p1 * math.log(10.0))
            s2 = sp[i + 1] / (p2 * math.log(10.0))
            var = (dI_dl1 * s1) ** 2 + (dI_dl2 * s2) ** 2 + CURRENT_READOUT_FLOOR_UA**2
            return ThresholdPoint(curve.energy_eV, float(Ith), math.sqrt(var))

    raise NoThresholdError(
        f"curve (wavelength {curve.wavelength_nm:g} nm, n={curve.n}) "
        f"does not bracket p={level:g}"
    )


def fit_scaling(
    points: list[ThresholdPoint],
    sigma_floor_uA: float = SCALING_SIGMA_FLOOR_UA,
) -> ScalingFit:
    """Weighted least squares of threshold current on excitation energy."""
    if len(points) < 3:
        raise ValueError("need at least 3 threshold points")
    E = np.array([pt.energy_eV for pt in points])
    I = np.array([pt.current_uA for pt in points])
    s = np.array([max(pt.sigma_current_uA, sigma_floor_uA) for pt in points])
    if np.ptp(E) == 0:
        raise ValueError("all threshold energies are equal; scaling fit is singular")

    X = np.column_stack([np.ones_like(E), E])
    Xw = X / s[:, None]
    Iw = I / s
    beta, *_ = np.linalg.lstsq(Xw, Iw, rcond=None)
    cov = np.linalg.inv(Xw.T @ Xw)
    return ScalingFit(gamma_uA_per_eV=float(beta[1]), intercept_uA=float(beta[0]), covariance=cov)


def extrapolate_dark(fit: ScalingFit, Ic_uA: float = 29.0) -> DarkExtrapolation:
    """Threshold current extrapolated to zero excitation energy.

    Purely descriptive: reports the E=0 intercept and its ratio to the
    critical current, where appreciable dark counts actually appear.
    """
    return DarkExtrapolation(
        intercept_uA=fit.intercept_uA, sigma_uA=fit.intercept_se, Ic_uA=Ic_uA
    )


# ---------------------------------------------------------------------------
# universal collapse


def collapse(
    curves: list[ResponseCurve],
    gamma_uA_per_eV: float,
    bin_width_uA: float = COLLAPSE_BIN_UA,
    p_min: float = 0.0,
    p_max: float = 1.0,
):
    """Rescale all curves onto u = I - gamma * E and score the overlap.

    Returns (points, score): `points` is a list of
    (u, p, wavelength_nm, n, bias_current_uA) tuples; `score` is the RMS,
    over u-bins holding points of >= 2 distinct (wavelength, n) series, of
    the standard deviation of log10(p) inside the bin.
    """
    if not math.isfinite(gamma_uA_per_eV):
        raise ValueError("gamma must be finite")
    pts = []
    for c in curves:
        for I, p in zip(c.currents_uA, c.p):
            if p <= 0 or not (p_min <= p <= p_max):
                continue
            u = I - gamma_uA_per_eV * c.energy_eV
            pts.append((u, p, c.wavelength_nm, c.n, I))

    bins: dict[int, list[tuple]] = {}
    for u, p, wl, n, I in pts:
        bins.setdefault(int(math.floor(u / bin_width_uA)), []).append((wl, n, p))
    stds = []
    for members in bins.values():
        series = {(wl, n) for wl, n, _ in members}
        if len(series) < 2:
            continue
        logs = np.log10([p for _, _, p in members])
        stds.append(logs.std(ddof=0))
    if not stds:
        raise CollapseError("no u-bin holds points from two or more series")
    score = float(np.sqrt(np.mean(np.square(stds))))
    return pts, score


def collapse_scan(
    curves: list[ResponseCurve],
    gamma_grid,
    bin_width_uA: float = COLLAPSE_BIN_UA,
    p_min: float = 0.0,
    p_max: float = 1.0,
):
    """Collapse score on a gamma grid; returns (grid, scores, argmin gamma)."""
    grid = np.asarray(gamma_grid, dtype=float)
    scores = np.empty_like(grid)
    for i, g in enumerate(grid):
        try:
            _, scores[i] = collapse(curves, g, bin_width_uA, p_min, p_max)
        except CollapseError:
            scores[i] = np.inf
    if not np.any(np.isfinite(scores)):
        raise CollapseError("collapse score undefined on the whole gamma grid")
    return grid, scores, float(grid[int(np.argmin(scores))])


# ---------------------------------------------------------------------------
# microscopic model fits (threshold current versus energy)


def _model_funcs(kind, w_nm, delta_eV, i0_uA, beta):
    if kind == "normal-core":
        # current scale absorbs the iso-probability cutoff choice
        def f(E, I_scale, C):
            return I_scale * (1.0 - (C / w_nm) * np.sqrt(E))

        return f, ("I_scale_uA", "C_per_sqrt_eV_nm")
    if kind == "diffusion":

        def f(E, I_scale, E0):
            return I_scale * (1.0 - E / E0)

        return f, ("I_scale_uA", "E0_eV")
    if kind == "fluctuation":
        if delta_eV is None or i0_uA is None or beta is None:
            raise ValueError(
                "fluctuation model needs fixed constants delta_eV, i0_uA and beta"
            )

        def f(E, A, alpha):
            return (i0_uA - A / (delta_eV - alpha * np.sqrt(E))) / beta

        return f, ("A_eV_uA", "alpha_sqrt_eV")
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def fit_model(
    points: list[ThresholdPoint],
    kind: str,
    w_nm: float = 150.0,
    Ic_uA: float = 29.0,
    delta_eV: float | None = None,
    i0_uA: float | None = None,
    beta: float | None = None,
    sigma_floor_uA: float = SCALING_SIGMA_FLOOR_UA,
) -> ModelFit:
    """Weighted least squares of one detection model in the current domain."""
    f, names = _model_funcs(kind, w_nm, delta_eV, i0_uA, beta)
    if len(points) < 3:
        raise ValueError("need at least 3 threshold points")
    E = np.array([pt.energy_eV for pt in points])
    I = np.array([pt.current_uA for pt in points])
    s = np.array([max(pt.sigma_current_uA, sigma_floor_uA) for pt in points])

    if kind == "normal-core":
        p0 = (Ic_uA, 0.3 * w_nm)
        bounds = ((0.0, 0.0), (np.inf, w_nm / math.sqrt(E.max())))
    elif kind == "diffusion":
        p0 = (I.max() + 1.0, 2.0 * E.max())
        bounds = ((0.0, 1e-6), (np.inf, np.inf))
    else:
        alpha0 = 0.5 * delta_eV / math.sqrt(E.max())
        A0 = float(np.median((i0_uA - beta * I) * (delta_eV - alpha0 * np.sqrt(E))))
        p0 = (max(A0, 1e-12), alpha0)
        bounds = ((0.0, 0.0), (np.inf, 0.999 * delta_eV / math.sqrt(E.max())))

    flagged = False
    try:
        popt, pcov = curve_fit(
            f, E, I, p0=p0, sigma=s, absolute_sigma=True, bounds=bounds, maxfev=20000
        )
    except (RuntimeError, ValueError):
        return ModelFit(kind, dict(zip(names, p0)), {}, math.inf, flagged=True)

    resid = (I - f(E, *popt)) / s
    dof = max(len(points) - len(popt), 1)
    errs = np.sqrt(np.clip(np.diag(pcov), 0.0, None))
    if not np.all(np.isfinite(errs)):
        flagged = True
    # parameter pinned at a bound means the optimizer left the physical region
    for v, lo, hi in zip(popt, bounds[0], bounds[1]):
        if np.isfinite(lo) and abs(v - lo) < 1e-12:
            flagged = True
        if np.isfinite(hi) and abs(v - hi) < 1e-12:
            flagged = True
    return ModelFit(
        kind=kind,
        params={k: float(v) for k, v in zip(names, popt)},
        param_errors={k: float(e) for k, e in zip(names, errs)},
        chi2_per_dof=float(np.sum(resid**2)) / dof,
        flagged=flagged,
    )


# ---------------------------------------------------------------------------
# building curves from reconstruction summaries


def build_response_curves(rows: list[dict], min_points: int = 2) -> list[ResponseCurve]:
    """Group per-sweep reconstruction rows into (wavelength, n) curves.

    Each row needs keys: wavelength_nm, bias_current_uA, nmax, p (list),
    p_se (list) and optionally no_signal. Only orders resolved by a sweep
    (n <= its nmax) contribute.
    """
    series: dict[tuple, list[tuple]] = {}
    for row in rows:
        if row.get("no_signal"):
            continue
        for n in range(1, int(row["nmax"]) + 1):
            se = row["p_se"][n - 1] if row.get("p_se") is not None else 0.0
            series.setdefault((row["wavelength_nm"], n), []).append(
                (row["bias_current_uA"], row["p"][n - 1], se)
            )
    curves = []
    for (wl, n), triples in sorted(series.items()):
        triples.sort()
        I, p, sp = (np.array(v, dtype=float) for v in zip(*triples))
        keep = np.concatenate(([True], np.diff(I) > 0))
        if keep.sum() < min_points:
            continue
        curves.append(ResponseCurve(wl, n, I[keep], p[keep], sp[keep]))
    return curves
