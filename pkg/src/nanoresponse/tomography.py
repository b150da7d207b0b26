"""Maximum-likelihood reconstruction of (eta, p_n) from power-sweep counts.

The fit maximizes the binomial log-likelihood of the observed click counts
under the forward model, over transformed parameters

    zeta    = log(eta)
    theta_n = logit(p_n)      (optionally a monotone cumulative form)
    theta_t = logit(p_tail)

so the optimizer is unconstrained inside the physical box. Five deterministic
initializations guard against the multimodality of the forward model at low
photon-number order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, special
from scipy.special import expit, logit, xlogy
from sklearn.base import BaseEstimator

from .photonics import DetectorResponse, _pmf_table, click_probability, poisson_sf

_R_LO = 1e-300
_R_HI = 1.0 - 1e-15


class FitFailureError(RuntimeError):
    """No optimizer start converged; carries the best attempt found."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class SweepRecord:
    """One counting window: illumination setting plus observed clicks."""

    wavelength_nm: float
    bias_current_uA: float
    mean_photon_number: float
    pulses: int
    clicks: float
    repeat_index: int = 0

    def __post_init__(self):
        if self.mean_photon_number < 0:
            raise ValueError("mean photon number must be >= 0")
        if self.pulses <= 0:
            raise ValueError("pulses must be positive")
        if not (0 <= self.clicks <= self.pulses):
            raise ValueError("clicks must lie in [0, pulses]")


@dataclass
class SweepData:
    """All records of one power sweep at a shared (wavelength, bias current)."""

    records: list[SweepRecord]
    label: str = ""

    def __post_init__(self):
        if not self.records:
            raise ValueError("sweep holds no records")

    @property
    def wavelength_nm(self) -> float:
        return self.records[0].wavelength_nm

    @property
    def bias_current_uA(self) -> float:
        return self.records[0].bias_current_uA

    def arrays(self):
        N = np.array([r.mean_photon_number for r in self.records], dtype=float)
        clicks = np.array([r.clicks for r in self.records], dtype=float)
        pulses = np.array([r.pulses for r in self.records], dtype=float)
        return N, clicks, pulses

    def validate_for_fit(self):
        keys = {(r.wavelength_nm, r.bias_current_uA) for r in self.records}
        if len(keys) != 1:
            raise ValueError("sweep mixes different (wavelength, bias current) settings")
        N = np.unique([r.mean_photon_number for r in self.records])
        N = N[N > 0]
        if len(N) < 8:
            raise ValueError("need at least 8 distinct mean photon numbers")
        if N.max() / N.min() < 1e3:
            raise ValueError("mean photon numbers must span at least 3 decades")


@dataclass
class ReconstructionResult:
    """Fitted detector response with uncertainty and fit-quality info."""

    response: DetectorResponse
    nmax: int
    covariance: np.ndarray  # over (zeta, theta_1..theta_nmax, theta_tail)
    deviance: float
    deviance_per_dof: float
    loglik: float
    converged: bool
    no_signal: bool = False
    std_errors: dict | None = None  # bootstrap; keys eta / p / p_tail
    monotone: bool = False
    x_opt: np.ndarray | None = None  # transformed optimum, for warm restarts


@dataclass
class FitOptions:
    nmax: int = 2
    monotone: bool = False
    n_starts: int = 5
    gtol: float = 1e-8
    ftol: float = 1e-12
    max_iter: int = 1000
    bootstrap_resamples: int = 200
    seed: int = 0


# ---------------------------------------------------------------------------
# model internals on transformed parameters


def _theta_from_raw(traw: np.ndarray, monotone: bool) -> np.ndarray:
    if not monotone or len(traw) == 1:
        return traw
    theta = np.empty_like(traw)
    theta[0] = traw[0]
    theta[1:] = traw[0] + np.cumsum(np.exp(traw[1:]))
    return theta


def _fold_grad_monotone(g_theta: np.ndarray, traw: np.ndarray) -> np.ndarray:
    # theta_n = t_1 + sum_{k<=n} exp(t_k): reverse-cumulative chain rule
    if len(traw) == 1:
        return g_theta
    g = np.empty_like(g_theta)
    g[0] = g_theta.sum()
    tail_sums = np.cumsum(g_theta[::-1])[::-1]
    g[1:] = np.exp(traw[1:]) * tail_sums[1:]
    return g


def _nll_and_grad(x, N, clicks, pulses, nmax, monotone):
    zeta = x[0]
    traw = x[1 : 1 + nmax]
    ttail = x[1 + nmax]
    theta = _theta_from_raw(traw, monotone)
    eta = math.exp(zeta)
    p = expit(theta)
    ptail = expit(np.clip(ttail, -500, 500))

    mu = eta * N
    pmf = _pmf_table(mu, nmax)
    sf = poisson_sf(nmax, mu)
    R = pmf[:, 1:] @ p + ptail * sf
    Rc = np.clip(R, _R_LO, _R_HI)

    nll = -(xlogy(clicks, Rc).sum() + xlogy(pulses - clicks, 1.0 - Rc).sum())
    w = (pulses - clicks) / (1.0 - Rc) - clicks / Rc  # dNLL/dR

    dR_dmu = (pmf[:, :nmax] - pmf[:, 1:]) @ p + ptail * pmf[:, nmax]
    g_zeta = w @ (dR_dmu * mu)
    g_theta = (w @ pmf[:, 1:]) * p * (1.0 - p)
    g_ttail = (w @ sf) * ptail * (1.0 - ptail)
    if monotone:
        g_theta = _fold_grad_monotone(g_theta, traw)
    return nll, np.concatenate(([g_zeta], g_theta, [g_ttail]))


def _deviance(clicks, pulses, R):
    Rc = np.clip(R, _R_LO, _R_HI)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = xlogy(clicks, clicks / (pulses * Rc)) + xlogy(
            pulses - clicks, (pulses - clicks) / (pulses * (1.0 - Rc))
        )
    return float(2.0 * term.sum())


def _num_hessian(grad_fn, x, eps=1e-5):
    n = len(x)
    H = np.empty((n, n))
    for i in range(n):
        dx = np.zeros(n)
        dx[i] = eps
        gp = grad_fn(x + dx)
        gm = grad_fn(x - dx)
        H[:, i] = (gp - gm) / (2.0 * eps)
    return 0.5 * (H + H.T)


def _psd_covariance(H):
    try:
        cov = linalg.pinvh(H)
    except Exception:
        cov = np.linalg.pinv(H)
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    return (V * np.clip(w, 0.0, None)) @ V.T


def _bounds(nmax, monotone):
    # eta <= 1 by construction; raw increments capped to keep exp() finite
    b = [(-60.0, 0.0)]
    if monotone:
        b += [(-40.0, 40.0)] + [(-40.0, 25.0)] * (nmax - 1)
    else:
        b += [(-40.0, 40.0)] * nmax
    b += [(-40.0, 40.0)]
    return b


# ---------------------------------------------------------------------------
# estimator


class DetectorTomography(BaseEstimator):
    """Reconstruct a detector response from click counts at known powers.

    sklearn-style estimator: ``fit(mean_photon_numbers, clicks, pulses)``
    then ``predict_proba(mean_photon_numbers)``. The fitted response and the
    full reconstruction record live in ``response_`` and ``result_``.
    """

    def __init__(
        self,
        nmax: int = 2,
        monotone: bool = False,
        n_starts: int = 5,
        gtol: float = 1e-8,
        ftol: float = 1e-12,
        max_iter: int = 1000,
    ):
        self.nmax = nmax
        self.monotone = monotone
        self.n_starts = n_starts
        self.gtol = gtol
        self.ftol = ftol
        self.max_iter = max_iter

    # -- internals ---------------------------------------------------------

    def _validate(self, N, clicks, pulses):
        N = np.asarray(N, dtype=float)
        clicks = np.asarray(clicks, dtype=float)
        pulses = np.asarray(pulses, dtype=float)
        if not (N.shape == clicks.shape == pulses.shape) or N.ndim != 1:
            raise ValueError("N, clicks and pulses must be 1-d arrays of equal length")
        if np.any(N < 0) or np.any(~np.isfinite(N)):
            raise ValueError("mean photon numbers must be finite and >= 0")
        if np.any(pulses <= 0):
            raise ValueError("pulses must be positive")
        if np.any(clicks < 0) or np.any(clicks > pulses):
            raise ValueError("clicks must lie in [0, pulses]")
        if self.nmax < 1:
            raise ValueError("nmax must be >= 1")
        return N, clicks, pulses

    def _start_points(self, N, clicks, pulses):
        nmax = self.nmax
        Robs = clicks / pulses
        usable = (Robs > 0) & (N > 0)
        order = np.argsort(N)
        low = [i for i in order if usable[i]][:5]
        slope = float(np.median(Robs[low] / N[low])) if low else 1e-6
        ptail0 = float(np.clip(Robs.max(), 1e-4, 1.0 - 1e-6))

        if nmax > 1:
            ramp = np.geomspace(1e-3, 0.1, nmax)
        else:
            ramp = np.array([0.01])
        grids = [
            np.full(nmax, 0.1),
            np.full(nmax, 1e-3),
            ramp,
            np.array([0.1] + [1e-3] * (nmax - 1)),
            np.full(nmax, 0.01),
        ][: self.n_starts]

        starts = []
        for p0 in grids:
            eta0 = float(np.clip(slope / p0[0], 1e-12, 1.0))
            theta0 = logit(p0)
            if self.monotone:
                theta_sorted = np.sort(theta0)
                traw = np.empty(nmax)
                traw[0] = theta_sorted[0]
                if nmax > 1:
                    inc = np.clip(np.diff(theta_sorted), 1e-3, None)
                    traw[1:] = np.log(inc)
            else:
                traw = theta0
            starts.append(np.concatenate(([math.log(eta0)], traw, [logit(ptail0)])))
        return starts

    def _minimize_from(self, x0, args):
        return optimize.minimize(
            _nll_and_grad,
            x0,
            args=args,
            jac=True,
            method="L-BFGS-B",
            bounds=_bounds(self.nmax, self.monotone),
            options={"maxiter": self.max_iter, "ftol": self.ftol, "gtol": self.gtol},
        )

    def _polish(self, x, args):
        """A couple of guarded Newton steps to sharpen the optimum."""
        f0, g0 = _nll_and_grad(x, *args)
        for _ in range(3):
            grad_fn = lambda y: _nll_and_grad(y, *args)[1]
            H = _num_hessian(grad_fn, x)
            try:
                step = np.linalg.solve(H, g0)
            except np.linalg.LinAlgError:
                break
            x_new = x - step
            lo = np.array([b[0] for b in _bounds(self.nmax, self.monotone)])
            hi = np.array([b[1] for b in _bounds(self.nmax, self.monotone)])
            x_new = np.clip(x_new, lo, hi)
            f_new, g_new = _nll_and_grad(x_new, *args)
            if not np.isfinite(f_new) or f_new > f0 + 1e-9 * max(1.0, abs(f0)):
                break
            x, f0, g0 = x_new, f_new, g_new
            if np.linalg.norm(g0, np.inf) < self.gtol:
                break
        return x, f0

    def _build_result(self, x, N, clicks, pulses, converged, no_signal=False):
        nmax = self.nmax
        eta = math.exp(x[0])
        theta = _theta_from_raw(x[1 : 1 + nmax], self.monotone)
        p = expit(theta)
        ptail = float(expit(x[1 + nmax]))
        response = DetectorResponse(eta=eta, p=tuple(p), p_tail=ptail)
        args = (N, clicks, pulses, nmax, self.monotone)
        nll = _nll_and_grad(x, *args)[0]
        R = click_probability(response, N)
        dev = _deviance(clicks, pulses, R)
        dof = max(len(N) - (nmax + 2), 1)
        grad_fn = lambda y: _nll_and_grad(y, *args)[1]
        cov = _psd_covariance(_num_hessian(grad_fn, x))
        return ReconstructionResult(
            response=response,
            nmax=nmax,
            covariance=cov,
            deviance=dev,
            deviance_per_dof=dev / dof,
            loglik=-nll,
            converged=converged,
            no_signal=no_signal,
            monotone=self.monotone,
            x_opt=np.array(x),
        )

    # -- public API --------------------------------------------------------

    def fit(self, mean_photon_numbers, clicks, pulses):
        N, clicks, pulses = self._validate(mean_photon_numbers, clicks, pulses)
        args = (N, clicks, pulses, self.nmax, self.monotone)

        if clicks.sum() == 0:
            # all probabilities at the lower bound; flagged, not an error
            x = np.concatenate(
                ([-30.0], np.full(self.nmax, -13.8155), [-13.8155])
            )
            if self.monotone:
                x[2 : 1 + self.nmax] = -20.0
            self.result_ = self._build_result(
                x, N, clicks, pulses, converged=True, no_signal=True
            )
            self.response_ = self.result_.response
            return self

        best_any = None
        best_conv = None
        for x0 in self._start_points(N, clicks, pulses):
            res = self._minimize_from(x0, args)
            if not np.isfinite(res.fun):
                continue
            if best_any is None or res.fun < best_any.fun:
                best_any = res
            if res.success and (best_conv is None or res.fun < best_conv.fun):
                best_conv = res
        if best_any is None:
            raise FitFailureError("all optimizer starts diverged", best=None)
        if best_conv is None:
            raise FitFailureError(
                "no optimizer start converged",
                best=self._build_result(best_any.x, N, clicks, pulses, converged=False),
            )
        x, _ = self._polish(best_conv.x, args)
        self.result_ = self._build_result(x, N, clicks, pulses, converged=True)
        self.response_ = self.result_.response
        return self

    def predict_proba(self, mean_photon_numbers):
        if not hasattr(self, "response_"):
            raise AttributeError("estimator is not fitted")
        return click_probability(self.response_, np.asarray(mean_photon_numbers, float))


# ---------------------------------------------------------------------------
# sweep-level operations


def fit_response(data: SweepData, opts: FitOptions | None = None) -> ReconstructionResult:
    """Reconstruct the detector response from one power sweep."""
    opts = opts or FitOptions()
    data.validate_for_fit()
    N, clicks, pulses = data.arrays()
    est = DetectorTomography(
        nmax=opts.nmax,
        monotone=opts.monotone,
        n_starts=opts.n_starts,
        gtol=opts.gtol,
        ftol=opts.ftol,
        max_iter=opts.max_iter,
    )
    est.fit(N, clicks, pulses)
    return est.result_


def _aic(result: ReconstructionResult) -> float:
    k = result.nmax + 2  # eta, p_1..p_nmax, p_tail
    return 2.0 * k + result.deviance


def fit_by_order(
    data: SweepData,
    nmax_candidates: Sequence[int],
    opts: FitOptions | None = None,
) -> dict[int, ReconstructionResult]:
    """Fit every candidate order; failed candidates are dropped."""
    opts = opts or FitOptions()
    out: dict[int, ReconstructionResult] = {}
    last_err: FitFailureError | None = None
    for nmax in nmax_candidates:
        o = FitOptions(**{**opts.__dict__, "nmax": int(nmax)})
        try:
            out[int(nmax)] = fit_response(data, o)
        except FitFailureError as err:
            last_err = err
    if not out:
        raise last_err or FitFailureError("no candidate order could be fitted")
    return out


def select_model_order(
    data: SweepData,
    nmax_candidates: Sequence[int] = (1, 2, 3, 4, 5, 6),
    opts: FitOptions | None = None,
    fits: dict[int, ReconstructionResult] | None = None,
) -> int:
    """Smallest order whose AIC is within 2 of the best candidate."""
    fits = fits if fits is not None else fit_by_order(data, nmax_candidates, opts)
    aic = {nmax: _aic(res) for nmax, res in fits.items()}
    best = min(aic.values())
    return min(n for n, a in sorted(aic.items()) if a <= best + 2.0)


def _resample_rng(seed: int, index: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def bootstrap_errors(
    data: SweepData,
    result: ReconstructionResult,
    resamples: int = 200,
    seed: int = 0,
) -> dict:
    """Parametric-bootstrap standard errors of (eta, p_n, p_tail).

    Clicks are redrawn as Binomial(pulses, R_fit) with a counter-based RNG
    keyed by (seed, resample index), so results do not depend on execution
    order. Each resample is refitted warm from the original optimum.
    """
    if not result.converged:
        raise ValueError("bootstrap requires a converged fit")
    N, _, pulses = data.arrays()
    Rfit = np.clip(click_probability(result.response, N), 0.0, 1.0)
    est = DetectorTomography(nmax=result.nmax, monotone=result.monotone)

    params = []
    failures = 0
    for i in range(resamples):
        rng = _resample_rng(seed, i)
        kk = rng.binomial(pulses.astype(np.int64), Rfit).astype(float)
        args = (N, kk, pulses, result.nmax, result.monotone)
        res = est._minimize_from(result.x_opt, args)
        if not (res.success and np.isfinite(res.fun)):
            failures += 1
            continue
        # warm starts can stall along flat, correlated directions; the Newton
        # polish restores the full spread of each resampled optimum
        x, _ = est._polish(res.x, args)
        theta = _theta_from_raw(x[1 : 1 + result.nmax], result.monotone)
        params.append(
            np.concatenate(([math.exp(x[0])], expit(theta), [expit(x[1 + result.nmax])]))
        )
    if failures > 0.2 * resamples:
        raise FitFailureError(
            f"{failures}/{resamples} bootstrap refits failed", best=result
        )
    arr = np.array(params)
    se = arr.std(axis=0, ddof=1)
    return {"eta": float(se[0]), "p": se[1 : 1 + result.nmax], "p_tail": float(se[-1])}


# ---------------------------------------------------------------------------
# joint fit with one efficiency shared across sweeps (e.g. per wavelength)


def fit_shared_eta(
    datasets: list[SweepData],
    results: list[ReconstructionResult],
    opts: FitOptions | None = None,
) -> list[ReconstructionResult]:
    """Refit several sweeps jointly with a single shared efficiency.

    Starts from the independent per-sweep optima; each returned result keeps
    its own p_n set but shares eta.
    """
    opts = opts or FitOptions()
    if len(datasets) != len(results):
        raise ValueError("need one prior result per sweep")
    arrays = [d.arrays() for d in datasets]
    nmaxes = [r.nmax for r in results]
    monotone = any(r.monotone for r in results)
    if monotone and not all(r.monotone for r in results):
        raise ValueError("cannot mix monotone and free parameterizations")

    # layout: [zeta, block_0 (nmax_0 + 1), block_1, ...]
    offsets = []
    pos = 1
    for nm in nmaxes:
        offsets.append(pos)
        pos += nm + 1
    size = pos

    def unpack(x):
        blocks = []
        for off, nm in zip(offsets, nmaxes):
            blocks.append(np.concatenate(([x[0]], x[off : off + nm + 1])))
        return blocks

    def nll_grad(x):
        total = 0.0
        grad = np.zeros(size)
        for (N, k, m), off, nm, xb in zip(arrays, offsets, nmaxes, unpack(x)):
            f, g = _nll_and_grad(xb, N, k, m, nm, monotone)
            total += f
            grad[0] += g[0]
            grad[off : off + nm + 1] += g[1:]
        return total, grad

    x0 = np.zeros(size)
    x0[0] = float(np.mean([r.x_opt[0] for r in results]))
    for off, nm, r in zip(offsets, nmaxes, results):
        x0[off : off + nm + 1] = r.x_opt[1:]

    bounds = [(-60.0, 0.0)]
    for nm in nmaxes:
        bounds += _bounds(nm, monotone)[1:]
    res = optimize.minimize(
        lambda x: nll_grad(x),
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": opts.max_iter * 2, "ftol": opts.ftol, "gtol": opts.gtol},
    )
    if not (res.success and np.isfinite(res.fun)):
        raise FitFailureError("shared-eta joint fit did not converge", best=results)

    out = []
    for (N, k, m), off, nm, r in zip(arrays, offsets, nmaxes, results):
        xb = np.concatenate(([res.x[0]], res.x[off : off + nm + 1]))
        est = DetectorTomography(nmax=nm, monotone=monotone)
        out.append(est._build_result(xb, N, k, m, converged=True, no_signal=r.no_signal))
    return out
