"""Command-line pipeline: simulate -> reconstruct -> analyze.

Exit codes: 0 success, 2 configuration error, 3 fit failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import glob
import math
import os
import sys

import numpy as np

from . import analysis as ana
from . import io as nio
from .photonics import DetectorResponse, click_probability, contribution_decomposition
from .simulate import simulate_campaign
from .tomography import (
    FitFailureError,
    FitOptions,
    SweepData,
    bootstrap_errors,
    fit_by_order,
    fit_shared_eta,
    select_model_order,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FIT = 3
EXIT_IO = 4


def _sweep_filename(wl: float, Ib: float) -> str:
    return f"sweep_w{wl:g}nm_I{Ib:.3f}uA.csv"


def _load_config(args) -> nio.RunConfig:
    cfg = nio.RunConfig.from_file(args.config) if args.config else nio.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _echo_config(cfg: nio.RunConfig):
    nio.atomic_write_text(os.path.join(cfg.out_dir, "config_echo.txt"), cfg.echo_text())


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: nio.RunConfig) -> list[str]:
    plan = cfg.campaign_plan()
    sweeps = simulate_campaign(cfg.detector, plan)
    paths = []
    for sweep in sweeps:
        path = os.path.join(
            cfg.out_dir, _sweep_filename(sweep.wavelength_nm, sweep.bias_current_uA)
        )
        nio.write_sweep_file(path, sweep)
        paths.append(path)
    _echo_config(cfg)
    return paths


# ---------------------------------------------------------------------------
# reconstruct


def _reconstruct_one(task):
    """Fit one sweep: order selection, best fit, bootstrap errors."""
    data, candidates, opts_dict, resamples, boot_seed = task
    opts = FitOptions(**opts_dict)
    fits = fit_by_order(data, candidates, opts)
    nmax = select_model_order(data, candidates, opts, fits=fits)
    result = fits[nmax]
    if result.no_signal or not result.converged:
        se = None
    else:
        se = bootstrap_errors(data, result, resamples=resamples, seed=boot_seed)
    return data.wavelength_nm, data.bias_current_uA, result, se


def _result_row(wl, Ib, result, se) -> dict:
    return {
        "wavelength_nm": wl,
        "bias_current_uA": Ib,
        "nmax": result.nmax,
        "eta": result.response.eta,
        "eta_se": se["eta"] if se else 0.0,
        "p": list(result.response.p),
        "p_se": list(se["p"]) if se else [0.0] * result.nmax,
        "p_tail": result.response.p_tail,
        "p_tail_se": se["p_tail"] if se else 0.0,
        "deviance": result.deviance,
        "deviance_per_dof": result.deviance_per_dof,
        "no_signal": result.no_signal,
    }


def cmd_reconstruct(sweep_paths: list[str], cfg: nio.RunConfig, jobs: int = 1) -> str:
    if not sweep_paths:
        pattern = os.path.join(cfg.out_dir, "sweep_*.csv")
        sweep_paths = sorted(glob.glob(pattern))
    if not sweep_paths:
        raise nio.ConfigError("no sweep files given and none found in the output directory")

    datasets = [nio.read_sweep_file(p) for p in sweep_paths]
    datasets.sort(key=lambda d: (d.wavelength_nm, d.bias_current_uA))
    opts_dict = {
        "monotone": cfg.monotone,
        "bootstrap_resamples": cfg.bootstrap_resamples,
        "seed": cfg.seed,
    }
    tasks = [
        (data, tuple(cfg.nmax_candidates), opts_dict, cfg.bootstrap_resamples,
         cfg.seed * 1000003 + idx)
        for idx, data in enumerate(datasets)
    ]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            fitted = list(pool.map(_reconstruct_one, tasks))
    else:
        fitted = [_reconstruct_one(t) for t in tasks]

    if cfg.shared_eta:
        by_wl: dict[float, list[int]] = {}
        for i, (wl, _, res, _) in enumerate(fitted):
            if not res.no_signal:
                by_wl.setdefault(wl, []).append(i)
        for wl, idxs in by_wl.items():
            if len(idxs) < 2:
                continue
            joint = fit_shared_eta(
                [datasets[i] for i in idxs], [fitted[i][2] for i in idxs]
            )
            for i, res in zip(idxs, joint):
                fitted[i] = (fitted[i][0], fitted[i][1], res, fitted[i][3])

    rows = []
    for (wl, Ib, result, se), data in zip(fitted, datasets):
        rows.append(_result_row(wl, Ib, result, se))
        # per-sweep decomposition over the probe powers actually measured
        N = np.unique(data.arrays()[0])
        N = N[N > 0]
        R_fit = click_probability(result.response, N)
        contribs = []
        tails = []
        for Ni in N:
            parts = contribution_decomposition(result.response, Ni)
            contribs.append([c for _, c in parts[:-1]])
            tails.append(parts[-1][1])
        nio.write_decomposition_file(
            os.path.join(cfg.out_dir, f"decomp_w{wl:g}nm_I{Ib:.3f}uA.csv"),
            N, R_fit, contribs, tails,
        )

    path = os.path.join(cfg.out_dir, "responses.csv")
    nio.write_response_table(path, rows)
    return path


# ---------------------------------------------------------------------------
# analyze


def _apply_sigma_overrides(entries, overrides):
    if not overrides:
        return entries
    out = []
    for pt, wl, n in entries:
        sigma = pt.sigma_current_uA
        for E0, s in overrides.items():
            if abs(pt.energy_eV - E0) < 1e-3:
                sigma = s
        out.append((ana.ThresholdPoint(pt.energy_eV, pt.current_uA, sigma), wl, n))
    return out


def cmd_analyze(responses_path: str | None, cfg: nio.RunConfig) -> dict:
    if responses_path is None:
        responses_path = os.path.join(cfg.out_dir, "responses.csv")
    rows = nio.read_response_table(responses_path)
    curves = ana.build_response_curves(rows)

    entries = []
    exclusions = []
    for curve in curves:
        try:
            pt = ana.threshold_current(curve, cfg.threshold_level)
            entries.append((pt, curve.wavelength_nm, curve.n))
        except ana.NoThresholdError as err:
            exclusions.append(str(err))
    nio.atomic_write_text(
        os.path.join(cfg.out_dir, "excluded_thresholds.txt"),
        "\n".join(exclusions) + ("\n" if exclusions else ""),
    )

    wavelengths = {wl for _, wl, _ in entries}
    orders = {n for _, _, n in entries}
    if len(wavelengths) < 2 and len(orders) < 2:
        raise nio.ConfigError(
            "analysis needs thresholds from at least two wavelengths or two photon orders"
        )

    entries = _apply_sigma_overrides(entries, cfg.sigma_overrides)
    nio.write_threshold_table(os.path.join(cfg.out_dir, "thresholds.csv"), entries)

    points = [pt for pt, _, _ in entries]
    scaling = ana.fit_scaling(points)
    nio.write_scaling(os.path.join(cfg.out_dir, "scaling.csv"), scaling)

    # collapse table at the fitted slope; score restricted to the config window
    cpoints, _ = ana.collapse(curves, scaling.gamma_uA_per_eV)
    nio.write_collapse_table(os.path.join(cfg.out_dir, "collapse.csv"), cpoints)
    _, score = ana.collapse(
        curves, scaling.gamma_uA_per_eV, p_min=cfg.collapse_p_min, p_max=cfg.collapse_p_max
    )
    grid, scores, gamma_best = ana.collapse_scan(
        curves, cfg.gamma_grid, p_min=cfg.collapse_p_min, p_max=cfg.collapse_p_max
    )
    nio._write_csv(
        os.path.join(cfg.out_dir, "collapse_scan.csv"),
        ["gamma_uA_per_eV", "score_dex"],
        [[g, s] for g, s in zip(grid, scores)],
    )

    if cfg.delta_eV is None or cfg.i0_uA is None or cfg.beta is None:
        raise nio.ConfigError(
            "fluctuation-model constants analysis.delta_eV, analysis.i0_uA and "
            "analysis.beta must be set explicitly"
        )
    fits = [
        ana.fit_model(
            points, kind,
            w_nm=cfg.w_nm, Ic_uA=cfg.detector.Ic_uA,
            delta_eV=cfg.delta_eV, i0_uA=cfg.i0_uA, beta=cfg.beta,
        )
        for kind in ana.MODEL_KINDS
    ]
    nio.write_modelfit_table(os.path.join(cfg.out_dir, "model_fits.csv"), fits)

    dark = ana.extrapolate_dark(scaling, Ic_uA=cfg.detector.Ic_uA)
    nio.write_dark(
        os.path.join(cfg.out_dir, "dark_extrapolation.csv"),
        dark.intercept_uA, dark.sigma_uA, dark.Ic_uA, dark.ratio_to_Ic,
    )
    _echo_config(cfg)
    return {
        "scaling": scaling,
        "collapse_score": score,
        "gamma_argmin": gamma_best,
        "model_fits": fits,
        "dark": dark,
        "thresholds": entries,
        "exclusions": exclusions,
    }


def cmd_pipeline(cfg: nio.RunConfig, jobs: int = 1) -> dict:
    paths = cmd_simulate(cfg)
    cmd_reconstruct(paths, cfg, jobs=jobs)
    return cmd_analyze(None, cfg)


# ---------------------------------------------------------------------------
# selftest: quick independent-oracle checks


def run_selftest(out=None) -> bool:
    from scipy.special import gammaln, xlogy

    if out is None:
        out = sys.stdout

    ok = True

    def report(name, passed, detail=""):
        nonlocal ok
        ok = ok and passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name}{': ' + detail if detail else ''}",
              file=out)

    # forward model versus a brute-force 200-term sum
    rng = np.random.Generator(np.random.Philox(key=np.array([7, 0], dtype=np.uint64)))
    worst = 0.0
    for _ in range(100):
        nmax = int(rng.integers(1, 5))
        r = DetectorResponse(
            eta=float(10 ** rng.uniform(-5, 0)),
            p=tuple(rng.uniform(0, 1, nmax)),
            p_tail=float(rng.uniform(0, 1)),
        )
        N = float(10 ** rng.uniform(-2, 2)) / max(r.eta, 1e-6)
        mu = r.eta * min(N, 1e4)
        N = mu / r.eta
        n = np.arange(201)
        pmf = np.exp(xlogy(n, mu) - mu - gammaln(n + 1)) if mu > 0 else np.eye(1, 201)[0]
        pn = np.zeros(201)
        pn[1 : nmax + 1] = r.p
        pn[nmax + 1 :] = r.p_tail
        brute = float((pn * pmf).sum() + r.p_tail * max(0.0, 1.0 - pmf.sum()))
        worst = max(worst, abs(brute - click_probability(r, N)))
    report("forward model vs brute-force sum", worst <= 1e-12, f"max |diff| = {worst:.2e}")

    # decomposition identity
    r = DetectorResponse(eta=0.5, p=(0.1, 0.5), p_tail=1.0)
    parts = contribution_decomposition(r, 2.0)
    total = sum(c for _, c in parts)
    diff = abs(total - click_probability(r, 2.0))
    report("decomposition sums to click probability", diff <= 1e-12, f"|diff| = {diff:.2e}")

    # threshold interpolation: exact log-linear midpoint
    curve = ana.ResponseCurve(1500.0, 1, [16.0, 18.0], [0.01, 1.0], [0.0, 0.0])
    pt = ana.threshold_current(curve, 0.1)
    report("log-linear threshold midpoint", abs(pt.current_uA - 17.0) < 1e-12,
           f"I = {pt.current_uA}")

    # exact-line scaling recovery
    pts = [ana.ThresholdPoint(E, 19.4 - 2.9 * E, 0.1) for E in (0.827, 1.653, 2.480)]
    fit = ana.fit_scaling(pts)
    err = max(abs(fit.gamma_uA_per_eV + 2.9), abs(fit.intercept_uA - 19.4))
    report("exact-line scaling recovery", err < 1e-9, f"max err = {err:.2e}")

    return ok


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nanoresponse",
        description="Simulate, reconstruct and analyze nanodetector power sweeps.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="run configuration file (dotted key = value)")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--seed", type=int, help="campaign seed (overrides campaign.seed)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel fit workers")

    add_common(sub.add_parser("simulate", help="generate synthetic sweep files"))
    sp = sub.add_parser("reconstruct", help="fit detector responses from sweep files")
    add_common(sp)
    sp.add_argument("sweeps", nargs="*", help="sweep CSV files (default: out dir)")
    sp = sub.add_parser("analyze", help="thresholds, scaling law, collapse, model fits")
    add_common(sp)
    sp.add_argument("responses", nargs="?", help="response table (default: out/responses.csv)")
    add_common(sub.add_parser("pipeline", help="simulate, reconstruct and analyze"))
    sub.add_parser("selftest", help="run quick independent-oracle checks")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return EXIT_OK if run_selftest() else EXIT_FIT
        cfg = _load_config(args)
        if args.command == "simulate":
            paths = cmd_simulate(cfg)
            print(f"wrote {len(paths)} sweep files to {cfg.out_dir}")
        elif args.command == "reconstruct":
            path = cmd_reconstruct(list(args.sweeps), cfg, jobs=args.jobs)
            print(f"wrote {path}")
        elif args.command == "analyze":
            summary = cmd_analyze(args.responses, cfg)
            s = summary["scaling"]
            print(
                f"gamma = {s.gamma_uA_per_eV:.4f} +/- {s.gamma_se:.4f} uA/eV, "
                f"intercept = {s.intercept_uA:.3f} uA, "
                f"collapse score = {summary['collapse_score']:.4f} dex"
            )
        elif args.command == "pipeline":
            summary = cmd_pipeline(cfg, jobs=args.jobs)
            s = summary["scaling"]
            print(
                f"gamma = {s.gamma_uA_per_eV:.4f} +/- {s.gamma_se:.4f} uA/eV, "
                f"intercept = {s.intercept_uA:.3f} uA, "
                f"collapse score = {summary['collapse_score']:.4f} dex"
            )
        return EXIT_OK
    except nio.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FitFailureError as err:
        print(f"fit failure: {err}", file=sys.stderr)
        return EXIT_FIT
    except (nio.SweepParseError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
