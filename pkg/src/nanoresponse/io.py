"""File formats and run configuration.

All tables are UTF-8 CSV with fixed headers and units baked into the column
names; floats are written with repr so every file round-trips losslessly
through its own reader. Writes go through a temp file plus rename, so a
crashed run never leaves a truncated table behind.
"""

from __future__ import annotations

import csv
import io as _io
import math
import os
import tempfile
from dataclasses import dataclass, field, fields

import numpy as np

from .analysis import ModelFit, ScalingFit, ThresholdPoint
from .simulate import SIM_NMAX, CampaignPlan, GroundTruthDetector
from .tomography import SweepData, SweepRecord


class ConfigError(ValueError):
    """Bad or missing run-configuration value."""


class SweepParseError(ValueError):
    """Malformed sweep file; message carries the offending line number."""


SWEEP_HEADER = [
    "wavelength_nm",
    "bias_current_uA",
    "mean_photon_number",
    "pulses",
    "clicks",
    "repeat_index",
]


def atomic_write_text(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: str, header: list[str], rows: list[list]):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# sweep files


def write_sweep_file(path: str, data: SweepData):
    rows = [
        [
            r.wavelength_nm,
            r.bias_current_uA,
            r.mean_photon_number,
            r.pulses,
            int(r.clicks) if float(r.clicks).is_integer() else r.clicks,
            r.repeat_index,
        ]
        for r in data.records
    ]
    _write_csv(path, SWEEP_HEADER, rows)


def read_sweep_file(path: str) -> SweepData:
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SweepParseError(f"{path}: empty file") from None
        if header != SWEEP_HEADER:
            raise SweepParseError(f"{path}: line 1: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                records.append(
                    SweepRecord(
                        wavelength_nm=float(row[0]),
                        bias_current_uA=float(row[1]),
                        mean_photon_number=float(row[2]),
                        pulses=int(row[3]),
                        clicks=float(row[4]),
                        repeat_index=int(row[5]),
                    )
                )
            except (ValueError, IndexError) as err:
                raise SweepParseError(f"{path}: line {lineno}: {err}") from None
    if not records:
        raise SweepParseError(f"{path}: no data rows")
    return SweepData(records=records, label=os.path.basename(path))


# ---------------------------------------------------------------------------
# response table (one row per sweep)

RESPONSE_HEADER = (
    ["wavelength_nm", "bias_current_uA", "nmax", "eta", "eta_se"]
    + [f"p_{n}" for n in range(1, SIM_NMAX + 1)]
    + [f"p_{n}_se" for n in range(1, SIM_NMAX + 1)]
    + ["p_tail", "p_tail_se", "deviance", "deviance_per_dof", "no_signal"]
)


def write_response_table(path: str, rows: list[dict]):
    out = []
    for row in rows:
        nmax = int(row["nmax"])
        p = list(row["p"]) + [""] * (SIM_NMAX - nmax)
        se = list(row.get("p_se") or [0.0] * nmax) + [""] * (SIM_NMAX - nmax)
        out.append(
            [row["wavelength_nm"], row["bias_current_uA"], nmax, row["eta"], row.get("eta_se", 0.0)]
            + p
            + se
            + [
                row["p_tail"],
                row.get("p_tail_se", 0.0),
                row.get("deviance", 0.0),
                row.get("deviance_per_dof", 0.0),
                bool(row.get("no_signal", False)),
            ]
        )
    _write_csv(path, RESPONSE_HEADER, out)


def read_response_table(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESPONSE_HEADER:
            raise SweepParseError(f"{path}: bad header {reader.fieldnames!r}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                nmax = int(rec["nmax"])
                rows.append(
                    {
                        "wavelength_nm": float(rec["wavelength_nm"]),
                        "bias_current_uA": float(rec["bias_current_uA"]),
                        "nmax": nmax,
                        "eta": float(rec["eta"]),
                        "eta_se": float(rec["eta_se"]),
                        "p": [float(rec[f"p_{n}"]) for n in range(1, nmax + 1)],
                        "p_se": [float(rec[f"p_{n}_se"]) for n in range(1, nmax + 1)],
                        "p_tail": float(rec["p_tail"]),
                        "p_tail_se": float(rec["p_tail_se"]),
                        "deviance": float(rec["deviance"]),
                        "deviance_per_dof": float(rec["deviance_per_dof"]),
                        "no_signal": rec["no_signal"] == "1",
                    }
                )
            except (TypeError, ValueError, KeyError) as err:
                raise SweepParseError(f"{path}: line {lineno}: {err}") from None
    return rows


# ---------------------------------------------------------------------------
# analysis outputs


def write_decomposition_file(path: str, N, R_fit, contribs, tail):
    """Columns N, R_fit, C_1..C_nmax, C_tail; one row per probe power."""
    contribs = np.asarray(contribs, dtype=float)
    nmax = contribs.shape[1]
    header = ["mean_photon_number", "R_fit"] + [f"C_{n}" for n in range(1, nmax + 1)] + ["C_tail"]
    rows = [
        [N[i], R_fit[i]] + list(contribs[i]) + [tail[i]]
        for i in range(len(N))
    ]
    _write_csv(path, header, rows)


def read_decomposition_file(path: str):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    return header, data


THRESHOLD_HEADER = ["energy_eV", "current_uA", "sigma_current_uA", "wavelength_nm", "photon_number"]


def write_threshold_table(path: str, entries: list[tuple]):
    """entries: (ThresholdPoint, wavelength_nm, n)."""
    _write_csv(
        path,
        THRESHOLD_HEADER,
        [[pt.energy_eV, pt.current_uA, pt.sigma_current_uA, wl, n] for pt, wl, n in entries],
    )


def read_threshold_table(path: str) -> list[tuple]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != THRESHOLD_HEADER:
            raise SweepParseError(f"{path}: bad header {reader.fieldnames!r}")
        for rec in reader:
            out.append(
                (
                    ThresholdPoint(
                        float(rec["energy_eV"]),
                        float(rec["current_uA"]),
                        float(rec["sigma_current_uA"]),
                    ),
                    float(rec["wavelength_nm"]),
                    int(rec["photon_number"]),
                )
            )
    return out


SCALING_HEADER = [
    "gamma_uA_per_eV",
    "gamma_se",
    "intercept_uA",
    "intercept_se",
    "cov_ii",
    "cov_ig",
    "cov_gg",
]


def write_scaling(path: str, fit: ScalingFit):
    c = fit.covariance
    _write_csv(
        path,
        SCALING_HEADER,
        [[fit.gamma_uA_per_eV, fit.gamma_se, fit.intercept_uA, fit.intercept_se,
          c[0, 0], c[0, 1], c[1, 1]]],
    )


def read_scaling(path: str) -> ScalingFit:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCALING_HEADER:
            raise SweepParseError(f"{path}: bad header {reader.fieldnames!r}")
        rec = next(iter(reader))
    cov = np.array(
        [
            [float(rec["cov_ii"]), float(rec["cov_ig"])],
            [float(rec["cov_ig"]), float(rec["cov_gg"])],
        ]
    )
    return ScalingFit(float(rec["gamma_uA_per_eV"]), float(rec["intercept_uA"]), cov)


COLLAPSE_HEADER = ["u_uA", "p", "log10_p", "wavelength_nm", "photon_number", "bias_current_uA"]


def write_collapse_table(path: str, points: list[tuple]):
    """points: (u, p, wavelength_nm, n, bias_current_uA)."""
    _write_csv(
        path,
        COLLAPSE_HEADER,
        [[u, p, math.log10(p), wl, n, I] for u, p, wl, n, I in points],
    )


def read_collapse_table(path: str) -> list[tuple]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COLLAPSE_HEADER:
            raise SweepParseError(f"{path}: bad header {reader.fieldnames!r}")
        for rec in reader:
            out.append(
                (
                    float(rec["u_uA"]),
                    float(rec["p"]),
                    float(rec["wavelength_nm"]),
                    int(rec["photon_number"]),
                    float(rec["bias_current_uA"]),
                )
            )
    return out


MODELFIT_HEADER = [
    "kind",
    "param_1_name",
    "param_1",
    "param_1_se",
    "param_2_name",
    "param_2",
    "param_2_se",
    "chi2_per_dof",
    "flagged",
]


def write_modelfit_table(path: str, fits: list[ModelFit]):
    rows = []
    for mf in fits:
        names = list(mf.params)
        rows.append(
            [
                mf.kind,
                names[0],
                mf.params[names[0]],
                mf.param_errors.get(names[0], math.nan),
                names[1],
                mf.params[names[1]],
                mf.param_errors.get(names[1], math.nan),
                mf.chi2_per_dof,
                mf.flagged,
            ]
        )
    _write_csv(path, MODELFIT_HEADER, rows)


def read_modelfit_table(path: str) -> list[ModelFit]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MODELFIT_HEADER:
            raise SweepParseError(f"{path}: bad header {reader.fieldnames!r}")
        for rec in reader:
            out.append(
                ModelFit(
                    kind=rec["kind"],
                    params={
                        rec["param_1_name"]: float(rec["param_1"]),
                        rec["param_2_name"]: float(rec["param_2"]),
                    },
                    param_errors={
                        rec["param_1_name"]: float(rec["param_1_se"]),
                        rec["param_2_name"]: float(rec["param_2_se"]),
                    },
                    chi2_per_dof=float(rec["chi2_per_dof"]),
                    flagged=rec["flagged"] == "1",
                )
            )
    return out


DARK_HEADER = ["intercept_uA", "sigma_uA", "Ic_uA", "ratio_to_Ic"]


def write_dark(path: str, intercept, sigma, Ic, ratio):
    _write_csv(path, DARK_HEADER, [[intercept, sigma, Ic, ratio]])


# ---------------------------------------------------------------------------
# run configuration: flat "dotted.key = value" text


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_float_list(spec: str) -> list[float]:
    """Comma list, inclusive 'start:stop:step' range, or 'logspace:a:b:num'."""
    spec = spec.strip()
    if spec.startswith("logspace:"):
        _, a, b, num = spec.split(":")
        return [float(v) for v in np.logspace(float(a), float(b), int(num))]
    if ":" in spec:
        a, b, step = (float(v) for v in spec.split(":"))
        n = int(round((b - a) / step))
        vals = [a + i * step for i in range(n + 1)]
        return [v for v in vals if v <= b + 1e-9 * abs(step)]
    return [float(v) for v in spec.split(",") if v.strip()]


def _parse_bool(spec: str) -> bool:
    s = spec.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {spec!r}")


@dataclass
class RunConfig:
    """Resolved configuration of a simulate/reconstruct/analyze run."""

    detector: GroundTruthDetector = field(default_factory=GroundTruthDetector)
    wavelengths_nm: list[float] = field(default_factory=lambda: [1000.0, 1300.0, 1500.0])
    bias_currents_uA: list[float] = field(
        default_factory=lambda: [12.0 + 0.5 * i for i in range(21)]
    )
    mean_photon_numbers: list[float] = field(
        default_factory=lambda: [float(v) for v in np.logspace(1, 7, 25)]
    )
    pulses_per_window: int = 1_000_000
    repeats: int = 10
    seed: int = 0
    window_s: float = 0.1
    nmax_candidates: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    bootstrap_resamples: int = 200
    shared_eta: bool = False
    monotone: bool = False
    threshold_level: float = 0.1
    gamma_grid: list[float] = field(
        default_factory=lambda: [-4.0 + 0.05 * i for i in range(43)]
    )
    collapse_p_min: float = 1e-4
    collapse_p_max: float = 0.3
    w_nm: float = 150.0
    delta_eV: float | None = None
    i0_uA: float | None = None
    beta: float | None = None
    sigma_overrides: dict[float, float] = field(default_factory=dict)
    out_dir: str = "out"

    def campaign_plan(self) -> CampaignPlan:
        if not (self.wavelengths_nm and self.bias_currents_uA and self.mean_photon_numbers):
            raise ConfigError("campaign grids must be non-empty")
        return CampaignPlan(
            wavelengths_nm=tuple(self.wavelengths_nm),
            bias_currents_uA=tuple(self.bias_currents_uA),
            mean_photon_numbers=tuple(self.mean_photon_numbers),
            pulses_per_window=self.pulses_per_window,
            repeats=self.repeats,
            seed=self.seed,
            window_s=self.window_s,
        )

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        kv = parse_config_text(text)
        cfg = cls()
        det = {f.name: getattr(cfg.detector, f.name) for f in fields(GroundTruthDetector)}
        try:
            for key, value in kv.items():
                section, _, name = key.partition(".")
                if section == "detector":
                    if name not in det:
                        raise ConfigError(f"unknown detector key {name!r}")
                    det[name] = float(value)
                elif section == "campaign":
                    if name == "wavelengths_nm":
                        cfg.wavelengths_nm = _parse_float_list(value)
                    elif name == "bias_currents_uA":
                        cfg.bias_currents_uA = _parse_float_list(value)
                    elif name == "mean_photon_numbers":
                        cfg.mean_photon_numbers = _parse_float_list(value)
                    elif name == "pulses_per_window":
                        cfg.pulses_per_window = int(float(value))
                    elif name == "repeats":
                        cfg.repeats = int(value)
                    elif name == "seed":
                        cfg.seed = int(value)
                    elif name == "window_s":
                        cfg.window_s = float(value)
                    else:
                        raise ConfigError(f"unknown campaign key {name!r}")
                elif section == "fit":
                    if name == "nmax_candidates":
                        cfg.nmax_candidates = [int(v) for v in _parse_float_list(value)]
                    elif name == "bootstrap_resamples":
                        cfg.bootstrap_resamples = int(value)
                    elif name == "shared_eta":
                        cfg.shared_eta = _parse_bool(value)
                    elif name == "monotone":
                        cfg.monotone = _parse_bool(value)
                    else:
                        raise ConfigError(f"unknown fit key {name!r}")
                elif section == "analysis":
                    if name == "threshold_level":
                        cfg.threshold_level = float(value)
                    elif name == "gamma_grid":
                        cfg.gamma_grid = _parse_float_list(value)
                    elif name == "collapse_p_min":
                        cfg.collapse_p_min = float(value)
                    elif name == "collapse_p_max":
                        cfg.collapse_p_max = float(value)
                    elif name == "w_nm":
                        cfg.w_nm = float(value)
                    elif name in ("delta_eV", "i0_uA", "beta"):
                        # blank means "not set"; the echoed config keeps the key
                        setattr(cfg, name, float(value) if value else None)
                    elif name == "sigma_overrides":
                        cfg.sigma_overrides = {
                            float(pair.split(":")[0]): float(pair.split(":")[1])
                            for pair in value.split(",")
                            if pair.strip()
                        }
                    else:
                        raise ConfigError(f"unknown analysis key {name!r}")
                elif section == "output":
                    if name == "dir":
                        cfg.out_dir = value
                    else:
                        raise ConfigError(f"unknown output key {name!r}")
                else:
                    raise ConfigError(f"unknown config section {section!r}")
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(f"bad value for {key!r}: {err}") from None
        cfg.detector = GroundTruthDetector(**det)
        if not 0.0 < cfg.threshold_level < 1.0:
            raise ConfigError("threshold level must lie in (0, 1)")
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def echo_text(self) -> str:
        """Every resolved value, for provenance next to the results."""
        lines = []
        for f in fields(GroundTruthDetector):
            lines.append(f"detector.{f.name} = {_fmt(getattr(self.detector, f.name))}")
        lines.append("campaign.wavelengths_nm = " + ",".join(_fmt(v) for v in self.wavelengths_nm))
        lines.append(
            "campaign.bias_currents_uA = " + ",".join(_fmt(v) for v in self.bias_currents_uA)
        )
        lines.append(
            "campaign.mean_photon_numbers = "
            + ",".join(_fmt(v) for v in self.mean_photon_numbers)
        )
        lines.append(f"campaign.pulses_per_window = {self.pulses_per_window}")
        lines.append(f"campaign.repeats = {self.repeats}")
        lines.append(f"campaign.seed = {self.seed}")
        lines.append(f"campaign.window_s = {_fmt(self.window_s)}")
        lines.append("fit.nmax_candidates = " + ",".join(str(v) for v in self.nmax_candidates))
        lines.append(f"fit.bootstrap_resamples = {self.bootstrap_resamples}")
        lines.append(f"fit.shared_eta = {_fmt(self.shared_eta)}")
        lines.append(f"fit.monotone = {_fmt(self.monotone)}")
        lines.append(f"analysis.threshold_level = {_fmt(self.threshold_level)}")
        lines.append("analysis.gamma_grid = " + ",".join(_fmt(v) for v in self.gamma_grid))
        lines.append(f"analysis.collapse_p_min = {_fmt(self.collapse_p_min)}")
        lines.append(f"analysis.collapse_p_max = {_fmt(self.collapse_p_max)}")
        lines.append(f"analysis.w_nm = {_fmt(self.w_nm)}")
        for name in ("delta_eV", "i0_uA", "beta"):
            v = getattr(self, name)
            lines.append(f"analysis.{name} = {'' if v is None else _fmt(v)}")
        if self.sigma_overrides:
            lines.append(
                "analysis.sigma_overrides = "
                + ",".join(f"{_fmt(k)}:{_fmt(v)}" for k, v in sorted(self.sigma_overrides.items()))
            )
        lines.append(f"output.dir = {self.out_dir}")
        return "\n".join(lines) + "\n"
