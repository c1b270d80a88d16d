"""Scenario runner: build a model, simulate, analyse, write CSV/SVG artefacts.

Configuration is a flat INI file (one section per concern) plus
``--set section.key=value`` overrides and named presets.  Every output
file is listed with its SHA-256 in ``manifest.csv``; reruns with the same
configuration and seed are byte-identical.

Exit status: 0 when every selected analysis meets its thresholds, 2 on a
threshold violation, 1 on an execution or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import inspect
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import _svg
from ._csv import write_key_values, write_table
from .decay import (
    fit_decay_exponent,
    random_invariant_scenarios,
    run_invariant_suite,
    truncation_floor,
    write_decay_csv,
    write_invariants_csv,
)
from .integrator import Schedule, integrate, read_trajectory_csv, write_trajectory_csv
from .model import (
    MultiplierConfig,
    ScoleConfig,
    WaveModelConfig,
    build_scole_fem,
    build_wave_modal,
    check_multiplier_condition,
    critical_initial_state,
    smooth_initial_state,
)
from .nonlinearity import BUILTINS, fit_linearization, from_name, verify_monotone, verify_sector
from .spectral import (
    GapError,
    eigen_gap,
    observability_constant,
    resolvent_growth_fit,
    spectral_abscissa,
    wavepacket_margin,
    write_resolvent_csv,
)

EXIT_OK, EXIT_ERROR, EXIT_THRESHOLD = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------


def _opt(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        text = text.strip()
        if text.lower() in ("", "auto", "none"):
            return None
        return parse(text)

    return inner


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.replace(";", ",").split(",") if v.strip()]


def _choice(*options: str) -> Callable[[str], str]:
    def inner(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"{t!r} is not one of {', '.join(options)}")
        return t

    return inner


# key -> (parser, default as text)
SCHEMA: dict[str, tuple[Callable[[str], Any], str]] = {
    "run.analyses": (_strs, "decay"),
    "run.seed": (int, "0"),
    "model.kind": (_choice("wave", "scole"), "wave"),
    "model.beta": (float, "1.0"),
    "model.modes": (int, "128"),
    "model.coeffs": (_opt(_floats), ""),
    "model.EI": (float, "1.0"),
    "model.rho": (float, "1.0"),
    "model.m": (float, "1.0"),
    "model.J": (float, "1.0"),
    "model.elements": (int, "64"),
    "phi.name": (_choice(*sorted(BUILTINS)), "identity"),
    "phi.kappa": (_opt(float), ""),
    "phi.level": (_opt(float), ""),
    "phi.p": (_opt(float), ""),
    "phi.width": (_opt(float), ""),
    "schedule.t_end": (float, "2000"),
    "schedule.dt": (float, "0.01"),
    "schedule.samples": (int, "2000"),
    "schedule.substep_tol": (float, "1e-10"),
    "schedule.method": (_choice("strang", "implicit_midpoint", "linearized_strang"), "strang"),
    "schedule.gain": (_opt(float), ""),
    "initial.profile": (_choice("critical", "smooth"), "critical"),
    "initial.norm": (float, "1.0"),
    "initial.exponent": (float, "3.0"),
    "decay.t_lo": (_opt(float), ""),
    "decay.t_hi": (_opt(float), ""),
    "decay.points": (int, "200"),
    "decay.predicted": (_opt(float), ""),
    "decay.theta_min": (_opt(float), ""),
    "decay.theta_max": (_opt(float), ""),
    "decay.band": (float, "0.1"),
    "decay.sharpness": (float, "0.1"),
    "resolvent.kappa": (float, "1.0"),
    "resolvent.s_min": (float, "1.0"),
    "resolvent.s_max": (_opt(float), ""),
    "resolvent.grid_density": (int, "20"),
    "resolvent.workers": (int, "1"),
    "resolvent.expected_slope": (_opt(float), ""),
    "resolvent.slope_tol": (float, "0.3"),
    "observability.tau": (float, "3.0"),
    "observability.beta": (_opt(float), ""),
    "observability.modes": (_opt(_ints), ""),
    "observability.ratio_min": (float, "0.5"),
    "invariants.mode": (_choice("configured", "random"), "configured"),
    "invariants.count": (int, "20"),
    "invariants.t_end": (float, "1.0"),
    "invariants.dt": (float, "2.5e-4"),
    "multiplier.zeta": (_floats, "0,2"),
    "multiplier.a": (float, "0.5"),
    "multiplier.b": (float, "0.5"),
    "multiplier.grid_points": (int, "201"),
    "verify.delta": (float, "1.0"),
    "verify.R_max": (float, "10.0"),
    "verify.samples": (int, "1000"),
    "verify.pairs": (int, "10000"),
    "verify.dim": (int, "2"),
    "verify.epsilon": (float, "0.3"),
}

ANALYSES = ("decay", "resolvent", "observability", "invariants")


@dataclass(frozen=True)
class Preset:
    description: str
    values: dict[str, str]


_WAVE_DECAY = {
    "run.analyses": "decay",
    "model.kind": "wave",
    "model.modes": "128",
    "schedule.t_end": "2000",
    "schedule.dt": "0.00625",
    "decay.t_lo": "100",
    "decay.t_hi": "2000",
}
_SCOLE_DECAY = {
    "run.analyses": "decay,resolvent",
    "model.kind": "scole",
    "model.elements": "64",
    "schedule.t_end": "2000",
    "schedule.dt": "0.004",
    "schedule.method": "linearized_strang",
    "decay.t_lo": "100",
    "decay.t_hi": "2000",
    "decay.predicted": "0.5",
    "resolvent.expected_slope": "2.0",
    "resolvent.slope_tol": "0.4",
}

PRESETS: dict[str, Preset] = {
    "wave-beta1-linear": Preset(
        "string with b_n = n^-1, linear damping: |x(t)| = O(t^-1/(2 beta)) = O(t^-1/2), "
        "two-sided (sharp) on the window",
        {**_WAVE_DECAY, "model.beta": "1", "phi.name": "identity"},
    ),
    "wave-beta1-tanh": Preset(
        "string with b_n = n^-1, phi = tanh (kappa = 1, gamma = 3): a near-linear map keeps "
        "the linear rate t^-1/2",
        {**_WAVE_DECAY, "model.beta": "1", "phi.name": "tanh"},
    ),
    "wave-beta1-cubic-control": Preset(
        "string with b_n = n^-1, psi(r) = r^3: the sector bound fails near zero and the decay "
        "is slower than t^-1/2",
        {**_WAVE_DECAY, "model.beta": "1", "phi.name": "cubic", "decay.theta_min": "-inf",
         "decay.theta_max": "0.35", "decay.sharpness": "0"},
    ),
    "wave-beta1.5-linear": Preset(
        "string with b_n = n^-1.5, linear damping: rate t^-1/(2 beta) = t^-1/3",
        {**_WAVE_DECAY, "model.beta": "1.5", "phi.name": "identity"},
    ),
    "wave-beta0.75-linear": Preset(
        "string with b_n = n^-0.75, linear damping: rate t^-1/(2 beta) = t^-2/3 "
        "(512 modes so the window stays ahead of the truncation)",
        {**_WAVE_DECAY, "model.beta": "0.75", "model.modes": "512",
         "schedule.dt": "0.0015625", "phi.name": "identity"},
    ),
    "scole-linear": Preset(
        "clamped beam with tip body, linear tip damping: claimed O(t^-1/2) decay and "
        "resolvent growth <~ 1 + s^2; also checks skewness and the multiplier inequalities",
        {**_SCOLE_DECAY, "phi.name": "identity"},
    ),
    "scole-tanh": Preset(
        "clamped beam with tip body, radial tanh tip damping: same claimed O(t^-1/2) decay "
        "as the linear case",
        {**_SCOLE_DECAY, "phi.name": "tanh"},
    ),
    "wave-observability": Preset(
        "string with b_n = n^-1: weighted observability constant c_tau for tau = 3 above the "
        "Ingham threshold 2 pi / gap = 2, stable in the truncation order",
        {"run.analyses": "observability", "model.kind": "wave", "model.beta": "1",
         "model.modes": "256", "observability.tau": "3", "observability.modes": "16,64,256"},
    ),
    "wave-resolvent-sweep": Preset(
        "string with b_n = n^-1, kappa = 1: resolvent envelope grows like 1 + |s|^(2 beta) "
        "= 1 + s^2",
        {"run.analyses": "resolvent", "model.kind": "wave", "model.beta": "1",
         "model.modes": "256", "resolvent.expected_slope": "2.0", "resolvent.slope_tol": "0.3"},
    ),
    "wave-beta2-resolvent": Preset(
        "string with b_n = n^-2, kappa = 1: resolvent envelope grows like 1 + s^4",
        {"run.analyses": "resolvent", "model.kind": "wave", "model.beta": "2",
         "model.modes": "256", "resolvent.expected_slope": "4.0", "resolvent.slope_tol": "0.5"},
    ),
    "invariant-suite": Preset(
        "energy balance, non-increasing |x| and |x'|, contraction of solution pairs and "
        "undamped conservation on 20 random scenarios over both models and the monotone maps",
        {"run.analyses": "invariants", "invariants.mode": "random", "invariants.count": "20"},
    ),
}


def list_presets() -> list[tuple[str, str]]:
    return [(name, p.description) for name, p in PRESETS.items()]


def _resolve(values: dict[str, str]) -> dict[str, Any]:
    out = {}
    for key, (parse, default) in SCHEMA.items():
        text = values.get(key, default)
        try:
            out[key] = parse(text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for '{key}': {text!r} ({exc})") from None
    return out


def _check_keys(values: dict[str, str], origin: str) -> None:
    for key in values:
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key '{key}' ({origin})")


def read_config_file(path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, val in parser.items(section):
            values[f"{section}.{key}"] = val
    _check_keys(values, str(path))
    return values


def parse_overrides(items: list[str]) -> dict[str, str]:
    values = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    _check_keys(values, "--set")
    return values


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully resolved scenario settings (typed values keyed ``section.key``)."""

    values: dict[str, Any]
    raw: dict[str, str] = field(default_factory=dict)

    @classmethod
    def build(cls, preset: str | None = None, config_path=None, overrides=None,
              seed: int | None = None) -> "ScenarioConfig":
        raw: dict[str, str] = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset '{preset}'; see list-presets")
            raw.update(PRESETS[preset].values)
        if config_path is not None:
            raw.update(read_config_file(config_path))
        if overrides:
            raw.update(parse_overrides(overrides) if isinstance(overrides, list) else overrides)
        if seed is not None:
            raw["run.seed"] = str(seed)
        _check_keys(raw, "configuration")
        cfg = cls(_resolve(raw), raw)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def model(self) -> str:
        return self["model.kind"]

    @property
    def analyses(self) -> list[str]:
        return self["run.analyses"]

    @property
    def seed(self) -> int:
        return self["run.seed"]

    def validate(self) -> None:
        if not self.analyses:
            raise ConfigError("'run.analyses' must name at least one analysis")
        for a in self.analyses:
            if a not in ANALYSES:
                raise ConfigError(f"'run.analyses': unknown analysis {a!r}")
        try:
            self.phi()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"'phi.name': {exc}") from None
        if self["schedule.dt"] > self["schedule.t_end"]:
            raise ConfigError("'schedule.dt' exceeds 'schedule.t_end'")

    # builders ---------------------------------------------------------------

    def system(self):
        if self.model == "wave":
            return build_wave_modal(self.wave_config())
        return build_scole_fem(self.scole_config())

    def wave_config(self, modes: int | None = None) -> WaveModelConfig:
        return WaveModelConfig(beta=self["model.beta"],
                               modes=self["model.modes"] if modes is None else modes,
                               coeffs=self["model.coeffs"])

    def scole_config(self) -> ScoleConfig:
        return ScoleConfig(EI=self["model.EI"], rho=self["model.rho"], m=self["model.m"],
                           J=self["model.J"], elements=self["model.elements"])

    def phi(self):
        name = self["phi.name"]
        accepted = inspect.signature(BUILTINS[name]).parameters
        params = {k: self[f"phi.{k}"] for k in ("kappa", "level", "p", "width")
                  if k in accepted and self[f"phi.{k}"] is not None}
        missing = [k for k, p in accepted.items()
                   if p.default is inspect.Parameter.empty and k not in params]
        if missing:
            raise ValueError(f"nonlinearity {name!r} needs 'phi.{missing[0]}'")
        return from_name(name, **params)

    def schedule(self) -> Schedule:
        return Schedule.with_samples(self["schedule.t_end"], self["schedule.dt"],
                                     self["schedule.samples"], self["schedule.substep_tol"])

    def initial_state(self, system):
        if self["initial.profile"] == "critical":
            return critical_initial_state(system, seed=self.seed, norm=self["initial.norm"])
        return smooth_initial_state(system, seed=self.seed, norm=self["initial.norm"],
                                    exponent=self["initial.exponent"])

    def predicted_rate(self) -> float:
        if self["decay.predicted"] is not None:
            return self["decay.predicted"]
        if self.model == "wave":
            return 1.0 / (2.0 * self["model.beta"])
        return 0.5

    def expected_slope(self) -> float:
        if self["resolvent.expected_slope"] is not None:
            return self["resolvent.expected_slope"]
        if self.model == "wave":
            return 2.0 * self["model.beta"]
        return 2.0

    def to_ini(self) -> str:
        sections: dict[str, list[tuple[str, str]]] = {}
        for key in SCHEMA:
            sec, name = key.split(".", 1)
            text = self.raw.get(key, SCHEMA[key][1])
            sections.setdefault(sec, []).append((name, text))
        lines = []
        for sec, items in sections.items():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in items)
            lines.append("")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# analyses
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    checks: dict[str, bool] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    manifest: dict[str, str] = field(default_factory=dict)

    @property
    def status(self) -> int:
        return EXIT_OK if all(self.checks.values()) else EXIT_THRESHOLD


def _stage(name: str):
    def deco(fn):
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (ConfigError, StageError):
                raise
            except Exception as exc:  # noqa: BLE001 - reported with the stage name
                raise StageError(name, exc) from exc

        return wrapper

    return deco


@_stage("model")
def _model_checks(cfg: ScenarioConfig, system, out: Path, res: RunResult) -> None:
    skew = system.skewness_residual()
    gram = np.linalg.eigvalsh(system.gram)
    items: dict[str, Any] = {"model": cfg.model, "dim": system.dim,
                             "input_dim": system.input_dim, "skewness_residual": skew}
    for i, g in enumerate(gram):
        items[f"gram_eig{i + 1}"] = float(g)
    res.checks["skewness"] = skew <= 1e-10
    res.checks["gram_positive"] = bool(np.all(gram > 0))
    if cfg.model == "scole":
        coeffs = cfg["multiplier.zeta"]
        if not coeffs:
            raise ConfigError("'multiplier.zeta' needs at least one coefficient")
        zeta = np.polynomial.Polynomial(coeffs)
        try:
            mult = MultiplierConfig(zeta=zeta, a=cfg["multiplier.a"], b=cfg["multiplier.b"],
                                    grid_points=cfg["multiplier.grid_points"])
        except ValueError as exc:
            raise ConfigError(f"'multiplier.zeta': {exc}") from None
        rep = check_multiplier_condition(cfg.scole_config(), mult)
        items.update({"multiplier_inertia_max": rep.inertia_max,
                      "multiplier_stiffness_max": rep.stiffness_max,
                      "multiplier_passed": rep.passed})
        res.checks["multiplier"] = rep.passed
    res.summary.update(items)
    write_key_values(out / "model_checks.csv", items)


@_stage("decay")
def _decay(cfg: ScenarioConfig, system, out: Path, res: RunResult, svg: bool) -> None:
    phi = cfg.phi()
    x0 = cfg.initial_state(system)
    traj = integrate(system, phi, x0, cfg.schedule(), method=cfg["schedule.method"],
                     gain=cfg["schedule.gain"])
    write_trajectory_csv(traj, out / "trajectory.csv")
    predicted = cfg.predicted_rate()
    window = None
    if cfg["decay.t_lo"] is not None or cfg["decay.t_hi"] is not None:
        window = (cfg["decay.t_lo"] if cfg["decay.t_lo"] is not None else 0.05 * traj.t_end,
                  cfg["decay.t_hi"] if cfg["decay.t_hi"] is not None else traj.t_end)
    # reported only; the window is not clipped by it (see README)
    floor = truncation_floor(system, x0)
    rep = fit_decay_exponent(traj, window, predicted, cfg["decay.points"], floor=floor)
    _decay_checks(cfg, rep, res)
    extra = {"phi": phi.label, "method": traj.method, "dt": traj.dt,
             "initial_graph_seminorm": traj.initial_graph_seminorm,
             "truncation_floor": floor,
             "passed": all(v for k, v in res.checks.items() if k.startswith("decay"))}
    write_decay_csv(rep, out / "decay_report.csv", extra)
    if svg:
        _decay_svg(traj, rep, out / "decay.svg")


def _decay_checks(cfg: ScenarioConfig, rep, res: RunResult) -> None:
    lo = cfg["decay.theta_min"]
    hi = cfg["decay.theta_max"]
    band = cfg["decay.band"]
    lo = rep.predicted - band if lo is None else lo
    hi = rep.predicted + band if hi is None else hi
    res.checks["decay_theta"] = bool(lo <= rep.theta_hat <= hi)
    if cfg["decay.sharpness"] > 0:
        res.checks["decay_sharpness"] = bool(
            rep.tail_scaled >= cfg["decay.sharpness"] * rep.sup_scaled)
    res.summary.update({"theta_hat": rep.theta_hat, "predicted": rep.predicted,
                        "theta_band": (lo, hi)})


def _decay_svg(traj, rep, path) -> None:
    t, n = traj.times[1:], traj.norms[1:]
    lo, hi = rep.window
    tg = np.geomspace(lo, hi, 50)
    anchor = float(np.exp(np.interp(math.log(lo), np.log(t), np.log(n))))
    guide = anchor * (tg / lo) ** (-rep.predicted)
    _svg.loglog(path, [
        _svg.Series(t, n, "|x(t)|"),
        _svg.Series(tg, guide, f"slope -{rep.predicted:g}", dashed=True),
    ], f"decay: fitted theta = {rep.theta_hat:.4f}", "t", "|x(t)|")


@_stage("resolvent")
def _resolvent(cfg: ScenarioConfig, system, out: Path, res: RunResult, svg: bool) -> None:
    kappa = cfg["resolvent.kappa"]
    s_top = float(system.frequencies[-1])
    s_max = cfg["resolvent.s_max"] if cfg["resolvent.s_max"] is not None else 0.5 * s_top
    curve = resolvent_growth_fit(system, kappa, cfg["resolvent.s_min"], s_max,
                                 cfg["resolvent.grid_density"],
                                 workers=cfg["resolvent.workers"])
    write_resolvent_csv(curve, out / "resolvent.csv")
    expected = cfg.expected_slope()
    tol = cfg["resolvent.slope_tol"]
    ok = abs(curve.envelope_slope - expected) <= tol
    try:
        gap = eigen_gap(system)
    except GapError:
        gap = 0.0
    items = {
        "kappa": kappa,
        "envelope_slope": curve.envelope_slope,
        "stderr": curve.stderr,
        "expected_slope": expected,
        "slope_tol": tol,
        "fit_s_min": curve.fit_range[0],
        "fit_s_max": curve.fit_range[1],
        "peaks_used": int(np.count_nonzero((curve.peak_s >= curve.fit_range[0])
                                           & (curve.peak_s <= curve.fit_range[1]))),
        "dense_fallbacks": curve.fallbacks,
        "spectral_abscissa": spectral_abscissa(system, kappa),
        "eigen_gap": gap,
        "passed": ok,
    }
    if cfg.model == "wave":
        items["wavepacket_margin"] = wavepacket_margin(system, cfg["model.beta"])
    write_key_values(out / "resolvent_fit.csv", items)
    res.checks["resolvent_slope"] = ok
    res.summary["envelope_slope"] = curve.envelope_slope
    if svg:
        _svg.loglog(out / "resolvent.svg", [
            _svg.Series(curve.s_values, curve.norms, "|(is - A_kappa)^-1|"),
            _svg.Series(curve.peak_s, curve.peak_norms, "envelope maxima", dashed=True),
        ], f"resolvent: envelope slope = {curve.envelope_slope:.3f}", "s", "norm")


@_stage("observability")
def _observability(cfg: ScenarioConfig, system, out: Path, res: RunResult) -> None:
    tau = cfg["observability.tau"]
    beta = cfg["observability.beta"] if cfg["observability.beta"] is not None \
        else cfg["model.beta"]
    modes = cfg["observability.modes"]
    items: dict[str, Any] = {"tau": tau, "beta": beta}
    if modes and cfg.model == "wave":
        reports = [observability_constant(build_wave_modal(cfg.wave_config(n)), tau, beta)
                   for n in modes]
    else:
        reports = [observability_constant(system, tau, beta)]
    for r in reports:
        p = f"N{r.N_used}"
        items.update({f"{p}.c_tau": r.c_tau, f"{p}.gap": r.gap,
                      f"{p}.ingham_threshold": 2 * math.pi / r.gap,
                      f"{p}.ingham_ok": r.ingham_ok})
    first, last = reports[0].c_tau, reports[-1].c_tau
    ratio_min = cfg["observability.ratio_min"]
    ok = first > 0 and last >= ratio_min * first
    items.update({"c_tau_first": first, "c_tau_last": last,
                  "ratio": last / first if first > 0 else math.nan,
                  "ratio_min": ratio_min, "passed": ok})
    write_key_values(out / "observability.csv", items)
    res.checks["observability"] = ok
    res.summary["c_tau"] = last


@_stage("invariants")
def _invariants(cfg: ScenarioConfig, system, out: Path, res: RunResult) -> None:
    if cfg["invariants.mode"] == "random":
        scenarios = random_invariant_scenarios(cfg["invariants.count"], cfg.seed,
                                               cfg["invariants.t_end"], cfg["invariants.dt"])
        rows = [(sc.name, run_invariant_suite(sc.system, sc.phi, sc.x0, sc.schedule,
                                              sc.partner)) for sc in scenarios]
    else:
        phi = cfg.phi()
        sched = Schedule.with_samples(cfg["invariants.t_end"], cfg["invariants.dt"], 500,
                                      cfg["schedule.substep_tol"])
        rng = np.random.default_rng(cfg.seed)
        rows = []
        for i in range(max(1, cfg["invariants.count"])):
            s1, s2 = (int(v) for v in rng.integers(2**31, size=2))
            x0 = critical_initial_state(system, seed=s1, norm=cfg["initial.norm"])
            xb = smooth_initial_state(system, seed=s2, norm=cfg["initial.norm"])
            rows.append((f"{i:02d}:{phi.label}",
                         run_invariant_suite(system, phi, x0, sched, xb)))
    write_invariants_csv(rows, out / "invariants.csv")
    res.checks["invariants"] = all(r.passed for _, r in rows)
    res.summary["invariant_scenarios"] = len(rows)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path) -> dict[str, str]:
    files = sorted(p.name for p in out.iterdir()
                   if p.is_file() and p.name != "manifest.csv")
    manifest = {name: _sha256(out / name) for name in files}
    write_table(out / "manifest.csv", ["file", "sha256", "bytes"],
                [(n, h, (out / n).stat().st_size) for n, h in manifest.items()])
    return manifest


def run_scenario(cfg: ScenarioConfig, out_dir, svg: bool = False) -> RunResult:
    """Build, simulate and analyse one scenario, writing artefacts to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = RunResult(out)
    (out / "config.ini").write_text(cfg.to_ini())
    needs_system = any(a != "invariants" for a in cfg.analyses) \
        or cfg["invariants.mode"] == "configured"
    system = None
    if needs_system:
        try:
            system = cfg.system()
        except Exception as exc:  # noqa: BLE001
            raise StageError("model", exc) from exc
        _model_checks(cfg, system, out, res)
    for analysis in ANALYSES:
        if analysis not in cfg.analyses:
            continue
        if analysis == "decay":
            _decay(cfg, system, out, res, svg)
        elif analysis == "resolvent":
            _resolvent(cfg, system, out, res, svg)
        elif analysis == "observability":
            _observability(cfg, system, out, res)
        else:
            _invariants(cfg, system, out, res)
    write_key_values(out / "checks.csv", {k: v for k, v in sorted(res.checks.items())})
    res.manifest = write_manifest(out)
    return res


# ---------------------------------------------------------------------------
# other commands
# ---------------------------------------------------------------------------


def verify_phi(cfg: ScenarioConfig, out_dir) -> RunResult:
    """Sector, monotonicity and linearization checks of the configured map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = RunResult(out)
    phi = cfg.phi()
    sector = verify_sector(phi, cfg["verify.delta"], cfg["verify.R_max"],
                           cfg["verify.samples"], cfg["verify.dim"])
    mono = verify_monotone(phi, cfg["verify.pairs"], cfg["verify.dim"], seed=cfg.seed)
    items: dict[str, Any] = {
        "phi": phi.label,
        "delta": sector.delta,
        "c_small": sector.c_small,
        "c_large": sector.c_large,
        "lipschitz_delta": sector.lipschitz_delta,
        "sector_passed": sector.passed,
        "small_slope": sector.small_slope,
        "vanishing_at_zero": sector.vanishing_at_zero,
        "monotone_minimum": mono.minimum,
        "monotone_pairs": mono.pairs,
        "monotone_violated": mono.violated,
    }
    if phi.is_radial:
        lin = fit_linearization(phi, cfg["verify.epsilon"])
        items.update({"kappa": lin.kappa, "gamma": lin.gamma, "C": lin.C,
                      "epsilon": lin.epsilon, "fit_residual": lin.residual,
                      "clean_power_law": lin.clean})
    write_key_values(out / "phi_report.csv", items)
    res.checks["sector"] = sector.passed
    res.checks["sector_near_zero"] = not sector.vanishing_at_zero
    res.checks["monotone"] = not mono.violated
    res.summary.update(items)
    res.manifest = write_manifest(out)
    return res


def fit_decay_file(cfg: ScenarioConfig, trajectory_path, out_dir) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = RunResult(out)
    traj = read_trajectory_csv(trajectory_path)
    window = None
    if cfg["decay.t_lo"] is not None or cfg["decay.t_hi"] is not None:
        window = (cfg["decay.t_lo"] if cfg["decay.t_lo"] is not None else 0.05 * traj.t_end,
                  cfg["decay.t_hi"] if cfg["decay.t_hi"] is not None else traj.t_end)
    predicted = cfg.predicted_rate()
    rep = fit_decay_exponent(traj, window, predicted, cfg["decay.points"])
    _decay_checks(cfg, rep, res)
    write_decay_csv(rep, out / "decay_report.csv", {"source": Path(trajectory_path).name})
    res.manifest = write_manifest(out)
    return res


def _sweep_one(args):
    raw, out_dir, svg = args
    cfg = ScenarioConfig.build(overrides=raw)
    try:
        r = run_scenario(cfg, out_dir, svg)
        return r.status, dict(r.summary), ""
    except (ConfigError, StageError) as exc:
        return EXIT_ERROR, {}, str(exc)


def sweep(base: ScenarioConfig, vary: list[str], out_dir, workers: int = 1,
          svg: bool = False) -> int:
    """Run the cartesian product of ``key=v1,v2,...`` variations concurrently.

    Each variant writes into its own subdirectory; ``sweep.csv`` lists the
    variants in input order, so the output does not depend on ``workers``.
    """
    axes = []
    for item in vary:
        if "=" not in item:
            raise ConfigError(f"--vary {item!r} is not of the form section.key=v1,v2")
        key, vals = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key '{key}' (--vary)")
        axes.append((key, [v.strip() for v in vals.split(",") if v.strip()]))
    combos: list[dict[str, str]] = [{}]
    for key, vals in axes:
        combos = [{**c, key: v} for c in combos for v in vals]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs, names = [], []
    for i, combo in enumerate(combos):
        raw = {**base.raw, **combo}
        ScenarioConfig.build(overrides=raw)  # validate before launching
        name = f"{i:03d}" + "".join(f"_{k.split('.')[-1]}={v}" for k, v in combo.items())
        names.append(name)
        jobs.append((raw, str(out / name), svg))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    rows = []
    for name, (status, summary, err) in zip(names, results):
        rows.append([name, status, summary.get("theta_hat", math.nan),
                     summary.get("envelope_slope", math.nan), err])
    write_table(out / "sweep.csv", ["variant", "status", "theta_hat", "envelope_slope",
                                    "error"], rows)
    write_manifest(out)
    statuses = [r[1] for r in results]
    if EXIT_ERROR in statuses:
        return EXIT_ERROR
    return EXIT_THRESHOLD if EXIT_THRESHOLD in statuses else EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="INI configuration file")
    p.add_argument("--preset", metavar="NAME", help="start from a named preset")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one setting, e.g. --set model.beta=1.5")
    p.add_argument("--out", metavar="DIR", default="damplab-out", help="output directory")
    p.add_argument("--svg", action="store_true", help="also write SVG plots")
    p.add_argument("--seed", type=int, metavar="N", help="seed for random initial data")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="damplab", description="Scenario runner for nonlinearly damped skew systems.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run the configured analyses")
    sub.add_parser("resolvent", parents=[common], help="resolvent sweep and growth fit only")
    sub.add_parser("observability", parents=[common], help="observability constant only")
    sub.add_parser("verify-phi", parents=[common], help="check the damping map hypotheses")
    fd = sub.add_parser("fit-decay", parents=[common], help="fit a decay exponent to a CSV")
    fd.add_argument("--trajectory", required=True, metavar="CSV")
    sw = sub.add_parser("sweep", parents=[common], help="run parameter variations")
    sw.add_argument("--vary", action="append", default=[], metavar="KEY=V1,V2",
                    help="values for one key; repeat for a cartesian product")
    sw.add_argument("--workers", type=int, default=1)
    sub.add_parser("list-presets", help="list the named presets")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-presets":
        for name, desc in list_presets():
            print(f"{name}: {desc}")
        return EXIT_OK
    try:
        overrides = list(args.set)
        if args.command in ("resolvent", "observability"):
            overrides.append(f"run.analyses={args.command}")
        cfg = ScenarioConfig.build(args.preset, args.config, overrides, args.seed)
        if args.command in ("simulate", "resolvent", "observability"):
            res = run_scenario(cfg, args.out, args.svg)
        elif args.command == "verify-phi":
            res = verify_phi(cfg, args.out)
        elif args.command == "fit-decay":
            res = fit_decay_file(cfg, args.trajectory, args.out)
        else:
            code = sweep(cfg, args.vary, args.out, args.workers, args.svg)
            print(f"sweep finished with status {code}; see {os.path.join(args.out, 'sweep.csv')}")
            return code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for key, ok in sorted(res.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {key}")
    for key, val in res.summary.items():
        if isinstance(val, float):
            print(f"  {key} = {val:.6g}")
    return res.status


if __name__ == "__main__":
    sys.exit(main())
