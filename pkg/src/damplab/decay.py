"""Decay exponents and invariant checks on simulated trajectories."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import linregress

from ._csv import write_key_values, write_table
from .integrator import Schedule, Trajectory, energy_balance_residual, integrate
from .model import (
    DampedSystem,
    ScoleConfig,
    WaveModelConfig,
    build_scole_fem,
    build_wave_modal,
    critical_initial_state,
    graph_seminorm,
    smooth_initial_state,
)
from .nonlinearity import MONOTONE_BUILTINS, Nonlinearity, custom, from_name

__all__ = [
    "DecayReport",
    "fit_decay_exponent",
    "sharpness_check",
    "contraction_check",
    "derivative_monotonicity_check",
    "UniformDecayProfile",
    "uniform_decay_profile",
    "truncation_floor",
    "InvariantReport",
    "run_invariant_suite",
    "write_decay_csv",
    "write_invariants_csv",
    "InvariantScenario",
    "random_invariant_scenarios",
]

# relative norm level treated as the floating-point floor
UNDERFLOW = 1e-13


@dataclass(frozen=True)
class DecayReport:
    """Fitted ``|x(t)| ~ C t^-theta`` over ``window``.

    ``truncated`` is set when the norm reached the floating floor and the
    window was cut short.  ``entry_time`` is the first sample time after
    which ``|B^T x|`` stays inside the unit ball (``nan`` if it never
    does).  ``trusted_until`` is the last time the norm exceeds ``1e3``
    times the truncation floor; it is a diagnostic and does not limit the
    fit.
    """

    theta_hat: float
    stderr: float
    window: tuple[float, float]
    predicted: float = math.nan
    sup_scaled: float = math.nan
    tail_scaled: float = math.nan
    samples: int = 0
    truncated: bool = False
    entry_time: float = math.nan
    trusted_until: float = math.nan


def _log_resample(times, norms, window, points):
    lo, hi = window
    grid = np.geomspace(lo, hi, points)
    pos = times > 0
    logn = np.interp(np.log(grid), np.log(times[pos]), np.log(norms[pos]))
    return grid, logn


def _window(traj: Trajectory, window):
    t = traj.times
    if window is None:
        window = (0.05 * t[-1], t[-1])
    lo, hi = float(window[0]), float(window[1])
    if not 0 < lo < hi:
        raise ValueError(f"invalid window {window}")
    if lo < t[0] or hi > t[-1] * (1 + 1e-12):
        raise ValueError(f"window {window} outside sampled range [{t[0]}, {t[-1]}]")
    return lo, min(hi, float(t[-1]))


def fit_decay_exponent(
    trajectory: Trajectory,
    window: tuple[float, float] | None = None,
    predicted: float = math.nan,
    points: int = 200,
    floor: float | None = None,
) -> DecayReport:
    """Least-squares slope of ``log |x|`` against ``log t``.

    The samples are interpolated onto ``points`` log-spaced times in the
    window, so every decade weighs the same.  When ``predicted`` is given
    the sharpness diagnostics are filled in too.

    Parameters
    ----------
    window : (t_lo, t_hi), optional
        Defaults to ``(0.05 t_end, t_end)``.
    floor : float, optional
        Truncation floor (see :func:`truncation_floor`) for the
        ``trusted_until`` diagnostic.
    """
    if points < 30:
        raise ValueError("the fit needs at least 30 log-spaced points")
    lo, hi = _window(trajectory, window)
    t, n = trajectory.times, trajectory.norms
    truncated = False
    limit = UNDERFLOW * n[0]
    inside = (t >= lo) & (t <= hi)
    if np.any(n[inside] <= limit):
        first = t[inside][np.argmax(n[inside] <= limit)]
        keep = t[(t < first)]
        if keep.size == 0 or keep[-1] <= lo:
            raise ValueError("norm reaches the floating floor before the window starts")
        hi = float(keep[-1])
        truncated = True
    grid, logn = _log_resample(t, n, (lo, hi), points)
    fit = linregress(np.log(grid), logn)
    sup_s = tail_s = math.nan
    if np.isfinite(predicted):
        sup_s, tail_s = sharpness_check(trajectory, predicted, (lo, hi), points)
    entry = math.nan
    w = trajectory.w_samples
    if w.size:
        outside = np.linalg.norm(w, axis=1) > 1.0
        if not outside.any():
            entry = float(t[0])
        elif not outside[-1]:
            entry = float(t[len(outside) - np.argmax(outside[::-1])])
    trusted = math.nan
    if floor is not None:
        ok = n >= 1e3 * floor
        trusted = float(t[ok][-1]) if ok.any() else 0.0
    return DecayReport(
        theta_hat=float(-fit.slope),
        stderr=float(fit.stderr),
        window=(lo, hi),
        predicted=float(predicted),
        sup_scaled=sup_s,
        tail_scaled=tail_s,
        samples=points,
        truncated=truncated,
        entry_time=entry,
        trusted_until=trusted,
    )


def sharpness_check(
    trajectory: Trajectory,
    predicted: float,
    window: tuple[float, float] | None = None,
    points: int = 200,
) -> tuple[float, float]:
    """``(sup, tail)`` of ``t^predicted |x(t)|`` on the window.

    ``tail`` is the mean over the last decade of the window on the same
    log-spaced grid as the fit.
    """
    lo, hi = _window(trajectory, window)
    grid, logn = _log_resample(trajectory.times, trajectory.norms, (lo, hi), points)
    scaled = np.exp(logn + predicted * np.log(grid))
    last = grid >= max(lo, hi / 10)
    return float(scaled.max()), float(scaled[last].mean())


def _zero_map(u):
    return np.zeros_like(u)


def contraction_check(
    system: DampedSystem,
    phi: Nonlinearity,
    x0_a,
    x0_b,
    schedule: Schedule,
    method: str = "strang",
) -> float:
    """Largest sample-to-sample increase of ``|x_b(t) - x_a(t)|``."""
    ta = integrate(system, phi, x0_a, schedule, method=method, record_states=True)
    tb = integrate(system, phi, x0_b, schedule, method=method, record_states=True)
    gaps = np.linalg.norm(tb.states - ta.states, axis=1)
    return float(max(0.0, np.max(np.diff(gaps), initial=0.0)))


def derivative_monotonicity_check(trajectory: Trajectory) -> float:
    """Largest sample-to-sample increase of ``xdot_norms``."""
    return float(max(0.0, np.max(np.diff(trajectory.xdot_norms), initial=0.0)))


@dataclass(frozen=True)
class UniformDecayProfile:
    """``ratios[i] = sup_t (1+t)^(1/(2 beta)) |x_i(t)| / |x_i(0)|_graph``."""

    ratios: np.ndarray
    constant: float
    beta: float
    note: str


_GLOBAL_SECTOR = {"identity", "linear", "tanh", "saturation"}


def uniform_decay_profile(
    system: DampedSystem,
    phi: Nonlinearity,
    x0_batch,
    schedule: Schedule,
    beta: float,
    method: str = "strang",
) -> UniformDecayProfile:
    """Batch constant of the uniform bound ``|x(t)| <~ |x0|_graph (1+t)^(-1/(2 beta))``.

    The bound needs a globally Lipschitz ``phi`` with a global sector
    estimate; for other maps the constant is still computed but the note
    says the hypothesis is not met.
    """
    p = 1.0 / (2.0 * beta)
    ratios = []
    for x0 in x0_batch:
        tr = integrate(system, phi, x0, schedule, method=method)
        g = graph_seminorm(system, x0)
        if g == 0:
            ratios.append(0.0)
            continue
        ratios.append(float(np.max((1.0 + tr.times) ** p * tr.norms)) / g)
    name = phi.label.split("(")[0]
    if phi.kind in ("identity", "linear") or name in _GLOBAL_SECTOR:
        note = "global sector and Lipschitz bounds hold on bounded data"
    else:
        note = "phi has no known global sector bound; constant is not covered"
    r = np.array(ratios)
    return UniformDecayProfile(r, float(r.max()) if r.size else 0.0, beta, note)


def truncation_floor(system: DampedSystem, x0, fraction: float = 0.5) -> float:
    """Norm of the part of ``x0`` in modes above ``fraction`` of the top frequency."""
    z = system.to_modal(np.asarray(x0, dtype=float))
    top = system.frequencies > fraction * system.frequencies[-1]
    return float(np.linalg.norm(z[top]))


def write_decay_csv(report: DecayReport, path, extra: dict | None = None) -> None:
    items = asdict(report)
    lo, hi = items.pop("window")
    out = {"theta_hat": items.pop("theta_hat"), "stderr": items.pop("stderr"),
           "t_lo": lo, "t_hi": hi}
    out.update(items)
    if extra:
        out.update(extra)
    write_key_values(path, out)


# ---------------------------------------------------------------------------
# invariant suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InvariantReport:
    """Relative invariant defects of one scenario.

    All quantities are normalised: energy by ``|x0|^2``, norm increase by
    ``|x0|``, derivative increase by the first derivative sample, pair
    contraction by the initial distance.
    """

    energy_residual: float
    energy_residual_half: float
    norm_increase: float
    xdot_increase: float
    contraction_drift: float
    conservation_drift: float

    ENERGY_TOL = 1e-6
    CONVERGENCE = 3.0
    MONOTONE_TOL = 1e-10
    XDOT_TOL = 1e-9
    CONTRACTION_TOL = 1e-9
    CONSERVATION_TOL = 1e-10

    @property
    def energy_ratio(self) -> float:
        if self.energy_residual_half == 0:
            return math.inf
        return self.energy_residual / self.energy_residual_half

    def checks(self) -> dict[str, bool]:
        return {
            "energy_residual": self.energy_residual <= self.ENERGY_TOL,
            "energy_convergence": self.energy_ratio >= self.CONVERGENCE,
            "norm_monotone": self.norm_increase <= self.MONOTONE_TOL,
            "xdot_monotone": self.xdot_increase <= self.XDOT_TOL,
            "pair_contraction": self.contraction_drift <= self.CONTRACTION_TOL,
            "undamped_conservation": self.conservation_drift <= self.CONSERVATION_TOL,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks().values())


def run_invariant_suite(
    system: DampedSystem,
    phi: Nonlinearity,
    x0,
    schedule: Schedule,
    partner=None,
    method: str = "strang",
) -> InvariantReport:
    """Energy balance, monotonicity, contraction and conservation checks.

    The energy residual is measured at ``schedule.dt`` and at half of it.
    ``partner`` is the second initial state for the contraction check
    (defaults to ``-x0 / 2``).
    """
    x0 = np.asarray(x0, dtype=float)
    e0 = float(x0 @ x0)
    tr = integrate(system, phi, x0, schedule, method=method, record_states=True)
    half = Schedule(schedule.t_end, schedule.dt / 2, 2 * schedule.sample_stride,
                    schedule.substep_tol)
    tr_half = integrate(system, phi, x0, half, method=method)
    res = float(np.max(np.abs(energy_balance_residual(tr)))) / e0
    res_half = float(np.max(np.abs(energy_balance_residual(tr_half)))) / e0
    norm_inc = float(max(0.0, np.max(np.diff(tr.norms), initial=0.0))) / math.sqrt(e0)
    xd0 = tr.xdot_norms[0]
    xdot_inc = derivative_monotonicity_check(tr) / xd0 if xd0 > 0 else 0.0

    xb = -0.5 * x0 if partner is None else np.asarray(partner, dtype=float)
    tb = integrate(system, phi, xb, schedule, method=method, record_states=True)
    gaps = np.linalg.norm(tb.states - tr.states, axis=1)
    drift = float(max(0.0, np.max(np.diff(gaps), initial=0.0))) / gaps[0]

    zero = custom(_zero_map, label="zero")
    undamped = integrate(system, zero, x0, schedule, method="strang")
    cons = float(np.max(np.abs(undamped.norms**2 - e0))) / e0
    return InvariantReport(res, res_half, norm_inc, xdot_inc, drift, cons)


def write_invariants_csv(reports: list[tuple[str, InvariantReport]], path) -> None:
    header = ["scenario", "energy_residual", "energy_ratio", "norm_increase",
              "xdot_increase", "contraction_drift", "conservation_drift", "passed"]
    rows = [
        [name, r.energy_residual, r.energy_ratio, r.norm_increase, r.xdot_increase,
         r.contraction_drift, r.conservation_drift, r.passed]
        for name, r in reports
    ]
    write_table(path, header, rows)


@dataclass(frozen=True)
class InvariantScenario:
    name: str
    system: DampedSystem
    phi: Nonlinearity
    x0: np.ndarray
    partner: np.ndarray
    schedule: Schedule


def random_invariant_scenarios(
    count: int = 20, seed: int = 0, t_end: float = 2.0, dt: float = 1e-3
) -> list[InvariantScenario]:
    """Random small scenarios alternating models and cycling the monotone builtins.

    Wave systems draw ``beta`` in ``[0.75, 2]`` and 8 to 32 modes; beam
    systems draw 4 to 12 elements.  Initial states mix the critical and
    smooth profiles with norms in ``[0.5, 3]``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        if i % 2 == 0:
            beta = float(rng.uniform(0.75, 2.0))
            modes = int(rng.choice([8, 16, 32]))
            system = build_wave_modal(WaveModelConfig(beta=beta, modes=modes))
            tag = f"wave(beta={beta:.3f},N={modes})"
        else:
            elements = int(rng.integers(4, 13))
            system = build_scole_fem(ScoleConfig(elements=elements))
            tag = f"scole(elements={elements})"
        name = MONOTONE_BUILTINS[i % len(MONOTONE_BUILTINS)]
        phi = from_name(name)
        states = []
        for _ in range(2):
            s = int(rng.integers(2**31))
            norm = float(rng.uniform(0.5, 3.0))
            if rng.random() < 0.5:
                states.append(critical_initial_state(system, seed=s, norm=norm))
            else:
                states.append(smooth_initial_state(system, seed=s, norm=norm))
        out.append(InvariantScenario(
            name=f"{i:02d}:{tag}:{phi.label}",
            system=system,
            phi=phi,
            x0=states[0],
            partner=states[1],
            schedule=Schedule.with_samples(t_end, dt, 500),
        ))
    return out
