"""Acceptance criteria, run at their stated sizes and tolerances.

Each criterion prints one ``PASS``/``FAIL`` line (also collected into the
terminal summary). The preset runs are shared through a session fixture.
"""

import csv
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import expm
from scipy.optimize import minimize_scalar

from conftest import ACCEPTANCE_LINES
from damplab._csv import read_key_values
from damplab.cli import PRESETS, ScenarioConfig, run_scenario
from damplab.model import WaveModelConfig, build_wave_modal
from damplab.spectral import observability_constant, resolvent_norm

pytestmark = pytest.mark.acceptance


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


class Runs:
    """Lazily runs presets once per session and remembers wall time."""

    def __init__(self, root):
        self.root = root
        self.seconds = {}

    def out(self, name, tag="first"):
        path = self.root / tag / name
        if tag != "first" or name not in self.seconds:
            start = time.perf_counter()
            run_scenario(ScenarioConfig.build(name), path)
            if tag == "first":
                self.seconds[name] = time.perf_counter() - start
        return path

    def kv(self, name, file):
        return read_key_values(self.out(name) / file)


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("presets"))


def _theta(runs, name):
    return float(runs.kv(name, "decay_report.csv")["theta_hat"])


# ---------------------------------------------------------------------------


def test_criterion_1_wave_rate(runs):
    kv = runs.kv("wave-beta1-linear", "decay_report.csv")
    theta, sup_s, tail_s = (float(kv[k]) for k in ("theta_hat", "sup_scaled", "tail_scaled"))
    secs = runs.seconds["wave-beta1-linear"]
    ok = 0.4 <= theta <= 0.6 and tail_s >= 0.1 * sup_s and secs <= 120
    assert report(1, ok, f"theta_hat={theta:.4f} in [0.4,0.6], tail/sup={tail_s / sup_s:.3f} "
                         f">= 0.1, {secs:.0f}s <= 120s")


def test_criterion_2_rate_scaling(runs):
    got = {b: _theta(runs, f"wave-beta{b}-linear") for b in ("0.75", "1.5")}
    secs = sum(runs.seconds[f"wave-beta{b}-linear"] for b in got)
    errs = {b: abs(t - 1 / (2 * float(b))) for b, t in got.items()}
    ok = all(e <= 0.1 for e in errs.values()) and secs <= 240
    assert report(2, ok, ", ".join(f"beta={b}: theta_hat={got[b]:.4f} "
                                   f"(target {1 / (2 * float(b)):.3f}, err {errs[b]:.3f})"
                                   for b in got) + f", {secs:.0f}s <= 240s")


def test_criterion_3_near_linear(runs):
    a, b = _theta(runs, "wave-beta1-tanh"), _theta(runs, "wave-beta1-linear")
    cfg = ScenarioConfig.build("wave-beta1-tanh")
    ref = ScenarioConfig.build("wave-beta1-linear")
    matched = all(cfg[k] == ref[k] for k in cfg.values if not k.startswith("phi."))
    ok = matched and abs(a - b) <= 0.05
    assert report(3, ok, f"theta_hat tanh={a:.4f}, identity={b:.4f}, diff={abs(a - b):.4f} "
                         f"<= 0.05, matched scenarios={matched}")


def test_criterion_4_cubic_control(runs):
    theta = _theta(runs, "wave-beta1-cubic-control")
    assert report(4, theta <= 0.35, f"theta_hat={theta:.4f} <= 0.35")


def test_criterion_5_resolvent_growth(runs):
    start = time.perf_counter()
    s1 = float(runs.kv("wave-resolvent-sweep", "resolvent_fit.csv")["envelope_slope"])
    s2 = float(runs.kv("wave-beta2-resolvent", "resolvent_fit.csv")["envelope_slope"])
    system = build_wave_modal(WaveModelConfig(beta=1.0, modes=256))
    rng = np.random.default_rng(2024)
    top = float(system.frequencies[-1])
    worst = 0.0
    for _ in range(50):
        s, kappa = rng.uniform(-top, top), rng.uniform(0.05, 3.0)
        a = resolvent_norm(system, kappa, s)
        b = resolvent_norm(system, kappa, s, method="dense")
        worst = max(worst, abs(a - b) / b)
    secs = (runs.seconds["wave-resolvent-sweep"] + runs.seconds["wave-beta2-resolvent"]
            + time.perf_counter() - start)
    ok = abs(s1 - 2.0) <= 0.3 and abs(s2 - 4.0) <= 0.5 and worst <= 1e-8 and secs <= 120
    assert report(5, ok, f"slope beta=1: {s1:.4f} (2.0+-0.3), beta=2: {s2:.4f} (4.0+-0.5), "
                         f"Woodbury/dense max rel diff {worst:.1e} <= 1e-8, {secs:.0f}s <= 120s")


def _single_mode_oracle(tau, beta):
    system = build_wave_modal(WaveModelConfig(modes=1, coeffs=[1.0]))
    A, B = system.A, system.input_map[:, 0]
    radius = (1 + math.pi**2) ** (beta / 2)

    def energy(theta):
        x = radius * np.array([math.cos(theta), math.sin(theta)])
        return quad(lambda t: float(B @ expm(t * A) @ x) ** 2, 0, tau,
                    epsabs=1e-14, epsrel=1e-13)[0]

    grid = np.linspace(0, math.pi, 181)
    i = int(np.argmin([energy(t) for t in grid]))
    best = minimize_scalar(energy, bounds=(grid[max(i - 1, 0)], grid[min(i + 1, 180)]),
                           method="bounded", options={"xatol": 1e-12})
    pencil = observability_constant(system, tau, beta).c_tau
    return pencil, best.fun


def test_criterion_6_observability(runs):
    kv = runs.kv("wave-observability", "observability.csv")
    c16, c256 = float(kv["N16.c_tau"]), float(kv["N256.c_tau"])
    pencil, oracle = _single_mode_oracle(3.0, 1.0)
    rel = abs(pencil - oracle) / oracle
    ok = c256 >= 0.5 * c16 > 0 and rel <= 1e-8
    assert report(6, ok, f"c_tau(16)={c16:.6g}, c_tau(64)={float(kv['N64.c_tau']):.6g}, "
                         f"c_tau(256)={c256:.6g} >= 0.5 c_tau(16); N=1 pencil vs oracle "
                         f"rel diff {rel:.1e} <= 1e-8")


def test_criterion_7_scole_structure(runs):
    """The structural half of the beam criterion: these parts hold."""
    mc = runs.kv("scole-linear", "model_checks.csv")
    assert float(mc["skewness_residual"]) <= 1e-10
    assert mc["multiplier_passed"] == "true"
    cfg = ScenarioConfig.build("scole-linear")
    assert (cfg["multiplier.zeta"], cfg["multiplier.a"], cfg["multiplier.b"]) == ([0, 2], .5, .5)
    assert (cfg["model.EI"], cfg["model.rho"], cfg["model.m"], cfg["model.J"],
            cfg["model.elements"]) == (1, 1, 1, 1, 64)
    assert abs(_theta(runs, "scole-tanh") - _theta(runs, "scole-linear")) <= 0.05


@pytest.mark.xfail(strict=True, reason=(
    "the beam model with tip body decays like t^-1 with envelope slope 1 on this window; "
    "the claimed t^-1/2 and slope 2 are not reproduced (analysis in the decisions ledger)"))
def test_criterion_7_scole(runs):
    mc = runs.kv("scole-linear", "model_checks.csv")
    skew = float(mc["skewness_residual"])
    mult = mc["multiplier_passed"] == "true"
    theta, theta_t = _theta(runs, "scole-linear"), _theta(runs, "scole-tanh")
    slope = float(runs.kv("scole-linear", "resolvent_fit.csv")["envelope_slope"])
    secs = runs.seconds["scole-linear"] + runs.seconds["scole-tanh"]
    parts = {
        "skewness": skew <= 1e-10,
        "multiplier": mult,
        "theta": 0.4 <= theta <= 0.6,
        "slope": abs(slope - 2.0) <= 0.4,
        "tanh_match": abs(theta_t - theta) <= 0.05,
        "runtime": secs <= 300,
    }
    ok = all(parts.values())
    failed = [k for k, v in parts.items() if not v]
    assert report(7, ok, f"skewness={skew:.1e}, multiplier={mult}, theta_hat={theta:.4f} "
                         f"in [0.4,0.6], slope={slope:.4f} (2.0+-0.4), tanh theta_hat="
                         f"{theta_t:.4f}, {secs:.0f}s <= 300s"
                         + (f"; failing: {', '.join(failed)}" if failed else ""))


def test_criterion_8_invariant_suite(runs):
    out = runs.out("invariant-suite")
    with open(out / "invariants.csv") as fh:
        rows = list(csv.DictReader(fh))
    f = lambda key: max(float(r[key]) for r in rows)  # noqa: E731
    ratio = min(float(r["energy_ratio"]) for r in rows)
    secs = runs.seconds["invariant-suite"]
    models = {r["scenario"].split(":")[1].split("(")[0] for r in rows}
    phis = {r["scenario"].split(":")[-1].split("(")[0] for r in rows}
    ok = (len(rows) == 20 and all(r["passed"] == "true" for r in rows)
          and models == {"wave", "scole"} and phis == {"identity", "tanh", "saturation"}
          and f("energy_residual") <= 1e-6 and ratio >= 3.0
          and f("contraction_drift") <= 1e-9 and f("conservation_drift") <= 1e-10
          and secs <= 180)
    assert report(8, ok, f"{len(rows)} scenarios over {sorted(models)} x {sorted(phis)}: "
                         f"energy residual {f('energy_residual'):.1e} (x0-relative) <= 1e-6, "
                         f"min halving ratio {ratio:.2f} >= 3, norm increase "
                         f"{f('norm_increase'):.1e}, xdot increase {f('xdot_increase'):.1e}, "
                         f"contraction drift {f('contraction_drift'):.1e} <= 1e-9, "
                         f"conservation drift {f('conservation_drift'):.1e} <= 1e-10, "
                         f"{secs:.0f}s <= 180s")


def test_criterion_9_determinism(runs):
    differing = []
    for name in PRESETS:
        first = runs.out(name)
        second = runs.out(name, tag="second")
        files = sorted(p.name for p in first.iterdir())
        if files != sorted(p.name for p in second.iterdir()):
            differing.append(name)
            continue
        if any((first / f).read_bytes() != (second / f).read_bytes() for f in files):
            differing.append(name)
    ok = not differing
    assert report(9, ok, f"{len(PRESETS)} presets rerun, byte-identical outputs"
                         + (f"; differing: {differing}" if differing else ""))
