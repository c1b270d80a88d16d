import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad
from scipy.linalg import expm
from scipy.optimize import minimize_scalar

from damplab.model import ScoleConfig, WaveModelConfig, build_scole_fem, build_wave_modal
from damplab.spectral import (
    FitError,
    GapError,
    SingularityError,
    eigen_gap,
    observability_constant,
    observability_gramian,
    resolvent_growth_fit,
    resolvent_norm,
    spectral_abscissa,
    wavepacket_margin,
    write_observability_csv,
    write_resolvent_csv,
)


@pytest.fixture(scope="module")
def wave64():
    return build_wave_modal(WaveModelConfig(beta=1.0, modes=64))


@pytest.fixture(scope="module")
def beam():
    return build_scole_fem(ScoleConfig(elements=12))


def _dense_oracle(system, kappa, s):
    B = system.input_map
    M = 1j * s * np.eye(system.dim) - system.A + kappa * (B @ B.T)
    return 1.0 / np.linalg.svd(M, compute_uv=False)[-1]


# --- resolvent --------------------------------------------------------------

def test_resolvent_undamped_distance():
    sys = build_wave_modal(WaveModelConfig(modes=2))
    assert resolvent_norm(sys, 0.0, 0.0) == pytest.approx(1 / math.pi, rel=1e-15)
    assert resolvent_norm(sys, 0.0, 4.0) == pytest.approx(1 / (4.0 - math.pi), rel=1e-14)
    with pytest.raises(SingularityError):
        resolvent_norm(sys, 0.0, math.pi)


def test_resolvent_woodbury_matches_dense_point(wave64):
    a = resolvent_norm(wave64, 1.0, 7.3)
    b = resolvent_norm(wave64, 1.0, 7.3, method="dense")
    assert abs(a - b) <= 1e-8 * b
    assert abs(b - _dense_oracle(wave64, 1.0, 7.3)) <= 1e-10 * b


@pytest.mark.parametrize("model", ["wave", "beam"])
def test_resolvent_woodbury_dense_random_probes(model, wave64, beam):
    sys = wave64 if model == "wave" else beam
    rng = np.random.default_rng(11)
    top = float(sys.frequencies[-1]) if model == "wave" else 2000.0
    worst = 0.0
    for _ in range(50):
        s = rng.uniform(-top, top)
        kappa = rng.uniform(0.05, 3.0)
        a = resolvent_norm(sys, kappa, s)
        b = resolvent_norm(sys, kappa, s, method="dense")
        worst = max(worst, abs(a - b) / b)
    assert worst <= 1e-8


def test_resolvent_even_in_s(wave64, beam):
    for sys in (wave64, beam):
        for s in (0.7, 12.5, 40.1):
            a = resolvent_norm(sys, 1.0, s)
            b = resolvent_norm(sys, 1.0, -s)
            assert abs(a - b) <= 1e-10 * a


def test_resolvent_full_output_and_errors(wave64):
    value, info = resolvent_norm(wave64, 1.0, 3.0, full_output=True)
    assert value > 0 and info["fallback"] is False and info["iterations"] >= 1
    with pytest.raises(ValueError):
        resolvent_norm(wave64, -1.0, 3.0)
    with pytest.raises(ValueError):
        resolvent_norm(wave64, 1.0, 3.0, method="lu")


def test_growth_fit_small_wave(tmp_path):
    sys = build_wave_modal(WaveModelConfig(beta=1.0, modes=64))
    curve = resolvent_growth_fit(sys, 1.0, 1.0, 0.5 * sys.frequencies[-1], grid_density=20)
    assert curve.envelope_slope == pytest.approx(2.0, abs=0.3)
    assert np.all(curve.norms > 0) and np.all(np.isfinite(curve.norms))
    assert curve.fit_range[1] <= 0.5 * sys.frequencies[-1] + 1e-12
    assert np.all(np.diff(curve.s_values) > 0)
    path = tmp_path / "resolvent.csv"
    write_resolvent_csv(curve, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "s,norm" and len(lines) == curve.s_values.size + 1


def test_growth_fit_worker_count_independent():
    sys = build_wave_modal(WaveModelConfig(beta=1.0, modes=24))
    a = resolvent_growth_fit(sys, 1.0, 1.0, 36.0, workers=1)
    b = resolvent_growth_fit(sys, 1.0, 1.0, 36.0, workers=3)
    assert np.array_equal(a.norms, b.norms) and a.envelope_slope == b.envelope_slope


def test_growth_fit_needs_maxima():
    sys = build_wave_modal(WaveModelConfig(modes=8))
    with pytest.raises(FitError):
        resolvent_growth_fit(sys, 1.0, 1.0, 8.0)


def test_grid_density_minimum():
    sys = build_wave_modal(WaveModelConfig(modes=8))
    with pytest.raises(ValueError):
        resolvent_growth_fit(sys, 1.0, 1.0, 12.0, grid_density=5)


# --- spectrum ---------------------------------------------------------------

def test_spectral_abscissa_examples():
    one = build_wave_modal(WaveModelConfig(modes=1, coeffs=[1.0]))
    assert spectral_abscissa(one, 1.0) == pytest.approx(-1.0, abs=1e-12)
    for sys in (one, build_scole_fem(ScoleConfig(elements=6))):
        assert abs(spectral_abscissa(sys, 0.0)) <= 1e-10
        assert np.max(np.linalg.eigvals(sys.A).real) <= 1e-8 * np.abs(sys.frequencies).max()


def test_spectral_abscissa_shrinks_with_truncation():
    vals = [spectral_abscissa(build_wave_modal(WaveModelConfig(modes=n)), 1.0)
            for n in (32, 64, 128)]
    assert all(v < 0 for v in vals)
    assert abs(vals[0]) > abs(vals[1]) > abs(vals[2])


def test_eigen_gap_examples(beam):
    assert eigen_gap(build_wave_modal(WaveModelConfig(modes=5))) == pytest.approx(math.pi)
    assert eigen_gap(build_wave_modal(WaveModelConfig(modes=1))) == pytest.approx(2 * math.pi)
    freqs = build_scole_fem(ScoleConfig(elements=64)).frequencies[:11]
    assert np.all(np.diff(np.diff(freqs)) > 0)
    assert eigen_gap(beam) > 0


def test_eigen_gap_detects_repeats():
    from damplab.model import DampedSystem

    sys = DampedSystem(frequencies=np.array([1.0, 1.0]), input_map=np.ones((4, 1)))
    with pytest.raises(GapError):
        eigen_gap(sys)


def test_wavepacket_margin():
    m64 = wavepacket_margin(build_wave_modal(WaveModelConfig(beta=1.0, modes=64)), 1.0)
    m256 = wavepacket_margin(build_wave_modal(WaveModelConfig(beta=1.0, modes=256)), 1.0)
    assert m256 >= 0.9 * m64 > 0
    zero = build_wave_modal(WaveModelConfig(modes=4, coeffs=[0.0, 1, 1, 1]))
    assert wavepacket_margin(zero, 1.0) == 0.0
    # with slack (beta = 2 against b_n = 1/n) the minimum sits at the lowest
    # mode, so the margin is 1 + pi^2 for every N; the slack shows in the
    # per-mode products, which grow like n
    systems = [build_wave_modal(WaveModelConfig(beta=1.0, modes=n)) for n in (16, 64, 256)]
    margins = [wavepacket_margin(s, 2.0) for s in systems]
    assert_allclose(margins, 1 + math.pi**2, rtol=1e-12)
    tops = [(1 + s.frequencies[-1] ** 2) / s.n_modes for s in systems]
    assert tops[0] < tops[1] < tops[2]


# --- observability ----------------------------------------------------------

def test_gramian_hermitian_psd_and_diagonal(beam):
    for sys in (build_wave_modal(WaveModelConfig(modes=20)), beam):
        G = observability_gramian(sys, 3.0)
        assert_allclose(G, G.conj().T, atol=1e-12)
        assert np.linalg.eigvalsh(G).min() >= -1e-12 * np.abs(G).max()
        mags = np.linalg.norm(sys.eigen_data.input_values, axis=1)
        assert_allclose(np.diag(G).real, mags**2 * 3.0, rtol=1e-12)


def test_gramian_matches_time_quadrature():
    sys = build_wave_modal(WaveModelConfig(modes=3))
    tau = 2.5
    ed = sys.eigen_data
    G = observability_gramian(sys, tau)
    b = ed.input_values[:, 0]
    for j, k in [(0, 1), (2, 5), (3, 3)]:
        f = lambda t, j=j, k=k: np.conj(b[j] * np.exp(1j * ed.values[j] * t)) * (  # noqa: E731
            b[k] * np.exp(1j * ed.values[k] * t))
        re = quad(lambda t: f(t).real, 0, tau, epsabs=1e-13)[0]
        im = quad(lambda t: f(t).imag, 0, tau, epsabs=1e-13)[0]
        assert abs(G[j, k] - (re + 1j * im)) <= 1e-11


def test_observability_single_mode_oracle():
    sys = build_wave_modal(WaveModelConfig(modes=1, coeffs=[1.0]))
    tau, beta = 3.0, 1.0
    A, B = sys.A, sys.input_map[:, 0]
    # |(I - A)^-beta x| = (1 + pi^2)^(-beta/2) |x| for the rotation block
    radius = (1 + math.pi**2) ** (beta / 2)

    def energy(theta):
        x = radius * np.array([math.cos(theta), math.sin(theta)])
        return quad(lambda t: float(B @ expm(t * A) @ x) ** 2, 0, tau,
                    epsabs=1e-14, epsrel=1e-13)[0]

    grid = np.linspace(0, math.pi, 181)
    i = int(np.argmin([energy(t) for t in grid]))
    best = minimize_scalar(energy, bounds=(grid[max(i - 1, 0)], grid[min(i + 1, 180)]),
                           method="bounded", options={"xatol": 1e-12})
    rep = observability_constant(sys, tau, beta)
    assert abs(rep.c_tau - best.fun) <= 1e-8 * best.fun


def test_observability_truncation_stability(tmp_path):
    c = [observability_constant(build_wave_modal(WaveModelConfig(beta=1.0, modes=n)),
                                3.0, 1.0) for n in (16, 64, 256)]
    assert c[0].c_tau > 0 and c[2].c_tau >= 0.5 * c[0].c_tau
    assert all(r.ingham_ok for r in c)
    assert c[2].N_used == 256 and c[2].gap == pytest.approx(math.pi)
    path = tmp_path / "obs.csv"
    write_observability_csv(c[0], path)
    assert path.read_text().splitlines()[0] == "key,value"


def test_observability_monotone_in_tau():
    sys = build_wave_modal(WaveModelConfig(beta=1.0, modes=32))
    vals = [observability_constant(sys, tau, 1.0).c_tau for tau in (2.5, 3.0, 4.0)]
    assert vals[0] <= vals[1] <= vals[2]


def test_observability_below_ingham_threshold_flagged():
    sys = build_wave_modal(WaveModelConfig(beta=1.0, modes=16))
    assert not observability_constant(sys, 1.5, 1.0).ingham_ok
    with pytest.raises(ValueError):
        observability_constant(sys, 0.0, 1.0)
