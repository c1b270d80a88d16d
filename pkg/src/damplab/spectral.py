"""Frequency-domain quantities of ``A_kappa = A - kappa B B^T``.

Everything here works on the eigenbasis of the skew generator, in which
``is - A_kappa`` is a diagonal matrix plus a rank-d correction.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import minimize_scalar
from scipy.stats import linregress

from ._csv import write_key_values, write_table
from .model import DampedSystem

__all__ = [
    "SingularityError",
    "GapError",
    "FitError",
    "ResolventCurve",
    "ObservabilityReport",
    "resolvent_norm",
    "resolvent_growth_fit",
    "spectral_abscissa",
    "eigen_gap",
    "wavepacket_margin",
    "observability_gramian",
    "observability_constant",
    "write_resolvent_csv",
    "write_observability_csv",
]


class SingularityError(ZeroDivisionError):
    """``is`` hit an eigenvalue of an undamped generator."""


class GapError(ValueError):
    """Repeated eigenvalue: the uniform gap hypothesis fails."""


class FitError(ValueError):
    """Too few envelope maxima for a growth fit."""


# ---------------------------------------------------------------------------
# resolvent norms
# ---------------------------------------------------------------------------


class _Woodbury:
    """Apply ``(D + kappa C C^H)^{-1}`` and its adjoint, ``D = i (s - s_k)``."""

    def __init__(self, system: DampedSystem, kappa: float, s: float):
        ed = system.eigen_data
        self.dinv = 1.0 / (1j * (s - ed.values))
        self.C = ed.input_values.conj()
        self.kappa = kappa
        d = self.C.shape[1]
        core = np.eye(d) + kappa * (self.C.conj().T @ (self.dinv[:, None] * self.C))
        self.core_inv = np.linalg.inv(core)

    def solve(self, X):
        Y = self.dinv[:, None] * X
        if self.kappa == 0:
            return Y
        corr = self.C @ (self.core_inv @ (self.C.conj().T @ Y))
        return Y - self.kappa * (self.dinv[:, None] * corr)

    def solve_adjoint(self, X):
        dc = self.dinv.conj()
        Y = dc[:, None] * X
        if self.kappa == 0:
            return Y
        corr = self.C @ (self.core_inv.conj().T @ (self.C.conj().T @ Y))
        return Y - self.kappa * (dc[:, None] * corr)


def _top_singular_value(op: _Woodbury, n: int, block: int, tol: float, maxiter: int):
    """Block subspace iteration with Rayleigh-Ritz on ``R^H R``.

    The start block mixes the unit vectors of the most amplified eigen
    directions with a fixed pseudo-random block, so the result is
    deterministic.
    """
    block = min(block, n)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((n, block)) + 1j * rng.standard_normal((n, block))
    top = np.argsort(-np.abs(op.dinv))[:block]
    X[top, np.arange(top.size)] += 10.0 * math.sqrt(n)
    X, _ = np.linalg.qr(X)
    prev = None
    for it in range(1, maxiter + 1):
        Y = op.solve_adjoint(op.solve(X))
        # Rayleigh-Ritz on the current block
        H = X.conj().T @ Y
        H = 0.5 * (H + H.conj().T)
        vals, vecs = np.linalg.eigh(H)
        lam = vals[-1]
        if prev is not None and abs(lam - prev) <= tol * abs(lam):
            return math.sqrt(max(lam, 0.0)), it, True
        prev = lam
        X, _ = np.linalg.qr(Y @ vecs[:, ::-1])
    return math.sqrt(max(prev, 0.0)), maxiter, False


def _dense_norm(system: DampedSystem, kappa: float, s: float) -> float:
    B = system.input_map
    M = 1j * s * np.eye(system.dim) - (system.A - kappa * (B @ B.T))
    smin = np.linalg.svd(M, compute_uv=False)[-1]
    if smin == 0.0:
        raise SingularityError(f"is - A_kappa is singular at s={s!r}")
    return float(1.0 / smin)


def resolvent_norm(
    system: DampedSystem,
    kappa: float,
    s: float,
    method: str = "woodbury",
    *,
    tol: float = 1e-12,
    block: int = 6,
    maxiter: int = 500,
    full_output: bool = False,
):
    """``|(is - A + kappa B B^T)^{-1}|`` in the energy norm.

    Parameters
    ----------
    method : {"woodbury", "dense"}
        ``woodbury`` applies the low-rank inverse in the eigenbasis and
        finds the largest singular value by block power iteration;
        ``dense`` takes the smallest singular value of the full matrix.
    full_output : bool
        Also return a dict with ``iterations`` and ``fallback`` (true when
        the iteration stagnated and the dense value was used).

    Raises
    ------
    SingularityError
        For ``kappa == 0`` and ``s`` on an eigenvalue.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    s = float(s)
    info = {"iterations": 0, "fallback": False}
    if kappa == 0:
        dist = float(np.min(np.abs(s - system.eigen_data.values)))
        if dist <= 1e-14 * max(1.0, abs(s)):
            raise SingularityError(f"s={s!r} is an eigenvalue of the undamped generator")
        value = 1.0 / dist
    elif method == "dense":
        value = _dense_norm(system, kappa, s)
    elif method == "woodbury":
        op = _Woodbury(system, kappa, s)
        value, its, ok = _top_singular_value(op, system.dim, block, tol, maxiter)
        info["iterations"] = its
        if not ok:
            value = _dense_norm(system, kappa, s)
            info["fallback"] = True
    else:
        raise ValueError(f"unknown method {method!r}")
    return (value, info) if full_output else value


@dataclass
class ResolventCurve:
    """Resolvent norms on a frequency grid and the fitted envelope growth.

    ``envelope_slope`` is the least-squares slope of ``log norm`` against
    ``log s`` over the refined local maxima in ``fit_range``.
    """

    s_values: np.ndarray
    norms: np.ndarray
    envelope_slope: float
    kappa: float
    stderr: float = math.nan
    peak_s: np.ndarray = field(default_factory=lambda: np.empty(0))
    peak_norms: np.ndarray = field(default_factory=lambda: np.empty(0))
    fit_range: tuple[float, float] = (math.nan, math.nan)
    intercept: float = math.nan
    fallbacks: int = 0


def _frequency_grid(freqs, s_min, s_max, density):
    inner = freqs[(freqs > s_min) & (freqs < s_max)]
    edges = np.concatenate(([s_min], inner, [s_max]))
    frac = (np.arange(density) + 0.5) / density
    pieces = [a + (b - a) * frac for a, b in zip(edges[:-1], edges[1:])]
    return np.concatenate(pieces)


def resolvent_growth_fit(
    system: DampedSystem,
    kappa: float,
    s_min: float,
    s_max: float,
    grid_density: int = 20,
    method: str = "woodbury",
    workers: int = 1,
) -> ResolventCurve:
    """Sample the resolvent norm and fit its envelope growth.

    The grid places ``grid_density`` points between consecutive
    eigenfrequencies.  Each grid maximum is polished by bounded Brent
    search; the fit keeps maxima with ``s`` in
    ``[s_min, min(s_max, s_N / 2)]`` where ``s_N`` is the largest frequency.
    """
    if not 0 < s_min < s_max:
        raise ValueError("need 0 < s_min < s_max")
    if grid_density < 20:
        raise ValueError("grid_density must be at least 20 points per gap")
    freqs = np.sort(system.frequencies)
    grid = _frequency_grid(freqs, s_min, s_max, grid_density)
    fallbacks = 0

    def evaluate(chunk):
        out = np.empty(chunk.size)
        nfb = 0
        for i, s in enumerate(chunk):
            out[i], info = resolvent_norm(system, kappa, s, method, full_output=True)
            nfb += info["fallback"]
        return out, nfb

    chunks = np.array_split(grid, max(1, workers) * 4) if workers > 1 else [grid]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, chunks))
    else:
        results = [evaluate(c) for c in chunks]
    norms = np.concatenate([r[0] for r in results])
    fallbacks = sum(r[1] for r in results)

    upper = min(s_max, 0.5 * freqs[-1])
    idx = [i for i in range(1, grid.size - 1)
           if norms[i] >= norms[i - 1] and norms[i] >= norms[i + 1]
           and s_min <= grid[i] <= upper]
    peak_s, peak_n = [], []
    for i in idx:
        lo, hi = grid[i - 1], grid[i + 1]
        # search in the offset t = s - grid[i] to keep resolution at large s
        centre = grid[i]
        res = minimize_scalar(
            lambda t: -resolvent_norm(system, kappa, centre + t, method),
            bounds=(lo - centre, hi - centre), method="bounded",
            options={"xatol": 1e-9 * (hi - lo)},
        )
        s_pk, n_pk = centre + res.x, -res.fun
        if n_pk < norms[i]:
            s_pk, n_pk = centre, norms[i]
        peak_s.append(s_pk)
        peak_n.append(n_pk)
    peak_s = np.array(peak_s)
    peak_n = np.array(peak_n)
    use = (peak_s >= s_min) & (peak_s <= upper)
    if np.count_nonzero(use) < 5:
        raise FitError(
            f"only {np.count_nonzero(use)} envelope maxima in [{s_min:g}, {upper:g}]; need 5"
        )
    fit = linregress(np.log(peak_s[use]), np.log(peak_n[use]))
    return ResolventCurve(
        s_values=grid,
        norms=norms,
        envelope_slope=float(fit.slope),
        kappa=kappa,
        stderr=float(fit.stderr),
        peak_s=peak_s,
        peak_norms=peak_n,
        fit_range=(float(s_min), float(upper)),
        intercept=float(fit.intercept),
        fallbacks=int(fallbacks),
    )


def write_resolvent_csv(curve: ResolventCurve, path) -> None:
    write_table(path, ["s", "norm"], zip(curve.s_values, curve.norms))


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------


def spectral_abscissa(system: DampedSystem, kappa: float) -> float:
    """Largest real part of the spectrum of ``A - kappa B B^T``."""
    if kappa == 0:
        # skew generator: the spectrum is imaginary
        return 0.0
    B = system.input_map
    ev = np.linalg.eigvals(system.A - kappa * (B @ B.T))
    return float(np.max(ev.real))


def eigen_gap(system: DampedSystem) -> float:
    """Smallest distance between distinct eigenfrequencies.

    Raises
    ------
    GapError
        If two eigenfrequencies coincide within ``1e-10``.
    """
    vals = np.sort(system.eigen_data.values)
    if vals.size < 2:
        raise GapError("need at least two eigenvalues")
    gaps = np.diff(vals)
    g = float(gaps.min())
    if g <= 1e-10:
        i = int(np.argmin(gaps))
        raise GapError(f"gap hypothesis violated: repeated eigenvalue near {vals[i]!r}")
    return g


def wavepacket_margin(system: DampedSystem, beta: float) -> float:
    """``min_k (1 + |s_k|^beta) |B^* e_k|``."""
    ed = system.eigen_data
    mags = np.linalg.norm(ed.input_values, axis=1)
    return float(np.min((1.0 + np.abs(ed.values) ** beta) * mags))


# ---------------------------------------------------------------------------
# observability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservabilityReport:
    """Weighted observability constant on the truncated eigenbasis.

    ``c_tau`` is the best constant in
    ``c |(I - A)^{-beta} x|^2 <= int_0^tau |B^* e^{tA} x|^2 dt``.
    """

    tau: float
    beta: float
    c_tau: float
    gap: float
    N_used: int

    @property
    def ingham_ok(self) -> bool:
        return self.tau > 2 * math.pi / self.gap


def observability_gramian(system: DampedSystem, tau: float) -> np.ndarray:
    """``G_jk = int_0^tau conj(B^* e_j(t)) . B^* e_k(t) dt`` in the eigenbasis."""
    ed = system.eigen_data
    b = ed.input_values
    s = ed.values
    inner = b.conj() @ b.T
    ds = s[None, :] - s[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        kern = np.where(ds == 0, tau, np.expm1(1j * ds * tau) / (1j * ds))
    G = inner * kern
    return 0.5 * (G + G.conj().T)


def observability_constant(system: DampedSystem, tau: float, beta: float) -> ObservabilityReport:
    """Smallest eigenvalue of the pencil ``(G, W)``, ``W = diag((1+s_k^2)^-beta)``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = system.eigen_data.values
    G = observability_gramian(system, tau)
    W = np.diag((1.0 + s**2) ** (-beta))
    lam = eigh(G, W, eigvals_only=True, subset_by_index=[0, 0])[0]
    return ObservabilityReport(
        tau=float(tau),
        beta=float(beta),
        c_tau=float(max(lam, 0.0)),
        gap=eigen_gap(system),
        N_used=system.n_modes,
    )


def write_observability_csv(report: ObservabilityReport, path) -> None:
    write_key_values(path, {
        "tau": report.tau,
        "beta": report.beta,
        "c_tau": report.c_tau,
        "gap": report.gap,
        "ingham_threshold": 2 * math.pi / report.gap,
        "ingham_ok": report.ingham_ok,
        "N_used": report.N_used,
    })
