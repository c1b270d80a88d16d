"""Damping maps ``phi: R^d -> R^d`` and empirical checks of their hypotheses.

The checks are sampling based.  A negative monotonicity gap is a
certificate of failure; a non-negative one is evidence only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np
from scipy.stats import linregress, qmc

from .model import EvaluationError

__all__ = [
    "Nonlinearity",
    "SectorReport",
    "MonotonicityReport",
    "LinearizationFit",
    "identity",
    "linear_gain",
    "radial",
    "custom",
    "tanh_damping",
    "saturation",
    "power",
    "deadzone",
    "cubic",
    "BUILTINS",
    "MONOTONE_BUILTINS",
    "from_name",
    "verify_sector",
    "verify_monotone",
    "fit_linearization",
]


@dataclass(frozen=True)
class Nonlinearity:
    """A damping map.

    ``kind`` is one of ``"identity"``, ``"linear"`` (gain ``gain``),
    ``"radial"`` (``psi(|u|) u / |u|``) or ``"custom"`` (``func``).
    ``kinks`` lists radii where ``psi`` is not differentiable; quadrature
    of the dissipation splits there.
    """

    kind: str
    psi: Callable[[float], float] | None = None
    gain: float = 1.0
    func: Callable[[np.ndarray], np.ndarray] | None = None
    label: str = ""
    params: dict = field(default_factory=dict, compare=False)
    kinks: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("identity", "linear", "radial", "custom"):
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        if self.kind == "radial" and self.psi is None:
            raise ValueError("radial nonlinearity needs a profile psi")
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom nonlinearity needs func")

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise EvaluationError(f"non-finite argument {u}")
        if self.kind == "identity":
            return u.copy()
        if self.kind == "linear":
            return self.gain * u
        if self.kind == "custom":
            return np.asarray(self.func(u), dtype=float)
        r = float(np.linalg.norm(u))
        if r == 0.0:
            return np.zeros_like(u)
        return self._psi_checked(r) / r * u

    def _psi_checked(self, r):
        v = self.psi(r)
        if not (np.all(np.isfinite(v)) and np.all(np.asarray(v) >= 0)):
            raise EvaluationError(f"profile {self.label!r} returned {v} at r={r}")
        return v

    def batch(self, U: np.ndarray) -> np.ndarray:
        """Evaluate row-wise on an ``(n, d)`` array."""
        U = np.asarray(U, dtype=float)
        if self.kind == "identity":
            return U.copy()
        if self.kind == "linear":
            return self.gain * U
        if self.kind == "custom":
            return np.array([self(u) for u in U])
        r = np.linalg.norm(U, axis=1)
        scale = np.zeros_like(r)
        nz = r > 0
        scale[nz] = self._psi_checked(r[nz]) / r[nz]
        return scale[:, None] * U

    def profile(self, r: np.ndarray) -> np.ndarray:
        """``psi(r)`` for radial maps; identity and linear maps count as radial."""
        r = np.asarray(r, dtype=float)
        if self.kind == "identity":
            return r.copy()
        if self.kind == "linear":
            return self.gain * r
        if self.kind == "radial":
            return np.asarray(self._psi_checked(r), dtype=float)
        raise TypeError("custom nonlinearities have no radial profile")

    @property
    def is_radial(self) -> bool:
        return self.kind != "custom"

    def scalar(self) -> Callable[[float], float]:
        """Fast float -> float version for one-dimensional inputs."""
        if self.kind == "identity":
            return lambda w: w
        if self.kind == "linear":
            g = self.gain
            return lambda w: g * w
        if self.kind == "custom":
            f = self.func
            return lambda w: float(np.asarray(f(np.array([w])))[0])
        psi = self.psi

        def phi(w):
            if w == 0.0:
                return 0.0
            return math.copysign(float(psi(abs(w))), w)

        return phi

    def planar(self) -> Callable[[complex], complex]:
        """Fast version for ``d == 2`` with ``u`` packed as ``u1 + i u2``."""
        if self.kind == "identity":
            return lambda w: w
        if self.kind == "linear":
            g = self.gain
            return lambda w: g * w
        if self.kind == "custom":
            f = self.func

            def phi_c(w):
                v = np.asarray(f(np.array([w.real, w.imag])), dtype=float)
                return complex(v[0], v[1])

            return phi_c
        psi = self.psi

        def phi(w):
            r = abs(w)
            if r == 0.0:
                return 0j
            return (float(psi(r)) / r) * w

        return phi


def identity() -> Nonlinearity:
    return Nonlinearity("identity", label="identity")


def linear_gain(kappa: float) -> Nonlinearity:
    if kappa <= 0:
        raise ValueError("gain must be positive")
    return Nonlinearity("linear", gain=float(kappa), label=f"linear({kappa:g})",
                        params={"kappa": kappa})


def radial(psi: Callable, label: str = "radial", kinks=(), **params) -> Nonlinearity:
    return Nonlinearity("radial", psi=psi, label=label, params=params,
                        kinks=tuple(float(k) for k in kinks))


def custom(func: Callable, label: str = "custom") -> Nonlinearity:
    return Nonlinearity("custom", func=func, label=label)


# Profiles are module-level (or partials of module-level functions) so that
# nonlinearities pickle across worker processes.

def _psi_tanh(r):
    return np.tanh(r)


def _psi_saturation(r, level):
    return np.minimum(r, level)


def _psi_power(r, p):
    return np.power(r, p)


def _psi_deadzone(r, width):
    return np.maximum(r - width, 0.0)


def tanh_damping() -> Nonlinearity:
    return radial(_psi_tanh, label="tanh")


def saturation(level: float = 1.0) -> Nonlinearity:
    return radial(partial(_psi_saturation, level=level), label=f"saturation({level:g})",
                  kinks=(level,), level=level)


def power(p: float) -> Nonlinearity:
    return radial(partial(_psi_power, p=p), label=f"power({p:g})", p=p)


def deadzone(width: float = 0.1) -> Nonlinearity:
    """``psi(r) = max(r - width, 0)``: no damping near zero."""
    return radial(partial(_psi_deadzone, width=width), label=f"deadzone({width:g})",
                  kinks=(width,), width=width)


def cubic() -> Nonlinearity:
    """``psi(r) = r^3``: monotone, but too weak near zero for a sector bound."""
    return radial(partial(_psi_power, p=3.0), label="cubic", p=3.0)


BUILTINS: dict[str, Callable[..., Nonlinearity]] = {
    "identity": identity,
    "linear": linear_gain,
    "tanh": tanh_damping,
    "saturation": saturation,
    "power": power,
    "deadzone": deadzone,
    "cubic": cubic,
}

# Builtins satisfying both monotonicity and the sector bound.
MONOTONE_BUILTINS = ("identity", "tanh", "saturation")


def from_name(name: str, **params) -> Nonlinearity:
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ValueError(
            f"unknown nonlinearity {name!r}; choose from {sorted(BUILTINS)}"
        ) from None
    return factory(**params)


# ---------------------------------------------------------------------------
# hypothesis checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SectorReport:
    """Empirical sector constants.

    ``small_slope`` is the log-log slope of ``<phi(u), u> / |u|^2`` over the
    two lowest decades of the grid.  A clearly positive slope means the
    ratio tends to zero at the origin, so ``c_small > 0`` on the finite grid
    is an artefact of where the grid stops (``vanishing_at_zero``).
    """

    delta: float
    c_small: float
    c_large: float
    lipschitz_delta: float
    small_slope: float = 0.0

    @property
    def vanishing_at_zero(self) -> bool:
        return self.c_small <= 0 or self.small_slope > 0.1

    @property
    def passed(self) -> bool:
        return self.c_small > 0 and self.c_large > 0


def _directions(dim: int, count: int, seed: int = 12345) -> np.ndarray:
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    pts = qmc.Sobol(d=dim, scramble=True, seed=seed).random(count)
    g = 2 * pts - 1
    g = g[np.linalg.norm(g, axis=1) > 1e-3]
    return g / np.linalg.norm(g, axis=1)[:, None]


def verify_sector(
    phi: Nonlinearity, delta: float, R_max: float, samples: int = 1000, dim: int = 2
) -> SectorReport:
    """Empirical constants of the two-regime sector bound.

    ``c_small`` estimates ``inf <phi(u), u> / |u|^2`` on ``0 < |u| <= delta``
    and ``c_large`` estimates ``inf <phi(u), u>`` on ``delta <= |u| <= R_max``
    over log-spaced radii (down to ``1e-6 delta``).  For non-radial maps the
    radii are combined with quasi-random directions in ``R^dim``.
    """
    if samples < 1000:
        raise ValueError("samples must be at least 1000")
    if not (0 < delta < R_max):
        raise ValueError("need 0 < delta < R_max")
    r_small = np.geomspace(1e-6 * delta, delta, samples)
    r_large = np.geomspace(delta, R_max, samples)
    if phi.is_radial:
        ps = phi.profile(r_small)
        pl = phi.profile(r_large)
        ratio_small = ps / r_small
        slope = _small_slope(r_small, ratio_small)
        c_small = float(ratio_small.min())
        c_large = float((pl * r_large).min())
        lip = float(ratio_small.max())
    else:
        dirs = _directions(dim, 64)
        c_small, c_large, lip, slope = math.inf, math.inf, 0.0, -math.inf
        for d in dirs:
            Us = r_small[:, None] * d
            Ul = r_large[:, None] * d
            Fs = phi.batch(Us)
            Fl = phi.batch(Ul)
            ratio = np.sum(Fs * Us, 1) / r_small**2
            c_small = min(c_small, float(np.min(ratio)))
            slope = max(slope, _small_slope(r_small, ratio))
            c_large = min(c_large, float(np.min(np.sum(Fl * Ul, 1))))
            lip = max(lip, float(np.max(np.linalg.norm(Fs, axis=1) / r_small)))
    return SectorReport(delta, c_small, c_large, lip, slope)


def _small_slope(r, ratio):
    low = r <= 100 * r[0]
    if np.any(ratio[low] <= 0):
        return math.inf
    return float(linregress(np.log(r[low]), np.log(ratio[low])).slope)


@dataclass(frozen=True)
class MonotonicityReport:
    """``minimum`` of ``<phi(u1) - phi(u2), u1 - u2>`` over sampled pairs.

    Only a negative minimum is conclusive.
    """

    minimum: float
    worst_pair: tuple[np.ndarray, np.ndarray]
    pairs: int

    @property
    def violated(self) -> bool:
        return self.minimum < 0


def verify_monotone(
    phi: Nonlinearity, pairs: int = 10_000, dim: int = 2, radius: float = 10.0,
    seed: int = 2024,
) -> MonotonicityReport:
    if pairs < 10_000:
        raise ValueError("pairs must be at least 10^4")
    with warnings.catch_warnings():
        # balance only matters for integration, not for a falsification search
        warnings.filterwarnings("ignore", "The balance properties", UserWarning)
        pts = qmc.Sobol(d=2 * dim, scramble=True, seed=seed).random(pairs)
    U = radius * (2 * pts - 1)
    U1, U2 = U[:, :dim], U[:, dim:]
    for V in (U1, U2):
        n = np.linalg.norm(V, axis=1)
        out = n > radius
        V[out] *= (radius / n[out])[:, None]
    gaps = np.sum((phi.batch(U1) - phi.batch(U2)) * (U1 - U2), axis=1)
    i = int(np.argmin(gaps))
    return MonotonicityReport(float(gaps[i]), (U1[i].copy(), U2[i].copy()), pairs)


@dataclass(frozen=True)
class LinearizationFit:
    """Power-law fit ``|phi(u) - kappa u| ~ C |u|^gamma`` on ``|u| <= epsilon``.

    ``residual`` is the largest deviation of the fit in natural-log units;
    ``clean`` is false when it exceeds the acceptance threshold.
    """

    kappa: float
    gamma: float
    C: float
    epsilon: float
    residual: float
    clean: bool


def fit_linearization(
    phi: Nonlinearity, epsilon: float, points: int = 200, threshold: float = 0.1
) -> LinearizationFit:
    if not phi.is_radial:
        raise TypeError("linearization fit needs a radial or linear map")
    # kappa from the smallest radius of a log grid reaching far below the fit range
    r0 = 1e-6 * epsilon
    kappa = float(phi.profile(np.array([r0]))[0] / r0)
    r = np.geomspace(epsilon / 100, epsilon, points)
    rem = np.abs(phi.profile(r) - kappa * r)
    scale = np.maximum(phi.profile(r), kappa * r)
    if np.all(rem <= 1e-14 * scale):
        return LinearizationFit(kappa, math.inf, float(rem.max()), epsilon, 0.0, True)
    if np.any(rem <= 0):
        return LinearizationFit(kappa, math.nan, math.nan, epsilon, math.inf, False)
    fit = linregress(np.log(r), np.log(rem))
    resid = float(np.max(np.abs(np.log(rem) - (fit.intercept + fit.slope * np.log(r)))))
    return LinearizationFit(
        kappa=kappa,
        gamma=float(fit.slope),
        C=float(math.exp(fit.intercept)),
        epsilon=epsilon,
        residual=resid,
        clean=resid <= threshold,
    )
