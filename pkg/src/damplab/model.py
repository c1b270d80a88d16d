"""Energy-coordinate models of damped skew systems.

Every model is expressed in coordinates where the energy norm is the
Euclidean norm, so that the generator ``A`` is exactly skew and the damped
dynamics read

    x' = A x - B phi(B^T x).

Two families are provided: a modal truncation of the weakly damped string
(``build_wave_modal``) and a cubic Hermite Galerkin model of a clamped beam
carrying a rigid tip body (``build_scole_fem``).

Internally each system also carries a *modal frame*: an orthogonal matrix
``Q`` whose column pairs ``(p_k, r_k)`` satisfy ``A p_k = -w_k r_k`` and
``A r_k = w_k p_k``.  In that frame the conservative flow is a rotation of
each pair, which the integrator and the spectral routines exploit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence, Union

import numpy as np
import scipy.integrate
import scipy.linalg

__all__ = [
    "ModelError",
    "EvaluationError",
    "EigenData",
    "DampedSystem",
    "WaveModelConfig",
    "ScoleConfig",
    "MultiplierConfig",
    "MultiplierReport",
    "sine_coefficients",
    "build_wave_modal",
    "build_scole_fem",
    "check_multiplier_condition",
    "graph_seminorm",
    "critical_initial_state",
    "smooth_initial_state",
]

Profile = Union[float, Callable[[np.ndarray], np.ndarray]]


class ModelError(ValueError):
    """Raised when a model cannot be constructed from its configuration."""


class EvaluationError(ValueError):
    """Raised when a user supplied function returns an unusable value."""


def _as_profile(value: Profile) -> Callable[[np.ndarray], np.ndarray]:
    if callable(value):
        return value
    const = float(value)
    return lambda x: np.full_like(np.asarray(x, dtype=float), const)


@dataclass(frozen=True)
class EigenData:
    """Spectral factorisation of a skew generator.

    ``values[j]`` is the real frequency ``s_j`` of the eigenvalue ``i s_j``,
    ``vectors[:, j]`` the matching unit eigenvector and ``input_values[j]``
    the complex d-vector ``B^* e_j``.  Eigenvalues come in conjugate pairs
    stored at consecutive indices ``(2k, 2k+1) -> (+w_k, -w_k)``.
    """

    values: np.ndarray
    vectors: np.ndarray
    input_values: np.ndarray


@dataclass(frozen=True, eq=False)
class DampedSystem:
    """Finite-dimensional damped skew system in energy coordinates.

    Parameters
    ----------
    frequencies : ndarray, shape (n_modes,)
        Positive angular frequencies ``w_k`` of the rotation blocks, sorted
        ascending.
    input_map : ndarray, shape (dim, input_dim)
        The input operator ``B`` in state coordinates.
    generator : ndarray or None
        Dense ``A``.  ``None`` means modal form: ``A`` is block diagonal with
        blocks ``((0, w_k), (-w_k, 0))`` and the state is already modal.
    modal_basis : ndarray or None
        Orthogonal ``Q`` mapping modal to state coordinates (``None`` for
        modal form).
    label : str
        Free-form description.
    """

    frequencies: np.ndarray
    input_map: np.ndarray
    generator: np.ndarray | None = None
    modal_basis: np.ndarray | None = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        freqs = np.asarray(self.frequencies, dtype=float)
        B = np.asarray(self.input_map, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape[0] != 2 * freqs.size:
            raise ModelError(
                f"input map has {B.shape[0]} rows, expected {2 * freqs.size}"
            )
        if B.shape[1] not in (1, 2):
            raise ModelError(f"input dimension must be 1 or 2, got {B.shape[1]}")
        if np.any(freqs <= 0) or np.any(np.diff(freqs) < 0):
            raise ModelError("frequencies must be positive and sorted ascending")
        if (self.generator is None) != (self.modal_basis is None):
            raise ModelError("dense generator and modal basis must be given together")
        freqs.flags.writeable = False
        B.flags.writeable = False
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "input_map", B)

    @property
    def dim(self) -> int:
        return self.input_map.shape[0]

    @property
    def input_dim(self) -> int:
        return self.input_map.shape[1]

    @property
    def n_modes(self) -> int:
        return self.frequencies.size

    @property
    def is_modal(self) -> bool:
        return self.generator is None

    @cached_property
    def A(self) -> np.ndarray:
        """Dense generator matrix."""
        if self.generator is not None:
            return self.generator
        n = self.dim
        A = np.zeros((n, n))
        idx = np.arange(self.n_modes)
        A[2 * idx, 2 * idx + 1] = self.frequencies
        A[2 * idx + 1, 2 * idx] = -self.frequencies
        return A

    @cached_property
    def modal_input(self) -> np.ndarray:
        """``Q^T B``: the input map in modal coordinates."""
        if self.modal_basis is None:
            return self.input_map
        return self.modal_basis.T @ self.input_map

    @cached_property
    def complex_input(self) -> np.ndarray:
        """Input map acting on complex modal amplitudes ``z_k = p_k + i r_k``.

        With this packing ``B^T x = Re(K^H z)`` and ``B u`` corresponds to
        ``K u`` for real ``u``.
        """
        C = self.modal_input
        return C[0::2] + 1j * C[1::2]

    @cached_property
    def gram(self) -> np.ndarray:
        """``B^T B`` (d x d, symmetric positive definite)."""
        return self.input_map.T @ self.input_map

    @cached_property
    def eigen_data(self) -> EigenData:
        n = self.n_modes
        values = np.empty(2 * n)
        values[0::2] = self.frequencies
        values[1::2] = -self.frequencies
        vecs_modal = np.zeros((2 * n, 2 * n), dtype=complex)
        idx = np.arange(n)
        s = 1 / math.sqrt(2)
        vecs_modal[2 * idx, 2 * idx] = s
        vecs_modal[2 * idx + 1, 2 * idx] = 1j * s
        vecs_modal[2 * idx, 2 * idx + 1] = s
        vecs_modal[2 * idx + 1, 2 * idx + 1] = -1j * s
        vectors = vecs_modal if self.modal_basis is None else self.modal_basis @ vecs_modal
        K = self.complex_input
        Cp, Cr = K.real, K.imag
        inputs = np.empty((2 * n, self.input_dim), dtype=complex)
        inputs[0::2] = (Cp + 1j * Cr) * s
        inputs[1::2] = (Cp - 1j * Cr) * s
        return EigenData(values, vectors, inputs)

    def apply_A(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.generator is not None:
            return self.generator @ x
        out = np.empty_like(x)
        out[0::2] = self.frequencies * x[1::2]
        out[1::2] = -self.frequencies * x[0::2]
        return out

    def to_modal(self, x: np.ndarray) -> np.ndarray:
        """Real state to complex modal amplitudes."""
        y = np.asarray(x, dtype=float)
        if self.modal_basis is not None:
            y = self.modal_basis.T @ y
        return y[0::2] + 1j * y[1::2]

    def from_modal(self, z: np.ndarray) -> np.ndarray:
        y = np.empty(self.dim)
        y[0::2] = z.real
        y[1::2] = z.imag
        if self.modal_basis is not None:
            y = self.modal_basis @ y
        return y

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"state has shape {x.shape}, expected ({self.dim},)")
        return x

    def skewness_residual(self) -> float:
        """``||A + A^T|| / ||A||`` in the Frobenius norm."""
        A = self.A
        return float(np.linalg.norm(A + A.T) / np.linalg.norm(A))


# ---------------------------------------------------------------------------
# string with distributed damping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WaveModelConfig:
    beta: float = 1.0
    modes: int = 128
    coeffs: Sequence[float] | None = None

    def __post_init__(self):
        if self.modes < 1:
            raise ModelError("modes must be positive")
        if self.coeffs is None:
            if not self.beta > 0.5:
                raise ModelError(
                    f"beta={self.beta}: generated coefficients n^-beta are square "
                    "summable only for beta > 1/2"
                )
        elif len(self.coeffs) < self.modes:
            raise ModelError(
                f"{len(self.coeffs)} coefficients given for {self.modes} modes"
            )

    def damping_coefficients(self) -> np.ndarray:
        if self.coeffs is not None:
            b = np.asarray(self.coeffs[: self.modes], dtype=float)
        else:
            n = np.arange(1, self.modes + 1, dtype=float)
            b = n ** (-self.beta)
        if not np.all(np.isfinite(b)):
            raise ModelError("damping coefficients must be finite")
        return b


def sine_coefficients(profile: Callable[[float], float], count: int) -> np.ndarray:
    """Coefficients ``b_n = int_0^1 b(x) sin(n pi x) dx`` for ``n = 1..count``.

    Uses QUADPACK's weighted oscillatory rule, so the sine factor is handled
    analytically and only ``profile`` is sampled.
    """
    if count < 1:
        raise ValueError("count must be at least 1")

    def checked(x):
        v = float(profile(x))
        if not math.isfinite(v):
            raise EvaluationError(f"profile is not finite at x={x!r} (value {v})")
        return v

    out = np.empty(count)
    for n in range(1, count + 1):
        val, _ = scipy.integrate.quad(
            checked, 0.0, 1.0, weight="sin", wvar=n * math.pi,
            epsabs=1e-13, epsrel=1e-12, limit=200,
        )
        out[n - 1] = val
    return out


def build_wave_modal(config: WaveModelConfig) -> DampedSystem:
    """Modal truncation of ``u_tt = u_xx - b(x) phi(int b u_t)`` on (0, 1).

    With ``u = sum a_n sqrt(2) sin(n pi x)`` the coordinates are
    ``(n pi a_n, a_n')`` per mode, so ``||x||^2 = int u_x^2 + u_t^2``.
    """
    b = config.damping_coefficients()
    n = config.modes
    freqs = math.pi * np.arange(1, n + 1, dtype=float)
    B = np.zeros((2 * n, 1))
    B[1::2, 0] = math.sqrt(2.0) * b
    return DampedSystem(
        frequencies=freqs,
        input_map=B,
        label=f"wave modes={n} beta={config.beta}",
        meta={"model": "wave", "coeffs": b},
    )


# ---------------------------------------------------------------------------
# beam with tip body
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoleConfig:
    EI: Profile = 1.0
    rho: Profile = 1.0
    m: float = 1.0
    J: float = 1.0
    elements: int = 64

    def __post_init__(self):
        if self.elements < 4:
            raise ModelError("at least 4 elements are required")
        if not (self.m > 0 and self.J > 0):
            raise ModelError("tip mass and inertia must be positive")


_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(5)
_GAUSS_X = 0.5 * (_GAUSS_X + 1.0)
_GAUSS_W = 0.5 * _GAUSS_W


def _hermite(xi: np.ndarray, h: float):
    """Cubic Hermite shape functions and their second x-derivatives."""
    N = np.stack([
        1 - 3 * xi**2 + 2 * xi**3,
        h * (xi - 2 * xi**2 + xi**3),
        3 * xi**2 - 2 * xi**3,
        h * (-(xi**2) + xi**3),
    ])
    d2 = np.stack([
        (-6 + 12 * xi) / h**2,
        (-4 + 6 * xi) / h,
        (6 - 12 * xi) / h**2,
        (-2 + 6 * xi) / h,
    ])
    return N, d2


def _assemble_beam(config: ScoleConfig):
    EI = _as_profile(config.EI)
    rho = _as_profile(config.rho)
    ne = config.elements
    h = 1.0 / ne
    ndof = 2 * (ne + 1)
    K = np.zeros((ndof, ndof))
    M = np.zeros((ndof, ndof))
    N, d2 = _hermite(_GAUSS_X, h)
    for e in range(ne):
        xq = (e + _GAUSS_X) * h
        ei = np.asarray(EI(xq), dtype=float)
        rq = np.asarray(rho(xq), dtype=float)
        if np.any(ei <= 0) or np.any(rq <= 0):
            raise ModelError(f"EI and rho must be positive on element {e}")
        wq = _GAUSS_W * h
        ke = (d2 * (ei * wq)) @ d2.T
        me = (N * (rq * wq)) @ N.T
        sl = slice(2 * e, 2 * e + 4)
        K[sl, sl] += ke
        M[sl, sl] += me
    M[-2, -2] += config.m
    M[-1, -1] += config.J
    # clamp u(0) = u'(0) = 0
    return K[2:, 2:], M[2:, 2:]


def build_scole_fem(config: ScoleConfig) -> DampedSystem:
    """Clamped Euler-Bernoulli beam with a rigid tip body, damped at the tip.

    Energy coordinates are ``(L_K^T u, L_M^T u')`` with Cholesky factors of
    the stiffness and (tip-augmented) mass matrices, so that
    ``||x||^2 = u^T K u + u'^T M u'``.  The input map has two columns and
    ``B^T x = (u'(1), u_x'(1))``; the damping force ``phi(w)`` enters the
    tip deflection and slope equations with the dissipative sign.
    """
    K, M = _assemble_beam(config)
    try:
        LK = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise ModelError("stiffness matrix is singular after clamping") from exc
    try:
        LM = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ModelError("mass matrix is not positive definite") from exc
    n = K.shape[0]
    # A12 = L_K^T L_M^{-T}
    A12 = scipy.linalg.solve_triangular(LM, LK, lower=True).T
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = A12
    A[n:, :n] = -A12.T
    E = np.zeros((n, 2))
    E[-2, 0] = 1.0
    E[-1, 1] = 1.0
    B = np.zeros((2 * n, 2))
    B[n:] = scipy.linalg.solve_triangular(LM, E, lower=True)

    # A12 = U S V^T gives the rotation pairs p_k = (U_k, 0), r_k = (0, V_k)
    U, S, Vt = np.linalg.svd(A12)
    order = np.argsort(S)
    S, U, V = S[order], U[:, order], Vt.T[:, order]
    Q = np.zeros((2 * n, 2 * n))
    Q[:n, 0::2] = U
    Q[n:, 1::2] = V
    return DampedSystem(
        frequencies=S,
        input_map=B,
        generator=A,
        modal_basis=Q,
        label=f"scole elements={config.elements} m={config.m} J={config.J}",
        meta={"model": "scole", "stiffness": K, "mass": M},
    )


@dataclass(frozen=True)
class MultiplierConfig:
    zeta: Profile = field(default=lambda x: 2.0 * np.asarray(x))
    a: float = 0.5
    b: float = 0.5
    grid_points: int = 201

    def __post_init__(self):
        z0 = float(np.asarray(_as_profile(self.zeta)(np.array([0.0])))[0])
        if abs(z0) > 1e-12:
            raise ValueError(f"multiplier must vanish at x=0, got zeta(0)={z0}")
        if self.grid_points < 101:
            raise ValueError("grid_points must be at least 101")
        if not (self.a > 0 and self.b > 0):
            raise ValueError("a and b must be positive")


@dataclass(frozen=True)
class MultiplierReport:
    inertia_max: float
    stiffness_max: float
    worst_x: tuple[float, float]

    @property
    def passed(self) -> bool:
        return self.inertia_max < 0 and self.stiffness_max < 0


def check_multiplier_condition(scole: ScoleConfig, mult: MultiplierConfig) -> MultiplierReport:
    """Evaluate both multiplier inequalities on a uniform grid.

    Reports the maxima over ``[0, 1]`` of

        2(1 - a) rho - (rho zeta)' + b
        EI (1 - a - 2 zeta') + (EI zeta)' / 2 + b

    which must both be negative.  Derivatives are second-order central
    differences (one-sided at the ends).
    """
    x = np.linspace(0.0, 1.0, mult.grid_points)
    hx = x[1] - x[0]
    EI = np.asarray(_as_profile(scole.EI)(x), dtype=float)
    rho = np.asarray(_as_profile(scole.rho)(x), dtype=float)
    zeta = np.asarray(_as_profile(mult.zeta)(x), dtype=float)
    d = lambda f: np.gradient(f, hx, edge_order=2)  # noqa: E731
    first = 2 * (1 - mult.a) * rho - d(rho * zeta) + mult.b
    second = EI * (1 - mult.a - 2 * d(zeta)) + 0.5 * d(EI * zeta) + mult.b
    return MultiplierReport(
        inertia_max=float(first.max()),
        stiffness_max=float(second.max()),
        worst_x=(float(x[first.argmax()]), float(x[second.argmax()])),
    )


def graph_seminorm(system: DampedSystem, state) -> float:
    """``||x|| + ||A x||``."""
    x = system.check_state(state)
    return float(np.linalg.norm(x) + np.linalg.norm(system.apply_A(x)))


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------


def _modal_state(system: DampedSystem, amplitudes: np.ndarray, seed: int, norm: float):
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2 * math.pi, size=system.n_modes)
    z = amplitudes * np.exp(1j * phases)
    z *= norm / np.linalg.norm(z)
    return system.from_modal(z)


def critical_initial_state(system: DampedSystem, seed: int = 0, norm: float = 1.0) -> np.ndarray:
    """State with modal energies ``|z_k|^2 ~ 1 / ((1 + w_k^2) k)``.

    This is the borderline of the graph-norm domain (the graph norm grows
    like ``sqrt(log n_modes)``), the profile on which the worst-case
    polynomial rates of classical solutions are attained.  Phases are drawn
    from ``numpy.random.default_rng(seed)``.
    """
    k = np.arange(1, system.n_modes + 1, dtype=float)
    amp = 1.0 / np.sqrt((1.0 + system.frequencies**2) * k)
    return _modal_state(system, amp, seed, norm)


def smooth_initial_state(
    system: DampedSystem, seed: int = 0, norm: float = 1.0, exponent: float = 3.0
) -> np.ndarray:
    """State with modal amplitudes ``|z_k| ~ k^-exponent`` and random phases."""
    k = np.arange(1, system.n_modes + 1, dtype=float)
    return _modal_state(system, k**-exponent, seed, norm)
