"""Time integration of ``x' = A x - B phi(B^T x)``.

The default scheme is Strang splitting: an exact rotation for the skew part
and an exact-up-to-tolerance solve of the damping part.  The damping flow
``y' = -B phi(B^T y)`` only moves ``y`` inside ``range(B)``, and
``w = B^T y`` obeys the closed d-dimensional ODE ``w' = -(B^T B) phi(w)``,
so each damping substep is a tiny ODE solve followed by a rank-d update.

``linearized_strang`` splits around the linearization instead: the exact
flow of ``A - kappa B B^T`` alternates with the remainder
``-B (phi(w) - kappa w)``.  For linear damping it is exact, which removes
the aliasing artefacts the plain splitting suffers on systems whose top
frequencies are far beyond ``1/dt`` (the beam model).

The state is carried as complex modal amplitudes ``z_k = p_k + i r_k``
(see :class:`damplab.model.DampedSystem`), on which ``A`` acts as
multiplication by ``-i w_k``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .model import DampedSystem, graph_seminorm
from .nonlinearity import Nonlinearity

__all__ = [
    "SubstepError",
    "NewtonError",
    "IntegrityError",
    "Schedule",
    "Trajectory",
    "linear_flow",
    "damping_substep",
    "rhs_norm",
    "integrate",
    "linearization_gain",
    "energy_balance_residual",
    "write_trajectory_csv",
    "read_trajectory_csv",
]


class SubstepError(RuntimeError):
    def __init__(self, msg, last_time):
        super().__init__(f"{msg} (last good time {last_time!r})")
        self.last_time = last_time


class NewtonError(RuntimeError):
    def __init__(self, msg, step):
        super().__init__(f"{msg} at step {step}")
        self.step = step


class IntegrityError(RuntimeError):
    """The discrete norm increased beyond round-off."""


@dataclass(frozen=True)
class Schedule:
    t_end: float
    dt: float
    sample_stride: int = 1
    substep_tol: float = 1e-10

    def __post_init__(self):
        if not (self.t_end > 0 and self.dt > 0):
            raise ValueError("t_end and dt must be positive")
        if self.dt > self.t_end:
            raise ValueError("dt must not exceed t_end")
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be a positive integer")
        if not self.substep_tol > 0:
            raise ValueError("substep_tol must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @classmethod
    def with_samples(cls, t_end, dt, samples=2000, substep_tol=1e-10) -> "Schedule":
        n = int(round(t_end / dt))
        return cls(t_end, dt, max(1, n // samples), substep_tol)


@dataclass
class Trajectory:
    """Sampled output of :func:`integrate`.

    ``xdot_norms[j]`` is the step-increment quotient ``|x_{k+1} - x_k| / dt``
    taken at the sample step ``k``; it approximates ``|x'|`` at
    ``t_k + dt/2`` to second order and is exactly non-increasing along any
    contractive one-step map.  ``dissipation[j]`` is the running value of
    ``2 int <phi(w), w> ds`` accumulated per damping substep with the
    trapezoidal rule.
    """

    times: np.ndarray
    norms: np.ndarray
    w_samples: np.ndarray
    dissipation: np.ndarray
    xdot_norms: np.ndarray
    initial_graph_seminorm: float
    final_state: np.ndarray
    method: str = "strang"
    dt: float = math.nan
    states: np.ndarray | None = None

    @property
    def t_end(self) -> float:
        return float(self.times[-1])


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def linear_flow(system: DampedSystem, x, dt: float) -> np.ndarray:
    """Exact conservative flow ``exp(A dt) x``."""
    x = system.check_state(x)
    if dt == 0:
        return x.copy()
    z = system.to_modal(x) * np.exp(-1j * system.frequencies * dt)
    return system.from_modal(z)


def rhs_norm(system: DampedSystem, phi: Nonlinearity, x) -> float:
    """``|A x - B phi(B^T x)|``."""
    x = system.check_state(x)
    w = system.input_map.T @ x
    return float(np.linalg.norm(system.apply_A(x) - system.input_map @ phi(w)))


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


class _ReducedDamping:
    """Adaptive solver for ``w' = -G phi(w)`` on ``[0, dt]``.

    Works on Python floats when ``d == 1`` and on complex numbers
    ``w1 + i w2`` when ``d == 2``, which keeps the per-stage overhead of
    the tiny system low.  Returns the end value together with the
    trapezoidal dissipation ``dt * (<phi(w0), w0> + <phi(w1), w1>)``.
    """

    def __init__(self, system: DampedSystem, phi: Nonlinearity, tol: float, shift: float = 0.0):
        # with ``shift`` the solver handles the remainder phi(w) - shift * w
        self.tol = tol
        self.scalar = system.input_dim == 1
        if self.scalar:
            g = float(system.gram[0, 0])
            f0 = phi.scalar()
            f = f0 if shift == 0.0 else (lambda w: f0(w) - shift * w)
            self.phi = f
            self.rhs = lambda w: -g * f(w)
            self.dot = lambda a, b: a * b
        else:
            (g11, g12), (_, g22) = system.gram.tolist()
            f0 = phi.planar()
            f = f0 if shift == 0.0 else (lambda w: f0(w) - shift * w)

            def rhs(w):
                v = f(w)
                return complex(-(g11 * v.real + g12 * v.imag), -(g12 * v.real + g22 * v.imag))

            self.phi = f
            self.rhs = rhs
            self.dot = lambda a, b: (a.conjugate() * b).real
        self.size = abs
        self.kinks = phi.kinks

    def solve_vec(self, w0: np.ndarray, dt: float, t_offset: float = 0.0):
        """Array in, array out; dispatches on the input dimension."""
        if self.scalar:
            w1, diss = self.solve(float(w0[0]), dt, t_offset)
            return np.array([w1]), diss
        w1, diss = self.solve(complex(w0[0], w0[1]), dt, t_offset)
        return np.array([w1.real, w1.imag]), diss

    def solve(self, w0, dt: float, t_offset: float = 0.0):
        rhs, size, tol = self.rhs, self.size, self.tol
        if size(w0) == 0.0:
            return w0, 0.0
        t, w, h = 0.0, w0, dt
        k1 = rhs(w)
        while t < dt:
            if h < 1e-14 * dt:
                raise SubstepError("damping substep step size underflow", t_offset + t)
            h = min(h, dt - t)
            a = _A
            k2 = rhs(w + h * (a[1][0] * k1))
            k3 = rhs(w + h * (a[2][0] * k1 + a[2][1] * k2))
            k4 = rhs(w + h * (a[3][0] * k1 + a[3][1] * k2 + a[3][2] * k3))
            k5 = rhs(w + h * (a[4][0] * k1 + a[4][1] * k2 + a[4][2] * k3 + a[4][3] * k4))
            k6 = rhs(w + h * (a[5][0] * k1 + a[5][1] * k2 + a[5][2] * k3 + a[5][3] * k4
                              + a[5][4] * k5))
            w_new = w + h * (a[6][0] * k1 + a[6][2] * k3 + a[6][3] * k4 + a[6][4] * k5
                             + a[6][5] * k6)
            k7 = rhs(w_new)
            e = _E
            err = h * (e[0] * k1 + e[2] * k3 + e[3] * k4 + e[4] * k5 + e[5] * k6 + e[6] * k7)
            scale = tol * (size(w) + size(w_new)) * 0.5 + tol * 1e-6 * size(w0)
            ratio = size(err) / scale
            if ratio <= 1.0:
                t += h
                w, k1 = w_new, k7
                if ratio == 0.0:
                    h *= 5.0
                else:
                    h *= min(5.0, 0.9 * ratio ** -0.2)
            else:
                h *= max(0.1, 0.9 * ratio ** -0.2)
        return w, self._trapezoid(w0, w, dt)

    def _trapezoid(self, w0, w1, dt):
        """``2 int <phi(w), w>`` over the substep by the trapezoidal rule.

        The path is taken as the chord ``w0 -> w1``; when ``|w|`` crosses a
        kink of the profile the rule is split at the interpolated crossing
        so the error stays smooth in ``dt``.
        """
        phi, dot = self.phi, self.dot
        f0 = dot(phi(w0), w0)
        f1 = dot(phi(w1), w1)
        r0, r1 = abs(w0), abs(w1)
        cuts = [(r0 - k) / (r0 - r1) for k in self.kinks
                if (r0 - k) * (r1 - k) < 0]
        if not cuts:
            return dt * (f0 + f1)
        total, a, fa = 0.0, 0.0, f0
        for c in sorted(cuts):
            wc = w0 + c * (w1 - w0)
            fc = dot(phi(wc), wc)
            total += (c - a) * (fa + fc)
            a, fa = c, fc
        total += (1.0 - a) * (fa + f1)
        return dt * total


def damping_substep(
    system: DampedSystem, phi: Nonlinearity, x, dt: float, tol: float = 1e-10
) -> np.ndarray:
    """Flow of ``y' = -B phi(B^T y)`` over ``dt``.

    Components of ``x`` orthogonal to ``range(B)`` are left untouched.
    """
    x = system.check_state(x)
    B = system.input_map
    solver = _ReducedDamping(system, phi, tol)
    w0 = B.T @ x
    w1, _ = solver.solve_vec(w0, dt)
    delta = w0 - w1
    if not np.any(delta):
        return x.copy()
    return x - B @ np.linalg.solve(system.gram, delta)


# ---------------------------------------------------------------------------
# full integration
# ---------------------------------------------------------------------------


class _Recorder:
    def __init__(self, n_samples, d, dim, record_states):
        self.times = np.empty(n_samples)
        self.norms = np.empty(n_samples)
        self.w = np.empty((n_samples, d))
        self.diss = np.empty(n_samples)
        self.xdot = np.empty(n_samples)
        self.states = np.empty((n_samples, dim)) if record_states else None
        self.j = 0

    def trim(self):
        j = self.j
        return (self.times[:j], self.norms[:j], self.w[:j], self.diss[:j], self.xdot[:j],
                None if self.states is None else self.states[:j])


def integrate(
    system: DampedSystem,
    phi: Nonlinearity,
    x0,
    schedule: Schedule,
    method: str = "strang",
    record_states: bool = False,
    gain: float | None = None,
) -> Trajectory:
    """Integrate from ``x0`` over ``schedule``.

    Parameters
    ----------
    method : {"strang", "implicit_midpoint", "linearized_strang"}
        ``strang`` composes half rotations with the damping substep;
        ``implicit_midpoint`` solves the midpoint equation, reduced to its
        d-dimensional input component, by damped Newton iteration;
        ``linearized_strang`` composes half steps of the exact linear damped
        flow with a substep for the nonlinear remainder.
    gain : float, optional
        Linearization gain for ``linearized_strang``.  Defaults to
        ``phi'(0)`` estimated from the profile at a tiny radius.

    Raises
    ------
    IntegrityError
        If the norm grows by more than ``1e-10 |x0|`` in one step.
    """
    x0 = system.check_state(x0)
    if method == "strang":
        stepper = _StrangStepper(system, phi, schedule)
    elif method == "implicit_midpoint":
        stepper = _MidpointStepper(system, phi, schedule)
    elif method == "linearized_strang":
        stepper = _LinearizedStepper(system, phi, schedule, gain)
    else:
        raise ValueError(f"unknown method {method!r}")

    dt = schedule.dt
    n_steps = schedule.n_steps
    stride = schedule.sample_stride
    n_samples = n_steps // stride + 1
    d = system.input_dim
    rec = _Recorder(n_samples, d, system.dim, record_states)
    KH = system.complex_input.conj().T
    norm0 = float(np.linalg.norm(x0))
    tol_inc = 1e-10 * norm0

    stepper.start(system.to_modal(x0))
    energy = norm0**2
    dissipation = 0.0
    final = None
    pending = None
    k = 0
    while True:
        need = pending is not None or k == n_steps or (k % stride == 0 and k <= n_steps)
        zb = stepper.boundary() if need else None
        if pending is not None:
            rec.xdot[pending] = np.linalg.norm(zb - zb_prev) / dt
            pending = None
        if k == n_steps:
            final = zb.copy()
        if k % stride == 0 and k <= n_steps:
            j = rec.j
            rec.times[j] = k * dt
            rec.norms[j] = math.sqrt(energy)
            rec.w[j] = (KH @ zb).real
            rec.diss[j] = dissipation
            if rec.states is not None:
                rec.states[j] = system.from_modal(zb)
            rec.j += 1
            pending, zb_prev = j, zb
        if k >= n_steps and pending is None:
            break
        diss = stepper.step(k)
        new_energy = stepper.energy()
        if math.sqrt(new_energy) > math.sqrt(energy) + tol_inc:
            raise IntegrityError(
                f"norm increased from {math.sqrt(energy)!r} to {math.sqrt(new_energy)!r}"
                f" at step {k}"
            )
        energy = new_energy
        if k < n_steps:
            dissipation += diss
        k += 1

    times, norms, w, dis, xdot, states = rec.trim()
    return Trajectory(
        times=times,
        norms=norms,
        w_samples=w,
        dissipation=dis,
        xdot_norms=xdot,
        initial_graph_seminorm=graph_seminorm(system, x0),
        final_state=system.from_modal(final),
        method=method,
        dt=dt,
        states=states,
    )


class _StrangStepper:
    """Keeps the state at the damping instant (mid-step), fusing half rotations."""

    def __init__(self, system, phi, schedule):
        self.system = system
        self.dt = schedule.dt
        self.K = system.complex_input
        self.KH = self.K.conj().T
        self.half = np.exp(-0.5j * system.frequencies * self.dt)
        self.full = self.half * self.half
        self.solver = _ReducedDamping(system, phi, schedule.substep_tol)
        self.scalar = system.input_dim == 1
        if self.scalar:
            self.kvec = self.K[:, 0]
            g = float(system.gram[0, 0])
            self.ginv = 1.0 / g if g > 0 else 0.0  # B = 0: nothing to undo
        else:
            self.Ginv = np.linalg.pinv(system.gram)

    def start(self, z0):
        self.z0 = z0
        self.z = None  # damped mid-step state
        self.steps_done = 0

    def boundary(self):
        if self.steps_done == 0:
            return self.z0
        return self.z * self.half

    def step(self, k):
        z = self.z0 * self.half if self.steps_done == 0 else self.z * self.full
        t0 = k * self.dt
        if self.scalar:
            w0 = float(np.vdot(self.kvec, z).real)
            w1, diss = self.solver.solve(w0, self.dt, t0)
            if w1 != w0:
                z = z - self.kvec * ((w0 - w1) * self.ginv)
        else:
            w0 = (self.KH @ z).real
            w1, diss = self.solver.solve_vec(w0, self.dt, t0)
            z = z - self.K @ (self.Ginv @ (w0 - w1))
        self.z = z
        self.steps_done += 1
        return diss

    def energy(self):
        return float(np.vdot(self.z, self.z).real)


class _MidpointStepper:
    def __init__(self, system, phi, schedule):
        self.system = system
        self.phi = phi
        self.dt = h = schedule.dt
        self.tol = schedule.substep_tol
        self.K = system.complex_input
        self.KH = self.K.conj().T
        self.a = 1.0 / (1.0 + 0.5j * h * system.frequencies)
        self.H = (self.KH @ (self.a[:, None] * self.K)).real
        self.d = system.input_dim

    def start(self, z0):
        self.z = z0.copy()
        self.steps_done = 0

    def boundary(self):
        return self.z

    def _phi_w(self, w):
        return 2.0 * float(self.phi(w) @ w)

    def step(self, k):
        h, z, phi = self.dt, self.z, self.phi
        az = self.a * z
        w_free = (self.KH @ az).real
        w = w_free.copy()
        F = w + 0.5 * h * (self.H @ phi(w)) - w_free
        scale = max(float(np.max(np.abs(w_free))), 1e-300)
        for it in range(60):
            res = float(np.max(np.abs(F)))
            if res <= self.tol * scale or res == 0.0:
                break
            J = np.eye(self.d) + 0.5 * h * self.H @ _fd_jacobian(phi, w)
            delta = np.linalg.solve(J, -F)
            lam = 1.0
            while True:
                w_try = w + lam * delta
                F_try = w_try + 0.5 * h * (self.H @ phi(w_try)) - w_free
                if np.max(np.abs(F_try)) < (1 - 1e-4 * lam) * res or lam < 1e-8:
                    break
                lam *= 0.5
            if lam < 1e-8:
                raise NewtonError("damped Newton failed to reduce the residual", k)
            w, F = w_try, F_try
        else:
            raise NewtonError("Newton iteration did not converge", k)
        z_mid = az - 0.5 * h * (self.a[:, None] * self.K) @ phi(w)
        w0 = (self.KH @ z).real
        z_new = 2.0 * z_mid - z
        w1 = (self.KH @ z_new).real
        self.z = z_new
        self.steps_done += 1
        return 0.5 * h * (self._phi_w(w0) + self._phi_w(w1))

    def energy(self):
        return float(np.vdot(self.z, self.z).real)


def linearization_gain(phi: Nonlinearity) -> float:
    """``phi'(0)`` from the profile at a tiny radius."""
    if phi.kind == "identity":
        return 1.0
    if phi.kind == "linear":
        return phi.gain
    if phi.kind == "custom":
        raise TypeError("pass an explicit gain for custom nonlinearities")
    r0 = 1e-9
    return float(phi.profile(np.array([r0]))[0] / r0)


class _LinearizedStepper:
    """Exact flow of ``A - kappa B B^T`` around a remainder substep.

    Works on the dense real state.  The linear dissipation over a half step
    is the quadratic form ``2 kappa x^T Q x`` with the finite-horizon
    Gramian ``Q = int_0^{h/2} e^{A_k^T t} B B^T e^{A_k t} dt``, obtained
    together with the propagator from one block exponential.
    """

    def __init__(self, system, phi, schedule, gain):
        self.system = system
        self.dt = h = schedule.dt
        kappa = linearization_gain(phi) if gain is None else float(gain)
        if kappa < 0:
            raise ValueError("linearization gain must be non-negative")
        self.kappa = kappa
        B = system.input_map
        n = system.dim
        Ak = system.A - kappa * (B @ B.T)
        blk = np.zeros((2 * n, 2 * n))
        blk[:n, :n] = -Ak.T
        blk[:n, n:] = B @ B.T
        blk[n:, n:] = Ak
        F = expm(0.5 * h * blk)
        self.E = F[n:, n:]
        Q = self.E.T @ F[:n, n:]
        self.Q2 = kappa * (Q + Q.T)
        self.B = B
        self.Ginv = np.linalg.pinv(system.gram)
        self.linear = phi.kind in ("identity", "linear") and abs(
            linearization_gain(phi) - kappa) == 0.0
        self.solver = _ReducedDamping(system, phi, schedule.substep_tol, shift=kappa)

    def start(self, z0):
        self.x = self.system.from_modal(z0)

    def boundary(self):
        return self.system.to_modal(self.x)

    def step(self, k):
        x = self.x
        diss = float(x @ (self.Q2 @ x))
        x = self.E @ x
        if not self.linear:
            w0 = self.B.T @ x
            w1, d = self.solver.solve_vec(w0, self.dt, k * self.dt)
            diss += d
            x = x - self.B @ (self.Ginv @ (w0 - w1))
        diss += float(x @ (self.Q2 @ x))
        self.x = self.E @ x
        return diss

    def energy(self):
        return float(self.x @ self.x)


def _fd_jacobian(phi, w):
    d = w.size
    f0 = phi(w)
    J = np.empty((d, d))
    for i in range(d):
        eps = 1e-7 * max(1.0, abs(w[i]))
        wp = w.copy()
        wp[i] += eps
        J[:, i] = (phi(wp) - f0) / eps
    return J


def energy_balance_residual(trajectory: Trajectory) -> np.ndarray:
    """``|x(t)|^2 + dissipation(t) - |x(0)|^2`` at every sample."""
    n = trajectory.norms
    return n**2 + trajectory.dissipation - n[0] ** 2


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_trajectory_csv(trajectory: Trajectory, path) -> None:
    d = trajectory.w_samples.shape[1]
    header = ["t", "norm"] + [f"w{i + 1}" for i in range(d)] + ["dissipation", "xdot_norm"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(trajectory.times.size):
            row = [trajectory.times[i], trajectory.norms[i], *trajectory.w_samples[i],
                   trajectory.dissipation[i], trajectory.xdot_norms[i]]
            writer.writerow([f"{float(v):.17g}" for v in row])


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
    if header[:2] != ["t", "norm"] or header[-2:] != ["dissipation", "xdot_norm"]:
        raise ValueError(f"unexpected trajectory header {header}")
    d = len(header) - 4
    return Trajectory(
        times=rows[:, 0],
        norms=rows[:, 1],
        w_samples=rows[:, 2:2 + d],
        dissipation=rows[:, -2],
        xdot_norms=rows[:, -1],
        initial_graph_seminorm=math.nan,
        final_state=np.empty(0),
        method="csv",
    )
