"""Single-joint exoskeleton plant, PD + gravity-compensation control and
numerical checks of the closed loop's Lyapunov structure.

Joint angle ``q`` is elbow flexion in radians (0 = forearm hanging), torques
in N*m, inertia in kg*m^2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Trajectory
from .errors import Divergence, LyapunovViolation, NonPositiveInertia

G_ACC = 9.81
QDOT_MAX = 50.0
TAU_MAX = 9.0


@dataclass(frozen=True)
class PlantModel:
    """``m(q) = a0 + a1 sin q``; gravity from the carried load at ``l_m`` plus
    the link's own mass at ``l_c``; ``c(q, qd) = m'(q) qd / 2``."""

    a0: float = 0.06
    a1: float = 0.0
    m_load: float = 0.0
    l_m: float = 0.3
    m_link: float = 0.5
    l_c: float = 0.12
    g_acc: float = G_ACC

    def __post_init__(self):
        if not self.a0 > abs(self.a1):
            raise NonPositiveInertia(f"need a0 > |a1| for positive inertia, got a0={self.a0}, a1={self.a1}")

    def inertia(self, q):
        return self.a0 + self.a1 * np.sin(q)

    def inertia_slope(self, q):
        return self.a1 * np.cos(q)

    def inertia_rate(self, q, qd):
        """Total time derivative of m(q(t))."""
        return self.inertia_slope(q) * qd

    def coriolis(self, q, qd):
        return 0.5 * self.inertia_slope(q) * qd

    def gravity(self, q):
        return (self.m_load * self.l_m + self.m_link * self.l_c) * self.g_acc * np.sin(q)

    def potential(self, q):
        return (self.m_load * self.l_m + self.m_link * self.l_c) * self.g_acc * (1.0 - np.cos(q))

    def energy(self, q, qd):
        return 0.5 * self.inertia(q) * qd * qd + self.potential(q)


@dataclass(frozen=True)
class GravityCompensator:
    """Load-only feedforward ``m_hat * g * l_m * sin q``."""

    m_hat: float = 0.0
    l_m: float = 0.3
    g_acc: float = G_ACC

    def __post_init__(self):
        if self.m_hat < 0 or not self.l_m > 0:
            raise ValueError("need m_hat >= 0 and l_m > 0")

    def torque(self, q):
        return self.m_hat * self.g_acc * self.l_m * np.sin(q)

    def error(self, plant: PlantModel, q):
        """Compensation error ``g(q) - g_hat(q)``."""
        return plant.gravity(q) - self.torque(q)


@dataclass(frozen=True)
class ControllerGains:
    kp: float
    kd: float

    def __post_init__(self):
        if not (self.kp > 0 and self.kd > 0):
            raise ValueError(f"gains must be positive, got kp={self.kp}, kd={self.kd}")


@dataclass(frozen=True)
class Controller:
    """PD + gravity compensation.

    ``velocity_error="setpoint"`` uses ``e_dot = -qd`` (reference treated as
    piecewise constant); ``"reference"`` uses ``qd_ref - qd``. ``hold``
    chooses whether the torque is recomputed at every Runge-Kutta stage
    (``"stage"``) or held over the whole step (``"zoh"``).
    """

    gains: ControllerGains
    comp: GravityCompensator = field(default_factory=GravityCompensator)
    tau_max: float | None = TAU_MAX
    velocity_error: str = "setpoint"
    hold: str = "stage"

    def __post_init__(self):
        if self.velocity_error not in ("setpoint", "reference"):
            raise ValueError(f"unknown velocity_error {self.velocity_error!r}")
        if self.hold not in ("stage", "zoh"):
            raise ValueError(f"unknown hold {self.hold!r}")

    def error_rate(self, qd, qd_ref=0.0):
        return -qd if self.velocity_error == "setpoint" else qd_ref - qd

    def torque(self, q, qd, q_ref, qd_ref=0.0):
        return pd_gravity_torque(self.gains, self.comp, q, qd, q_ref, qd_ref,
                                 self.tau_max, self.velocity_error)


def pd_gravity_torque(gains: ControllerGains, comp: GravityCompensator, q_r, qd_r, q_d, qd_d=0.0,
                      tau_max: float | None = TAU_MAX, velocity_error: str = "setpoint"):
    """``g_hat(q) + kp*e + kd*e_dot``, saturated to ``+-tau_max``."""
    e = q_d - q_r
    e_dot = -qd_r if velocity_error == "setpoint" else qd_d - qd_r
    tau = comp.torque(q_r) + gains.kp * e + gains.kd * e_dot
    if tau_max is not None:
        tau = np.clip(tau, -tau_max, tau_max)
    return tau


def dynamics_rhs(plant: PlantModel, q_r, qd_r, tau_r):
    """``(qd, qdd)`` with ``qdd = (tau - c*qd - g) / m``."""
    m = plant.inertia(q_r)
    if np.any(m <= 0):
        raise NonPositiveInertia(f"inertia {m} at q={q_r}")
    qdd = (tau_r - plant.coriolis(q_r, qd_r) * qd_r - plant.gravity(q_r)) / m
    return qd_r, qdd


def step_rk4(plant: PlantModel, controller: Controller | None, state, q_d=0.0, qd_d=0.0,
             dt: float = 1e-3, qd_max: float = QDOT_MAX):
    """Classical RK4 step of ``(q, qd)``; ``controller=None`` means zero torque."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    q, qd = state
    if controller is None:
        def tau(_q, _qd):
            return 0.0
    elif controller.hold == "zoh":
        held = controller.torque(q, qd, q_d, qd_d)

        def tau(_q, _qd):
            return held
    else:
        def tau(_q, _qd):
            return controller.torque(_q, _qd, q_d, qd_d)

    def f(x, v):
        return dynamics_rhs(plant, x, v, tau(x, v))

    k1q, k1v = f(q, qd)
    k2q, k2v = f(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v)
    k3q, k3v = f(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v)
    k4q, k4v = f(q + dt * k3q, qd + dt * k3v)
    q_new = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    qd_new = qd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    if not (abs(qd_new) <= qd_max):
        raise Divergence(f"joint velocity {qd_new:.3g} rad/s exceeds {qd_max} rad/s")
    return q_new, qd_new


def simulate_free(plant: PlantModel, init_state, duration: float, dt: float):
    """Unactuated motion; returns ``(t, q, qd)`` arrays."""
    n = int(round(duration / dt))
    q = np.empty(n + 1)
    qd = np.empty(n + 1)
    q[0], qd[0] = init_state
    for k in range(n):
        q[k + 1], qd[k + 1] = step_rk4(plant, None, (q[k], qd[k]), dt=dt)
    return np.arange(n + 1) * dt, q, qd


@dataclass(frozen=True)
class SimTrace:
    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    q_d: np.ndarray
    qd_d: np.ndarray
    tau: np.ndarray
    e: np.ndarray
    e_dot: np.ndarray
    V: np.ndarray
    saturated: np.ndarray
    dt: float

    def __len__(self):
        return self.t.size

    @property
    def rms_error(self) -> float:
        return float(np.sqrt(np.mean(self.e ** 2)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "q_r", "qd_r", "q_d", "tau", "e", "V"])
            for row in zip(self.t, self.q, self.qd, self.q_d, self.tau, self.e, self.V):
                w.writerow([repr(float(x)) for x in row])

    def write_plot_data(self, directory, stem: str = "trace"):
        """Two-column ``t value`` files for the desired/actual angle and error."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, values in (("desired", self.q_d), ("actual", self.q), ("error", self.e)):
            p = directory / f"{stem}_{name}.dat"
            with open(p, "w") as fh:
                for t, v in zip(self.t, values):
                    fh.write(f"{float(t)!r} {float(v)!r}\n")
            paths[name] = p
        return paths


def resample_reference(reference, dt: float):
    """Reference angles and rates on a grid of spacing ``dt``.

    Accepts a Trajectory (linearly interpolated) or a sequence already
    sampled at ``dt``.
    """
    if isinstance(reference, Trajectory):
        t_src = reference.times
        n = int(round(t_src[-1] / dt)) + 1
        t = np.arange(n) * dt
        q = np.interp(t, t_src, reference.angles)
    else:
        q = np.asarray(reference, dtype=np.float64).reshape(-1)
        t = np.arange(q.size) * dt
    qd = np.gradient(q, dt) if q.size > 1 else np.zeros_like(q)
    qd[np.abs(np.diff(q, prepend=q[0])) == 0] = 0.0
    return t, q, qd


def simulate_tracking(plant: PlantModel, gains: ControllerGains, comp: GravityCompensator, reference,
                      init_state=(0.0, 0.0), dt: float = 1e-3, *, tau_max: float | None = TAU_MAX,
                      velocity_error: str = "setpoint", hold: str = "stage") -> SimTrace:
    """Closed-loop rollout following ``reference`` sample by sample.

    ``V = m(q) e_dot^2 / 2 + kp e^2 / 2`` is recorded at every sample.
    """
    controller = Controller(gains, comp, tau_max, velocity_error, hold)
    t, q_d, qd_d = resample_reference(reference, dt)
    n = t.size
    q = np.empty(n)
    qd = np.empty(n)
    tau = np.empty(n)
    q[0], qd[0] = init_state
    for k in range(n):
        tau[k] = controller.torque(q[k], qd[k], q_d[k], qd_d[k])
        if k + 1 < n:
            q[k + 1], qd[k + 1] = step_rk4(plant, controller, (q[k], qd[k]), q_d[k], qd_d[k], dt)
    e = q_d - q
    e_dot = controller.error_rate(qd, qd_d)
    V = 0.5 * plant.inertia(q) * e_dot ** 2 + 0.5 * gains.kp * e ** 2
    unsat = comp.torque(q) + gains.kp * e + gains.kd * e_dot
    saturated = np.zeros(n, dtype=bool) if tau_max is None else np.abs(unsat) > tau_max
    return SimTrace(t, q, qd, q_d, qd_d, tau, e, e_dot, V, saturated, dt)


def step_reference(target: float, duration: float, dt: float = 1e-3) -> np.ndarray:
    return np.full(int(round(duration / dt)) + 1, float(target))


# ---------------------------------------------------------------------------
# stability checks

# 7-point central difference, sixth-order accurate
_STENCIL = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0


def central_derivative(y: np.ndarray, dt: float) -> np.ndarray:
    """Derivative at samples 3..n-4 (NaN at the edges)."""
    y = np.asarray(y, dtype=np.float64)
    out = np.full_like(y, np.nan)
    if y.size >= 7:
        out[3:-3] = np.correlate(y, _STENCIL, mode="valid") / dt
    return out


def regulation_mask(trace: SimTrace, margin: int = 3, settle: int = 0) -> np.ndarray:
    """Samples inside constant-reference, unsaturated runs.

    ``margin`` samples are dropped at both ends of each run (stencil reach)
    and ``settle`` more at its start (fast transient after a reference jump).
    """
    n = len(trace)
    ok = ~trace.saturated.copy()
    ok[1:] &= trace.q_d[1:] == trace.q_d[:-1]
    ok[0] = False
    mask = np.zeros(n, dtype=bool)
    start = None
    for k in range(n + 1):
        if k < n and ok[k]:
            start = k if start is None else start
            continue
        if start is not None:
            lo, hi = start + margin + settle, k - 1 - margin
            if hi >= lo:
                mask[lo:hi + 1] = True
            start = None
    return mask


def settling_samples(trace: SimTrace, plant: PlantModel, gains: ControllerGains, n_tau: float = 10.0) -> int:
    """Samples spanning ``n_tau`` fast time constants ``m_max / kd``."""
    m_max = float(np.max(plant.inertia(trace.q)))
    return int(np.ceil(n_tau * m_max / gains.kd / trace.dt))


@dataclass
class LyapunovReport:
    n_checked: int
    v_min: float
    fraction_nonincreasing: float
    max_rate_mismatch: float
    transient_rate_mismatch: float
    max_skew_residual: float
    final_abs_error: float
    passed: bool
    first_violation: int | None = None
    message: str = ""


def check_lyapunov(trace: SimTrace, plant: PlantModel, gains: ControllerGains,
                   comp: GravityCompensator | None = None, *, decrease_tol: float = 1e-9,
                   min_fraction: float = 0.99, match_tol: float | None = None,
                   skew_tol: float = 1e-12, settle_tau: float = 10.0,
                   strict: bool = True) -> LyapunovReport:
    """Numerically verify the closed loop's Lyapunov structure on a trace.

    Checks (i) ``V >= 0``; (ii) on regulation samples, the differentiated
    ``V`` is ``<= decrease_tol`` at ``min_fraction`` of samples (only asserted
    when the compensation error vanishes) and equals
    ``-kd e_dot^2 + dg e_dot`` within ``match_tol`` (default ``dt**2``)
    once ``settle_tau`` fast time constants have passed since the segment
    began, since the stencil cannot resolve the initial boundary layer;
    (iii) ``|m_dot - 2c| <= skew_tol`` at every sample.
    """
    comp = comp or GravityCompensator(0.0, plant.l_m)
    match_tol = trace.dt ** 2 if match_tol is None else match_tol
    mask = regulation_mask(trace)
    V_dot = central_derivative(trace.V, trace.dt)
    dg = comp.error(plant, trace.q)
    expected = -gains.kd * trace.e_dot ** 2 + dg * trace.e_dot
    skew = np.abs(plant.inertia_rate(trace.q, trace.qd) - 2.0 * plant.coriolis(trace.q, trace.qd))
    idx = np.flatnonzero(mask)
    settled = np.flatnonzero(regulation_mask(trace, settle=settling_samples(trace, plant, gains, settle_tau)))
    full_mismatch = np.abs(V_dot[idx] - expected[idx])
    mismatch = np.abs(V_dot[settled] - expected[settled])
    nonincreasing = V_dot[idx] <= decrease_tol
    frac = float(nonincreasing.mean()) if idx.size else 1.0
    exact_comp = bool(np.all(np.abs(dg) < 1e-12))

    first, msg = None, ""
    if np.any(trace.V < 0):
        first = int(np.flatnonzero(trace.V < 0)[0])
        msg = f"V negative at sample {first}"
    elif np.any(skew > skew_tol):
        first = int(np.flatnonzero(skew > skew_tol)[0])
        msg = f"|m_dot - 2c| = {skew[first]:.3g} at sample {first}"
    elif settled.size and np.any(mismatch > match_tol):
        first = int(settled[np.flatnonzero(mismatch > match_tol)[0]])
        msg = f"V_dot deviates from -kd*e_dot^2 + dg*e_dot by {np.abs(V_dot[first] - expected[first]):.3g} at sample {first}"
    elif exact_comp and frac < min_fraction:
        first = int(idx[np.flatnonzero(~nonincreasing)[0]])
        msg = f"V increases at {100 * (1 - frac):.2f}% of regulation samples (first at {first})"
    report = LyapunovReport(int(idx.size), float(trace.V.min()), frac,
                            float(mismatch.max()) if settled.size else 0.0,
                            float(full_mismatch.max()) if idx.size else 0.0, float(skew.max()),
                            float(abs(trace.e[-1])), first is None, first, msg)
    if strict and not report.passed:
        raise LyapunovViolation(msg, first)
    return report
