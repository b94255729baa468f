"""Adaptive Dormand-Prince 4(5) solver with 4th-order dense output.

Same tableau and step-size controller family as MATLAB's ode45. The stepping
loop is compiled with numba when the right-hand side is itself a numba
function; plain Python callables run the identical loop uncompiled.

A right-hand side has the signature ``f(t, y, args) -> dy`` where ``y`` and
``dy`` are 1-D float arrays and ``args`` is a float array of coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from numba.core.registry import CPUDispatcher

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
], dtype=np.float64)
_B = _A[6].copy()
# 5th-order weights minus embedded 4th-order weights
_E = np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# dense output: y(t + x h) = y + h * K^T P [x, x^2, x^3, x^4]
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
], dtype=np.float64)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0

OK, UNDERFLOW, MAX_STEPS, NONFINITE = 0, 1, 2, 3


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t: float):
        super().__init__(f"{message} at t={t!r}")
        self.t = t


class StepSizeUnderflow(IntegrationError):
    pass


class MaxStepsExceeded(IntegrationError):
    pass


class NonFiniteDerivative(IntegrationError):
    pass


class TimeOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    initial_step: float = 0.0  # 0 selects automatically
    max_step: float = np.inf
    max_steps: int = 100000

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be > 0")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be > 0")
        if self.initial_step < 0 or not self.max_step > 0:
            raise ValueError("initial_step must be >= 0 and max_step > 0")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Accepted steps of one integration. Arrays are read-only."""

    t: np.ndarray        # (n+1,)
    y: np.ndarray        # (n+1, d)
    q: np.ndarray        # (n, d, 4) dense-output coefficients, already scaled by h
    n_accepted: int
    n_rejected: int
    n_fev: int

    @property
    def t0(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])


@njit(cache=True)
def _rms_norm(err, scale):
    s = 0.0
    for i in range(err.shape[0]):
        r = err[i] / scale[i]
        s += r * r
    return np.sqrt(s / err.shape[0])


@njit(cache=True)
def _all_finite(x):
    for v in x.ravel():
        if not np.isfinite(v):
            return False
    return True


def _dopri_py(f, y0, t0, t1, args, rtol, atol, h_init, max_step, max_steps, A, B, C, E, P):
    d = y0.shape[0]
    cap = 64
    ts = np.empty(cap + 1)
    ys = np.empty((cap + 1, d))
    qs = np.empty((cap, d, 4))
    ts[0] = t0
    ys[0] = y0
    n = 0
    n_rej = 0
    t = t0
    y = y0.copy()
    f0 = f(t, y, args)
    nfev = 1
    if not _all_finite(f0):
        return NONFINITE, t, ts[:1], ys[:1], qs[:0], n, n_rej, nfev
    span = t1 - t0
    if h_init > 0.0:
        h = h_init
    else:
        # Hairer, Norsett & Wanner starting step (Solving ODEs I, II.4)
        scale = atol + np.abs(y0) * rtol
        d0 = _rms_norm(y0, scale)
        d1 = _rms_norm(f0, scale)
        h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
        h0 = min(h0, span)
        f1 = f(t0 + h0, y0 + h0 * f0, args)
        nfev += 1
        d2 = _rms_norm(f1 - f0, scale) / h0
        if d1 <= 1e-15 and d2 <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** 0.2
        h = min(100.0 * h0, h1, span)
    h = min(h, max_step)
    K = np.empty((7, d))
    last_nonfinite = False
    step_rejected = False
    while t < t1:
        min_step = 10.0 * np.abs(np.nextafter(t, np.inf) - t)
        if h > t1 - t:
            h = t1 - t
        if h < min_step:
            if last_nonfinite:
                return NONFINITE, t, ts[:n + 1], ys[:n + 1], qs[:n], n, n_rej, nfev
            return UNDERFLOW, t, ts[:n + 1], ys[:n + 1], qs[:n], n, n_rej, nfev
        if n >= max_steps:
            return MAX_STEPS, t, ts[:n + 1], ys[:n + 1], qs[:n], n, n_rej, nfev
        K[0] = f0
        for s in range(1, 6):
            dy = np.zeros(d)
            for j in range(s):
                if A[s, j] != 0.0:
                    dy += A[s, j] * K[j]
            K[s] = f(t + C[s] * h, y + h * dy, args)
        dy = np.zeros(d)
        for j in range(6):
            if B[j] != 0.0:
                dy += B[j] * K[j]
        y_new = y + h * dy
        t_new = t + h
        if t1 - t_new <= min_step:
            t_new = t1
        K[6] = f(t_new, y_new, args)
        nfev += 6
        if not _all_finite(K):
            last_nonfinite = True
            step_rejected = True
            n_rej += 1
            h *= _MIN_FACTOR
            continue
        err = np.zeros(d)
        for j in range(7):
            if E[j] != 0.0:
                err += E[j] * K[j]
        err *= h
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        norm = _rms_norm(err, scale)
        if norm <= 1.0 and np.isfinite(norm):
            if norm == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = min(_MAX_FACTOR, _SAFETY * norm ** -0.2)
            if step_rejected:
                factor = min(factor, 1.0)
            if n >= cap:
                cap *= 2
                ts2 = np.empty(cap + 1)
                ys2 = np.empty((cap + 1, d))
                qs2 = np.empty((cap, d, 4))
                ts2[:n + 1] = ts[:n + 1]
                ys2[:n + 1] = ys[:n + 1]
                qs2[:n] = qs[:n]
                ts, ys, qs = ts2, ys2, qs2
            for i in range(d):
                for c in range(4):
                    acc = 0.0
                    for j in range(7):
                        acc += K[j, i] * P[j, c]
                    qs[n, i, c] = h * acc
            n += 1
            ts[n] = t_new
            ys[n] = y_new
            t = t_new
            y = y_new
            f0 = K[6].copy()
            last_nonfinite = False
            step_rejected = False
            h = min(h * factor, max_step)
        else:
            step_rejected = True
            n_rej += 1
            if np.isfinite(norm):
                h *= max(_MIN_FACTOR, _SAFETY * norm ** -0.2)
            else:
                h *= _MIN_FACTOR
    return OK, t, ts[:n + 1], ys[:n + 1], qs[:n], n, n_rej, nfev


_dopri = njit(_dopri_py)
# inlined at IR level so a caller passing a global jitted rhs gets a static call
# and can be cached
dopri_inline = njit(inline="always")(_dopri_py)

# rhs -> jitted solver with the rhs bound at compile time. Caching _dopri itself
# is unsafe: its index would key on dispatcher types that may be collected.
_SPECIALIZED: dict = {}


def register_specialized(rhs, solver) -> None:
    """Route ``integrate(rhs, ...)`` to ``solver(y0, t0, ..., P)`` (no rhs argument)."""
    _SPECIALIZED[rhs] = solver


def integrate(rhs, y0, t0: float, t_end: float, cfg: SolverConfig | None = None,
              args=None) -> Trajectory:
    """Integrate ``dy/dt = rhs(t, y, args)`` from ``t0`` to ``t_end``.

    Raises StepSizeUnderflow, MaxStepsExceeded or NonFiniteDerivative, each
    carrying the time at which the solver gave up.
    """
    cfg = cfg or SolverConfig()
    y0 = np.array(y0, dtype=np.float64).ravel()
    if not t_end > t0:
        raise ValueError(f"t_end ({t_end}) must be > t0 ({t0})")
    if not np.all(np.isfinite(y0)):
        raise ValueError("y0 must be finite")
    args = np.zeros(0) if args is None else np.asarray(args, dtype=np.float64)
    solver = _SPECIALIZED.get(rhs)
    if solver is None:
        core = _dopri if isinstance(rhs, CPUDispatcher) else _dopri_py
        solver = lambda *a: core(rhs, *a)  # noqa: E731
    status, t_fail, ts, ys, qs, n, n_rej, nfev = solver(
        y0, float(t0), float(t_end), args, cfg.rel_tol, cfg.abs_tol,
        float(cfg.initial_step), float(cfg.max_step), int(cfg.max_steps),
        _A, _B, _C, _E, _P)
    if status == UNDERFLOW:
        raise StepSizeUnderflow("step size fell below machine resolution", float(t_fail))
    if status == MAX_STEPS:
        raise MaxStepsExceeded(f"more than {cfg.max_steps} steps", float(t_fail))
    if status == NONFINITE:
        raise NonFiniteDerivative("right-hand side returned a non-finite value", float(t_fail))
    ts, ys, qs = ts.copy(), ys.copy(), qs.copy()
    for a in (ts, ys, qs):
        a.flags.writeable = False
    return Trajectory(ts, ys, qs, int(n), int(n_rej), int(nfev))


def sample_at(traj: Trajectory, times) -> np.ndarray:
    """States at ``times`` (shape ``(len(times), d)``) by dense output.

    Times that coincide with an accepted step return the stored state.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    ts = traj.t
    bad = (times < ts[0]) | (times > ts[-1]) | ~np.isfinite(times)
    if bad.any():
        raise TimeOutOfRange(f"times {times[bad].tolist()} outside [{ts[0]}, {ts[-1]}]")
    out = np.empty((times.size, traj.y.shape[1]))
    idx = np.searchsorted(ts, times, side="right") - 1
    for k, (t, i) in enumerate(zip(times, idx)):
        if ts[i] == t:
            out[k] = traj.y[i]
            continue
        h = ts[i + 1] - ts[i]
        x = (t - ts[i]) / h
        out[k] = traj.y[i] + traj.q[i] @ np.array([x, x * x, x ** 3, x ** 4])
    return out
