"""Glucose, insulin and beta-cell ODE system used to simulate an OGTT.

State layout (all arrays handed to the integrator use this order)::

    0 G         glucose, mg/dL
    1 I         plasma insulin, uU/mL
    2 gamma     K(ATP) secretion shift, dimensionless
    3 sigma     secretion capacity, uU/mg/day
    4 beta      beta-cell mass, mg
    5 meal_gut  glucose left in the gut, mg

Time is in minutes. ``S_I`` and ``sigma`` keep the per-day units of the
longitudinal model they come from (mL/uU/day and uU/mg/day) so that the
estimator bounds read naturally; the right-hand side converts them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from functools import cached_property

import numpy as np
from numba import njit

from .integrator import dopri_inline, register_specialized

MIN_PER_DAY = 1440.0

G, I, GAMMA, SIGMA, BETA, GUT = range(6)
N_STATE = 6

# parameter vector layout
(P_SI, P_EGO, P_K, P_V, P_AISR, P_KISR, P_AM, P_KM, P_TGAM, P_TSIG, P_TBETA,
 P_GI_MAX, P_GI_SLOPE, P_GI_MID,
 P_SI_MAX, P_SI_ISR_SLOPE, P_SI_ISR_MID, P_SI_M_SLOPE, P_SI_M_MID,
 P_PR_MAX, P_PR_SLOPE, P_PR_MID,
 P_AP_MAX, P_AP_SLOPE, P_AP_MID,
 P_HGP_MAX, P_HGP_ALPHA, P_HGP_FLOOR,
 P_DOSE, P_KGUT, P_CONV,
 P_GAMMA0, P_BETA0) = range(33)
N_PARAMS = 33


@dataclass(frozen=True)
class ModelState:
    G: float
    I: float
    gamma: float
    sigma: float
    beta: float
    meal_gut: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.G, self.I, self.gamma, self.sigma, self.beta, self.meal_gut],
                        dtype=np.float64)

    @classmethod
    def from_array(cls, y) -> "ModelState":
        return cls(*(float(v) for v in y[:N_STATE]))


@dataclass(frozen=True)
class ModelParams:
    """Coefficients of the ODE system.

    Only ``S_I`` (and the initial ``sigma`` state) are estimated; everything
    else is a nominal value loaded from the parameter document.
    """

    S_I: float = 0.8               # mL/uU/day
    E_GO: float = 0.001            # 1/min
    k: float = 0.3                 # 1/min
    V: float = 14.0                # mL per mg of beta-cell mass scale
    alpha_ISR: float = 0.6
    k_ISR: float = 4.0
    alpha_M: float = 150.0         # mg/dL
    k_M: float = 2.0
    tau_gamma: float = 7200.0      # min
    tau_sigma: float = 360000.0    # min (250 days)
    tau_beta: float = 12340800.0   # min (8570 days)
    gamma_inf_params: tuple = (0.2, 0.05, 150.0)                  # max, slope, midpoint
    sigma_inf_params: tuple = (2500.0, 0.02, 100.0, 10.0, 0.6)    # max, ISR slope/mid, M slope/mid
    prolif_params: tuple = (1.0, 0.02, 100.0)
    apoptosis_params: tuple = (1.0, 10.0, 0.3)
    hgp_params: tuple = (0.62, 20.0, 0.05)                         # max (mg/dL/min), alpha (uU/mL), floor
    meal_params: tuple = (75.0, 0.02, 0.006)                       # dose g, k_gut 1/min, 1/dL
    gamma_0: float = 0.01
    beta_0: float = 1000.0         # mg

    def __post_init__(self):
        positive = ("E_GO", "k", "V", "alpha_ISR", "alpha_M", "tau_gamma", "tau_sigma", "tau_beta")
        for name in positive:
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        if self.S_I < 0:
            raise ValueError("S_I must be >= 0")
        if self.k_ISR < 1 or self.k_M < 1:
            raise ValueError("Hill exponents k_ISR, k_M must be >= 1")
        sizes = {"gamma_inf_params": 3, "sigma_inf_params": 5, "prolif_params": 3,
                 "apoptosis_params": 3, "hgp_params": 3, "meal_params": 3}
        for name, n in sizes.items():
            v = getattr(self, name)
            if len(v) != n:
                raise ValueError(f"{name} needs {n} coefficients, got {len(v)}")
            object.__setattr__(self, name, tuple(float(x) for x in v))
        hgp_max, hgp_alpha, hgp_floor = self.hgp_params
        if hgp_max < 0 or hgp_alpha <= 0 or hgp_floor < 0:
            raise ValueError("hgp_params must be (max >= 0, alpha > 0, floor >= 0)")
        dose, k_gut, conv = self.meal_params
        if dose < 0 or k_gut <= 0 or conv <= 0:
            raise ValueError("meal_params must be (dose >= 0, k_gut > 0, conversion > 0)")
        if self.gamma_0 < 0 or self.beta_0 < 0:
            raise ValueError("gamma_0 and beta_0 must be >= 0")

    @cached_property
    def vector(self) -> np.ndarray:
        v = np.array([
            self.S_I, self.E_GO, self.k, self.V, self.alpha_ISR, self.k_ISR, self.alpha_M,
            self.k_M, self.tau_gamma, self.tau_sigma, self.tau_beta,
            *self.gamma_inf_params, *self.sigma_inf_params, *self.prolif_params,
            *self.apoptosis_params, *self.hgp_params, *self.meal_params,
            self.gamma_0, self.beta_0,
        ], dtype=np.float64)
        v.flags.writeable = False
        return v

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model parameters: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# -- jitted kernels -----------------------------------------------------------

@njit(cache=True)
def _logistic(x, vmax, slope, mid):
    return vmax / (1.0 + np.exp(-slope * (x - mid)))


@njit(cache=True)
def _metabolism(g, p):
    g = max(g, 0.0)
    gk = g ** p[P_KM]
    return gk / (p[P_AM] ** p[P_KM] + gk)


@njit(cache=True)
def _isr(m, gamma, sigma, p):
    x = max(m + gamma, 0.0)
    xk = x ** p[P_KISR]
    return sigma * xk / (p[P_AISR] ** p[P_KISR] + xk)


@njit(cache=True)
def _hgp(ins, p):
    a = p[P_HGP_ALPHA]
    return p[P_HGP_MAX] * a / (a + max(ins, 0.0)) + p[P_HGP_FLOOR]


@njit(cache=True)
def _gamma_inf(g, p):
    return _logistic(g, p[P_GI_MAX], p[P_GI_SLOPE], p[P_GI_MID])


@njit(cache=True)
def _sigma_inf(isr, m, p):
    up = _logistic(isr, 1.0, p[P_SI_ISR_SLOPE], p[P_SI_ISR_MID])
    down = _logistic(m, 1.0, p[P_SI_M_SLOPE], p[P_SI_M_MID])
    return p[P_SI_MAX] * up * (1.0 - down)


@njit(cache=True)
def _prolif(isr, p):
    return _logistic(isr, p[P_PR_MAX], p[P_PR_SLOPE], p[P_PR_MID])


@njit(cache=True)
def _apoptosis(m, p):
    return _logistic(m, p[P_AP_MAX], p[P_AP_SLOPE], p[P_AP_MID])


@njit(cache=True)
def rhs_vec(t, y, p):
    """Right-hand side on raw arrays; ``p`` is ``ModelParams.vector``."""
    g = y[G]
    ins = y[I]
    gam = y[GAMMA]
    sig = y[SIGMA]
    bet = y[BETA]
    gut = y[GUT]
    m = _metabolism(g, p)
    isr = _isr(m, gam, sig, p)
    dy = np.empty(N_STATE)
    meal = p[P_KGUT] * gut * p[P_CONV]
    dy[G] = meal + _hgp(ins, p) - (p[P_EGO] + p[P_SI] / MIN_PER_DAY * ins) * g
    dy[I] = bet * isr / (MIN_PER_DAY * p[P_V]) - p[P_K] * ins
    dy[GAMMA] = (_gamma_inf(g, p) - gam) / p[P_TGAM]
    dy[SIGMA] = (_sigma_inf(isr, m, p) - sig) / p[P_TSIG]
    dy[BETA] = (_prolif(isr, p) - _apoptosis(m, p)) * bet / p[P_TBETA]
    dy[GUT] = -p[P_KGUT] * gut
    return dy


@njit(cache=True)
def _solve_rhs_vec(y0, t0, t1, args, rtol, atol, h_init, max_step, max_steps, A, B, C, E, P):
    return dopri_inline(rhs_vec, y0, t0, t1, args, rtol, atol, h_init, max_step, max_steps, A, B, C, E, P)


register_specialized(rhs_vec, _solve_rhs_vec)


@njit(cache=True)
def _fasting_insulin(g, sigma, p):
    m = _metabolism(g, p)
    isr = _isr(m, p[P_GAMMA0], sigma, p)
    return p[P_BETA0] * isr / (MIN_PER_DAY * p[P_V] * p[P_K])


@njit(cache=True)
def _fasting_balance(g, sigma, p):
    ins = _fasting_insulin(g, sigma, p)
    return _hgp(ins, p) - (p[P_EGO] + p[P_SI] / MIN_PER_DAY * ins) * g


@njit(cache=True)
def fasting_glucose(sigma, p):
    """Root of the meal-free glucose balance; the balance is strictly
    decreasing in G so bisection on [0, hgp(0)/E_GO] always brackets it."""
    lo = 0.0
    hi = _hgp(0.0, p) / p[P_EGO] + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _fasting_balance(mid, sigma, p) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


# -- public scalar API ---------------------------------------------------------

def metabolism(G: float, params: ModelParams) -> float:
    """Beta-cell metabolic activity, a Hill function of glucose in [0, 1)."""
    if G < 0:
        raise ValueError("G must be >= 0")
    return float(_metabolism(float(G), params.vector))


def isr(M: float, gamma: float, sigma: float, params: ModelParams) -> float:
    """Insulin secretion rate per unit beta-cell mass (uU/mg/day).

    Saturating Hill form in ``M + gamma`` scaled by ``sigma``.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return float(_isr(float(M), float(gamma), float(sigma), params.vector))


def hgp(I: float, params: ModelParams) -> float:
    """Hepatic glucose production (mg/dL/min), suppressed by insulin."""
    if I < 0:
        raise ValueError("I must be >= 0")
    return float(_hgp(float(I), params.vector))


def meal_rate(t: float, params: ModelParams) -> float:
    """Oral glucose appearance rate (mg/dL/min) for a dose given at t = 0.

    Single gut compartment emptying at ``k_gut``; integrates to
    ``dose * 1000 * conversion`` mg/dL.
    """
    if t < 0:
        return 0.0
    dose, k_gut, conv = params.meal_params
    return k_gut * dose * 1000.0 * conv * math.exp(-k_gut * t)


def gamma_inf(G: float, params: ModelParams) -> float:
    return float(_gamma_inf(float(G), params.vector))


def sigma_inf(isr_value: float, M: float, params: ModelParams) -> float:
    return float(_sigma_inf(float(isr_value), float(M), params.vector))


def proliferation(isr_value: float, params: ModelParams) -> float:
    return float(_prolif(float(isr_value), params.vector))


def apoptosis(M: float, params: ModelParams) -> float:
    return float(_apoptosis(float(M), params.vector))


def rhs(t: float, state: ModelState, params: ModelParams) -> ModelState:
    """Time derivative of ``state``; raises on non-finite components."""
    y = state.as_array()
    if not np.all(np.isfinite(y)):
        raise ValueError(f"non-finite state component in {state}")
    return ModelState.from_array(rhs_vec(float(t), y, params.vector))


def fasting_state(sigma: float, params: ModelParams) -> ModelState:
    """Meal-free steady state of glucose and insulin for a given ``sigma``.

    ``params.S_I`` is used as is; gamma and beta sit at their configured
    slow-state values and the gut is empty.
    """
    p = params.vector
    g = float(fasting_glucose(float(sigma), p))
    ins = float(_fasting_insulin(g, float(sigma), p))
    return ModelState(G=g, I=ins, gamma=params.gamma_0, sigma=float(sigma),
                      beta=params.beta_0, meal_gut=0.0)


def dosed_state(state: ModelState, params: ModelParams) -> ModelState:
    """``state`` with the oral glucose dose placed in the gut (t = 0+)."""
    return replace(state, meal_gut=params.meal_params[0] * 1000.0)
