"""Per-OGTT estimation of secretion capacity (sigma) and insulin sensitivity (S_I).

Two stages: a seeded multi-start bounded local search over the MSE surface
sets chain initial values and a refined prior box, then random-walk
Metropolis-Hastings chains sample the posterior inside that box. The point
estimate comes from the chain whose posterior-mean fit has the lowest MSE.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.optimize import minimize

from . import config as _config
from .integrator import IntegrationError, SolverConfig, integrate, sample_at
from .model import GUT, N_STATE, P_SI, ModelParams, fasting_glucose, rhs_vec, _fasting_insulin

log = logging.getLogger(__name__)

PARAM_NAMES = ("sigma", "SI")


class EstimationError(RuntimeError):
    pass


class MismatchedTimepoints(ValueError):
    pass


class AllStartsFailed(EstimationError):
    pass


class SimulationError(EstimationError):
    def __init__(self, theta, cause):
        super().__init__(f"simulation failed at sigma={theta[0]!r}, S_I={theta[1]!r}: {cause}")
        self.theta = tuple(theta)
        self.cause = cause


@dataclass(frozen=True)
class EstimationConfig:
    bounds_sigma: tuple = (0.0, 5000.0)
    bounds_SI: tuple = (0.0, 5.0)
    n_chains: int = 3
    n_iter: int = 10000
    burn_in: int = 5000
    step_coeff: float = 0.1
    include_insulin: bool = True
    noise_sd_glucose: float = 5.0     # mg/dL
    noise_sd_insulin: float = 2.0     # uU/mL
    rng_seed: int = 0
    presearch_starts: int = 8
    presearch_maxfev: int = 300       # per start
    box_factor: float = 10.0
    aggregate: str = "selected"       # or "pooled"
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8

    def __post_init__(self):
        for name in ("bounds_sigma", "bounds_SI"):
            lo, hi = getattr(self, name)
            if not (0 <= lo < hi and math.isfinite(hi)):
                raise ValueError(f"{name} must satisfy 0 <= lower < upper < inf")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 < self.burn_in < self.n_iter:
            raise ValueError("need 0 < burn_in < n_iter")
        if not self.step_coeff > 0:
            raise ValueError("step_coeff must be > 0")
        if not (self.noise_sd_glucose > 0 and self.noise_sd_insulin > 0):
            raise ValueError("noise scales must be > 0")
        if self.presearch_starts < 1 or self.presearch_maxfev < 1:
            raise ValueError("presearch budget must be positive")
        if not self.box_factor > 1:
            raise ValueError("box_factor must be > 1")
        if self.aggregate not in ("selected", "pooled"):
            raise ValueError("aggregate must be 'selected' or 'pooled'")

    @property
    def bounds(self) -> np.ndarray:
        return np.array([self.bounds_sigma, self.bounds_SI])

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(rel_tol=self.rel_tol, abs_tol=self.abs_tol)

    def with_(self, **changes) -> "EstimationConfig":
        return replace(self, **changes)

    def to_document(self) -> dict:
        d = asdict(self)
        d["bounds_sigma"] = list(self.bounds_sigma)
        d["bounds_SI"] = list(self.bounds_SI)
        return {"kind": _config.ESTIMATION_KIND, "version": _config.SCHEMA_VERSION, "config": d}

    @classmethod
    def from_document(cls, doc: dict) -> "EstimationConfig":
        body = dict(doc["config"])
        for k in ("bounds_sigma", "bounds_SI"):
            if k in body:
                body[k] = tuple(body[k])
        return cls(**body)

    @property
    def hash(self) -> str:
        return _config.digest(self.to_document())


@dataclass(frozen=True, eq=False)
class Observation:
    """Measured OGTT values; ``insulin`` holds NaN where not measured."""

    times: np.ndarray
    glucose: np.ndarray
    insulin: np.ndarray

    @classmethod
    def from_maps(cls, glucose: dict, insulin: dict | None = None) -> "Observation":
        times = np.array(sorted(glucose), dtype=np.float64)
        g = np.array([glucose[t] for t in sorted(glucose)], dtype=np.float64)
        insulin = insulin or {}
        i = np.array([insulin.get(t, np.nan) for t in sorted(glucose)], dtype=np.float64)
        return cls(times, g, i)


def simulate_ogtt(theta, record_times, params: ModelParams, cfg: SolverConfig | None = None):
    """Predicted (glucose, insulin) at ``record_times`` for theta = (sigma, S_I).

    Starts from the meal-free steady state for theta with the dose placed in
    the gut at t = 0.
    """
    sigma, s_i = float(theta[0]), float(theta[1])
    times = np.asarray(record_times, dtype=np.float64)
    p = params.vector.copy()
    p[P_SI] = s_i
    g0 = fasting_glucose(sigma, p)
    y0 = np.empty(N_STATE)
    y0[:] = (g0, _fasting_insulin(g0, sigma, p), params.gamma_0, sigma, params.beta_0, 0.0)
    y0[GUT] = params.meal_params[0] * 1000.0
    t_end = float(times.max())
    if t_end <= 0.0:
        return np.full(times.shape, y0[0]), np.full(times.shape, y0[1])
    try:
        traj = integrate(rhs_vec, y0, 0.0, t_end, cfg or SolverConfig(), args=p)
    except IntegrationError as exc:
        raise SimulationError((sigma, s_i), exc) from exc
    y = sample_at(traj, times)
    return y[:, 0], y[:, 1]


def _weighted_residuals(pred, obs: Observation, include_insulin: bool, cfg: EstimationConfig):
    pred_g, pred_i = pred
    if len(pred_g) != len(obs.times):
        raise MismatchedTimepoints(f"{len(pred_g)} predictions for {len(obs.times)} timepoints")
    r = [(np.asarray(pred_g) - obs.glucose) / cfg.noise_sd_glucose]
    if include_insulin:
        have = ~np.isnan(obs.insulin)
        r.append((np.asarray(pred_i)[have] - obs.insulin[have]) / cfg.noise_sd_insulin)
    return np.concatenate(r)


def loss_mse(pred, obs: Observation, include_insulin: bool, cfg: EstimationConfig) -> float:
    """Mean of squared noise-scaled residuals over the terms in use.

    ``pred`` is a (glucose, insulin) pair aligned with ``obs.times``;
    unmeasured insulin contributes nothing.
    """
    r = _weighted_residuals(pred, obs, include_insulin, cfg)
    return float(np.mean(r * r))


def in_box(theta, box) -> bool:
    return bool(box[0, 0] <= theta[0] <= box[0, 1] and box[1, 0] <= theta[1] <= box[1, 1])


def log_posterior(theta, obs: Observation, cfg: EstimationConfig, params: ModelParams,
                  box=None) -> float:
    """Gaussian log-likelihood (up to a constant) under a uniform prior on ``box``."""
    box = cfg.bounds if box is None else np.asarray(box)
    if not (in_box(theta, box) and theta[0] > 0 and theta[1] > 0):
        return -math.inf
    try:
        pred = simulate_ogtt(theta, obs.times, params, cfg.solver)
    except SimulationError as exc:
        log.warning("%s", exc)
        return -math.inf
    r = _weighted_residuals(pred, obs, cfg.include_insulin, cfg)
    return -0.5 * float(r @ r)


@dataclass(frozen=True, eq=False)
class PresearchResult:
    inits: np.ndarray      # (n_chains, 2)
    box: np.ndarray        # (2, 2) rows: sigma, SI; cols: lower, upper
    optima: np.ndarray     # (n_starts, 2), sorted by loss
    losses: np.ndarray


def _seed(*key) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(k) for k in key])


def presearch(obs: Observation, cfg: EstimationConfig, params: ModelParams,
              seed_key=()) -> PresearchResult:
    """Multi-start bounded Nelder-Mead on log(theta) minimising ``loss_mse``.

    Returns one initial point per chain (the best distinct optima) and a
    prior box: the global box shrunk ``box_factor``-fold in each parameter,
    centred on the best optimum and clipped to the global bounds.
    """
    bounds = cfg.bounds
    upper = bounds[:, 1]
    lower = np.maximum(bounds[:, 0], upper * 1e-4)
    log_lo, log_hi = np.log(lower), np.log(upper)
    rng = np.random.default_rng(_seed(cfg.rng_seed, *seed_key, 1_000_003))
    starts = log_lo + (log_hi - log_lo) * rng.random((cfg.presearch_starts, 2))

    def objective(u):
        theta = np.exp(u)
        try:
            pred = simulate_ogtt(theta, obs.times, params, cfg.solver)
        except SimulationError:
            return 1e300
        return loss_mse(pred, obs, cfg.include_insulin, cfg)

    optima, losses = [], []
    for u0 in starts:
        res = minimize(objective, u0, method="Nelder-Mead", bounds=list(zip(log_lo, log_hi)),
                       options={"maxfev": cfg.presearch_maxfev, "xatol": 1e-6, "fatol": 1e-10})
        if res.fun < 1e300:
            optima.append(np.exp(res.x))
            losses.append(float(res.fun))
    if not optima:
        raise AllStartsFailed("every presearch start hit an integrator failure")
    order = np.argsort(losses, kind="stable")
    optima = np.array(optima)[order]
    losses = np.array(losses)[order]
    best = optima[0]
    half = (bounds[:, 1] - bounds[:, 0]) / (2.0 * cfg.box_factor)
    box = np.column_stack([np.maximum(bounds[:, 0], best - half),
                           np.minimum(bounds[:, 1], best + half)])

    def distinct(x):
        return all(np.any(np.abs(x - q) > 1e-6 * np.abs(q)) for q in inits)

    inits = [best]
    for cand in optima[1:]:
        if len(inits) == cfg.n_chains:
            break
        # far optima clip onto the box edge; two may land on the same point
        cand = np.clip(cand, box[:, 0], box[:, 1])
        if distinct(cand):
            inits.append(cand)
    width = box[:, 1] - box[:, 0]
    k = 1
    while len(inits) < cfg.n_chains:
        # not enough distinct optima: fan out deterministically around the best
        sign = 1.0 if k % 2 else -1.0
        cand = np.clip(best + sign * 0.01 * k * width, box[:, 0], box[:, 1])
        if distinct(cand):
            inits.append(cand)
        k += 1
    return PresearchResult(np.array(inits), box, optima, losses)


@dataclass(frozen=True, eq=False)
class Chain:
    samples: np.ndarray        # (n_iter, 2)
    log_post: np.ndarray       # (n_iter,)
    accepted: np.ndarray       # (n_iter,) bool
    seed: tuple

    @property
    def n_accepted(self) -> int:
        return int(self.accepted.sum())

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / len(self.accepted)


def metropolis(log_target, init, box, step_sd, n_iter: int, rng: np.random.Generator):
    """Random-walk Metropolis with Gaussian proposals; out-of-box proposals
    are rejected without evaluating ``log_target``."""
    box = np.asarray(box, dtype=np.float64)
    step_sd = np.asarray(step_sd, dtype=np.float64)
    cur = np.array(init, dtype=np.float64)
    if not in_box(cur, box):
        raise ValueError(f"initial point {cur} is outside the box")
    lp = log_target(cur)
    dim = cur.size
    samples = np.empty((n_iter, dim))
    lps = np.empty(n_iter)
    acc = np.zeros(n_iter, dtype=bool)
    for it in range(n_iter):
        prop = cur + step_sd * rng.standard_normal(dim)
        log_u = math.log(rng.random())
        if in_box(prop, box):
            lp_prop = log_target(prop)
            if lp_prop > -math.inf and log_u < lp_prop - lp:
                cur, lp = prop, lp_prop
                acc[it] = True
        samples[it] = cur
        lps[it] = lp
    return samples, lps, acc


def mh_chain(init, obs: Observation, cfg: EstimationConfig, chain_seed, params: ModelParams,
             box=None) -> Chain:
    """One chain of ``cfg.n_iter`` iterations; proposal sd per parameter is
    ``step_coeff`` times the box width."""
    box = cfg.bounds if box is None else np.asarray(box)
    seed = tuple(int(s) for s in np.atleast_1d(chain_seed))
    rng = np.random.default_rng(_seed(*seed))
    step_sd = cfg.step_coeff * (box[:, 1] - box[:, 0])
    samples, lps, acc = metropolis(lambda th: log_posterior(th, obs, cfg, params, box),
                                   init, box, step_sd, cfg.n_iter, rng)
    return Chain(samples, lps, acc, seed)


@dataclass(frozen=True, eq=False)
class EstimationResult:
    sigma: float
    SI: float
    sigma_SI: float
    selected_chain: int
    chain_mse: tuple
    chain_means: np.ndarray
    chains: tuple
    include_insulin: bool
    config_hash: str
    box: np.ndarray
    inits: np.ndarray
    aggregate: str = "selected"


def run_estimation(obs: Observation, cfg: EstimationConfig, params: ModelParams,
                   seed_key=()) -> EstimationResult:
    """Presearch, ``n_chains`` Metropolis chains, then min-MSE chain selection.

    ``seed_key`` (integers) is mixed into every random stream so different
    tests under one ``rng_seed`` draw independent numbers.
    """
    pre = presearch(obs, cfg, params, seed_key)
    chains = [mh_chain(pre.inits[c], obs, cfg, (cfg.rng_seed, *seed_key, c), params, pre.box)
              for c in range(cfg.n_chains)]
    means = np.array([ch.samples[cfg.burn_in:].mean(axis=0) for ch in chains])
    mses = []
    for m in means:
        try:
            mses.append(loss_mse(simulate_ogtt(m, obs.times, params, cfg.solver), obs,
                                 cfg.include_insulin, cfg))
        except SimulationError as exc:
            log.warning("%s", exc)
            mses.append(math.inf)
    selected = int(np.argmin(mses))  # first index wins ties
    if cfg.aggregate == "pooled":
        est = np.concatenate([ch.samples[cfg.burn_in:] for ch in chains]).mean(axis=0)
    else:
        est = means[selected]
    sigma, s_i = float(est[0]), float(est[1])
    return EstimationResult(sigma, s_i, sigma * s_i, selected, tuple(mses), means, tuple(chains),
                            cfg.include_insulin, cfg.hash, pre.box, pre.inits, cfg.aggregate)


@dataclass(frozen=True, eq=False)
class DiagnosticReport:
    traces: dict              # parameter -> (n_chains, n_iter) array
    acceptance_rates: tuple
    rhat: dict                # parameter -> split R-hat


def split_rhat(draws) -> float:
    """Split R-hat over an (n_chains, n_draws) array of post-burn-in draws."""
    draws = np.asarray(draws, dtype=np.float64)
    n = draws.shape[1] // 2
    if n < 2:
        raise ValueError("need at least 4 draws per chain")
    halves = np.concatenate([draws[:, :n], draws[:, draws.shape[1] - n:]])
    w = halves.var(axis=1, ddof=1).mean()
    b = n * halves.mean(axis=1).var(ddof=1)
    if w == 0.0:
        return 1.0 if b == 0.0 else math.inf
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def chain_diagnostics(chains, burn_in: int = 0) -> DiagnosticReport:
    if len(chains) < 2:
        raise ValueError("diagnostics need at least two chains")
    traces = {name: np.array([ch.samples[:, k] for ch in chains])
              for k, name in enumerate(PARAM_NAMES)}
    rhat = {name: split_rhat(tr[:, burn_in:]) for name, tr in traces.items()}
    return DiagnosticReport(traces, tuple(ch.acceptance_rate for ch in chains), rhat)


TRACE_COLUMNS = ("chain", "iteration", "sigma", "SI", "log_posterior", "accepted")


def write_traces(chains, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for c, ch in enumerate(chains):
            for it in range(len(ch.log_post)):
                w.writerow([c, it, repr(float(ch.samples[it, 0])), repr(float(ch.samples[it, 1])),
                            repr(float(ch.log_post[it])), int(ch.accepted[it])])
