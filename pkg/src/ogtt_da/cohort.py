"""Cohort-level comparisons of fitted parameters.

Covers the with/without-insulin robustness comparison (standardized
absolute differences summarised by a patient-clustered bootstrap), group
means per mode, and per-patient separation of parameter values between
disease classes.
"""
from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .diagnosis import DiseaseClass

PARAMETERS = ("sigma", "SI", "sigma_SI")


class ZeroVariance(ValueError):
    pass


class MissingMode(ValueError):
    pass


@dataclass(frozen=True)
class ParamTriple:
    sigma: float
    SI: float
    sigma_SI: float

    @classmethod
    def of(cls, sigma: float, SI: float) -> "ParamTriple":
        return cls(float(sigma), float(SI), float(sigma) * float(SI))

    def __post_init__(self):
        if self.sigma_SI != self.sigma * self.SI:
            raise ValueError("sigma_SI must equal sigma * SI")

    def get(self, name: str) -> float:
        return getattr(self, name)


def standardize(values) -> np.ndarray:
    """Center to mean 0 and scale to sample standard deviation 1."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two values")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise ZeroVariance("values have zero variance")
    return (x - x.mean()) / sd


def abs_diff_stat(with_mode: dict, without_mode: dict) -> "OrderedDict[object, dict]":
    """Per-test |z_with - z_without| for each parameter.

    Both arguments map a test key to its ParamTriple. Each parameter is
    standardized over the pooled column of both modes so the difference is
    taken on one scale. Keys come back in sorted order.
    """
    only = set(with_mode) ^ set(without_mode)
    if only:
        raise MissingMode(f"tests present in only one mode: {sorted(only, key=str)[:5]}")
    keys = sorted(with_mode)
    n = len(keys)
    out = OrderedDict((k, {}) for k in keys)
    for name in PARAMETERS:
        pooled = np.array([with_mode[k].get(name) for k in keys]
                          + [without_mode[k].get(name) for k in keys])
        z = standardize(pooled)
        d = np.abs(z[:n] - z[n:])
        for k, v in zip(keys, d):
            out[k][name] = float(v)
    return out


@dataclass(frozen=True)
class BootstrapStat:
    mean: float
    se: float
    ci_lo: float
    ci_hi: float


@dataclass(frozen=True)
class BootstrapSummary:
    stats: dict           # parameter -> BootstrapStat
    n_boot: int
    seed: int
    n_patients: int
    n_tests: int

    COLUMNS = ("parameter", "mean", "se", "ci_lo", "ci_hi")

    def rows(self):
        for name, s in self.stats.items():
            yield (name, s.mean, s.se, s.ci_lo, s.ci_hi)

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for name, *vals in self.rows():
            lines.append(",".join([name] + [repr(float(v)) for v in vals]))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"n_boot": self.n_boot, "seed": self.seed, "n_patients": self.n_patients,
                "n_tests": self.n_tests,
                "stats": {k: vars(v).copy() for k, v in self.stats.items()}}


def _clusters(patient_ids):
    ids = np.asarray(patient_ids)
    uniq = sorted(set(ids.tolist()))
    return uniq, [np.flatnonzero(ids == u) for u in uniq]


def cluster_replicates(patient_ids, n_boot: int, rng: np.random.Generator):
    """Yield (drawn patient indices, test indices) for each replicate.

    A replicate draws as many patients as there are, with replacement, and
    takes every test of each drawn patient.
    """
    uniq, members = _clusters(patient_ids)
    n = len(uniq)
    for _ in range(n_boot):
        drawn = rng.integers(0, n, size=n)
        yield drawn, np.concatenate([members[j] for j in drawn])


def bootstrap_mean(values, patient_ids, n_boot: int, rng: np.random.Generator,
                   on_replicate=None) -> BootstrapStat:
    values = np.asarray(values, dtype=np.float64)
    means = np.empty(n_boot)
    for b, (drawn, idx) in enumerate(cluster_replicates(patient_ids, n_boot, rng)):
        if on_replicate is not None:
            on_replicate(drawn, idx)
        means[b] = values[idx].mean()
    lo, hi = np.percentile(means, [2.5, 97.5])
    return BootstrapStat(float(means.mean()), float(means.std(ddof=1)), float(lo), float(hi))


def clustered_bootstrap(values: dict, patient_ids, n_boot: int = 1000, seed: int = 0,
                        on_replicate=None) -> BootstrapSummary:
    """Patient-clustered bootstrap of the mean, run separately per parameter.

    ``values`` maps a parameter name to per-test values aligned with
    ``patient_ids``. Each parameter gets its own stream derived from
    ``seed`` and its position. ``on_replicate(name, drawn, idx)`` observes
    every replicate.
    """
    patient_ids = list(patient_ids)
    if not patient_ids:
        raise ValueError("clustered bootstrap needs at least one test")
    stats = {}
    for k, (name, vals) in enumerate(values.items()):
        if len(vals) != len(patient_ids):
            raise ValueError(f"{name}: {len(vals)} values for {len(patient_ids)} tests")
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        hook = None if on_replicate is None else (lambda d, i, _n=name: on_replicate(_n, d, i))
        stats[name] = bootstrap_mean(vals, patient_ids, n_boot, rng, hook)
    return BootstrapSummary(stats, n_boot, seed, len(set(patient_ids)), len(patient_ids))


def group_means(estimates: dict) -> dict:
    """Arithmetic mean of each parameter per mode.

    ``estimates`` maps mode -> list of ParamTriple; returns mode -> {parameter: mean}.
    """
    out = {}
    for mode, triples in estimates.items():
        if not triples:
            raise ValueError(f"no estimates for mode {mode!r}")
        out[mode] = {name: float(np.mean([t.get(name) for t in triples])) for name in PARAMETERS}
    return out


class Separation(enum.Enum):
    SEPARATED = "Separated"
    NOT_SEPARATED = "NotSeparated"
    INDETERMINATE = "Indeterminate"


@dataclass(frozen=True)
class SeparationVerdict:
    verdict: Separation
    direction: tuple = ()   # classes ordered from highest to lowest values when separated
    ranges: tuple = ()      # (class, min, max) per class present

    def to_dict(self) -> dict:
        return {"verdict": self.verdict.value,
                "direction": [c.label for c in self.direction],
                "ranges": [[c.label, lo, hi] for c, lo, hi in self.ranges]}


def separation_check(values, classes) -> SeparationVerdict:
    """Whether the value ranges of every pair of disease classes are disjoint."""
    by_class: dict = {}
    for v, c in zip(values, classes):
        by_class.setdefault(DiseaseClass(c), []).append(float(v))
    ranges = tuple((c, min(vs), max(vs)) for c, vs in sorted(by_class.items()))
    if len(ranges) < 2:
        return SeparationVerdict(Separation.INDETERMINATE, (), ranges)
    for i in range(len(ranges)):
        for j in range(i + 1, len(ranges)):
            _, lo_a, hi_a = ranges[i]
            _, lo_b, hi_b = ranges[j]
            if not (hi_a < lo_b or hi_b < lo_a):
                return SeparationVerdict(Separation.NOT_SEPARATED, (), ranges)
    order = sorted(ranges, key=lambda r: -(r[1] + r[2]) / 2)
    return SeparationVerdict(Separation.SEPARATED, tuple(r[0] for r in order), ranges)
