"""Synthetic OGTT cohorts with known (sigma, S_I) for validating the pipeline."""
from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .estimator import EstimationConfig, simulate_ogtt
from .ingestion import HbA1c, OgttRecord
from .model import ModelParams

# (sigma range, S_I range) per archetype; calibrated against the OGTT classifier
DEFAULT_ARCHETYPES = {
    "normal": {"sigma": (1000.0, 2500.0), "SI": (0.9, 1.6)},
    "impaired": {"sigma": (450.0, 1000.0), "SI": (0.35, 0.6)},
    "diabetic": {"sigma": (150.0, 450.0), "SI": (0.15, 0.45)},
}

TRUTH_COLUMNS = ("patient_id", "test_date", "sigma_true", "SI_true")


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int = 20
    tests_per_patient: int = 2
    archetypes: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_ARCHETYPES.items()})
    archetype_weights: dict = field(default_factory=lambda: {"normal": 1.0, "impaired": 1.0, "diabetic": 1.0})
    timepoints: tuple = (0, 30, 120)
    noise_sd_glucose: float = 0.0
    noise_sd_insulin: float = 0.0
    insulin_missing_prob: float = 0.0
    hba1c_prob: float = 0.0
    seed: int = 0
    start_year: int = 2005

    def __post_init__(self):
        if self.n_patients < 1 or self.tests_per_patient < 1:
            raise ValueError("need at least one patient and one test per patient")
        for p in (self.insulin_missing_prob, self.hba1c_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.noise_sd_glucose < 0 or self.noise_sd_insulin < 0:
            raise ValueError("noise SDs must be >= 0")
        if 0 not in self.timepoints:
            raise ValueError("timepoints must include the fasting draw (0)")
        object.__setattr__(self, "timepoints", tuple(int(t) for t in self.timepoints))
        bounds = EstimationConfig()
        for name, ranges in self.archetypes.items():
            for key, (lo, hi) in (("sigma", ranges["sigma"]), ("SI", ranges["SI"])):
                glo, ghi = bounds.bounds_sigma if key == "sigma" else bounds.bounds_SI
                if not glo < lo <= hi < ghi:
                    raise ValueError(f"archetype {name}: {key} range must lie inside ({glo}, {ghi})")
        if set(self.archetype_weights) - set(self.archetypes):
            raise ValueError("archetype_weights names an unknown archetype")
        if not sum(self.archetype_weights.values()) > 0:
            raise ValueError("archetype weights must sum to > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["timepoints"] = list(self.timepoints)
        d["archetypes"] = {k: {p: list(r) for p, r in v.items()} for k, v in self.archetypes.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "archetypes" in d:
            d["archetypes"] = {k: {p: tuple(r) for p, r in v.items()} for k, v in d["archetypes"].items()}
        if "timepoints" in d:
            d["timepoints"] = tuple(d["timepoints"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TruthRow:
    patient_id: str
    test_date: dt.date
    sigma_true: float
    SI_true: float
    archetype: str


def _patient_id(i: int, n: int) -> str:
    return f"P{i + 1:0{max(3, len(str(n)))}d}"


def generate_cohort(spec: SynthSpec, params: ModelParams):
    """Simulate every test at its drawn truth, then add Gaussian assay noise.

    Returns (records, truth rows, HbA1c list). Each patient draws from its
    own stream seeded by (seed, patient index).
    """
    names = sorted(spec.archetype_weights)
    w = np.array([spec.archetype_weights[n] for n in names], dtype=np.float64)
    w /= w.sum()
    times = np.array(spec.timepoints, dtype=np.float64)
    records, truth, hba1c = [], [], []
    for i in range(spec.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        pid = _patient_id(i, spec.n_patients)
        for k in range(spec.tests_per_patient):
            arch = names[int(rng.choice(len(names), p=w))]
            rs, ri = spec.archetypes[arch]["sigma"], spec.archetypes[arch]["SI"]
            sigma = float(rng.uniform(*rs))
            s_i = float(rng.uniform(*ri))
            date = dt.date(spec.start_year + k, 1 + i % 12, 15)
            g, ins = simulate_ogtt((sigma, s_i), times, params)
            g_obs = g + spec.noise_sd_glucose * rng.standard_normal(g.size)
            i_obs = np.maximum(ins + spec.noise_sd_insulin * rng.standard_normal(ins.size), 0.0)
            keep_ins = rng.random() >= spec.insulin_missing_prob
            hb_draw = rng.random()
            hb_noise = rng.standard_normal()
            glucose = {int(t): float(v) for t, v in zip(spec.timepoints, g_obs)}
            insulin = {int(t): float(v) for t, v in zip(spec.timepoints, i_obs)} if keep_ins else {}
            hb = None
            if hb_draw < spec.hba1c_prob:
                # eAG relation: mean glucose = 28.7 * A1c - 46.7, fasting value as the proxy
                hb = round(float((g[0] + 46.7) / 28.7 + 0.2 * hb_noise), 1)
                hba1c.append(HbA1c(pid, date, hb))
            records.append(OgttRecord(pid, date, glucose, insulin, hb, date if hb is not None else None))
            truth.append(TruthRow(pid, date, sigma, s_i, arch))
    return records, truth, hba1c


def write_truth(truth, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for t in truth:
            w.writerow([t.patient_id, t.test_date.isoformat(), repr(t.sigma_true), repr(t.SI_true)])


def read_truth(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["patient_id"], dt.date.fromisoformat(r["test_date"])):
                (float(r["sigma_true"]), float(r["SI_true"])) for r in csv.DictReader(fh)}
