"""Normal / impaired / diabetic classification from OGTT glucose and HbA1c."""
from __future__ import annotations

import enum
import math


class NoCriterionTimepoints(ValueError):
    pass


class ImplausibleValue(ValueError):
    pass


class DiseaseClass(enum.IntEnum):
    NORMAL = 0
    IMPAIRED_GLUCOSE = 1
    DIABETES = 2

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def from_label(cls, text: str) -> "DiseaseClass":
        for member, label in _LABELS.items():
            if label == text:
                return member
        raise ValueError(f"unknown disease class {text!r}")


_LABELS = {
    DiseaseClass.NORMAL: "Normal",
    DiseaseClass.IMPAIRED_GLUCOSE: "ImpairedGlucose",
    DiseaseClass.DIABETES: "Diabetes",
}

FASTING, ONE_HOUR, TWO_HOUR = 0, 60, 120

# (max value still in the lower class) per criterion timepoint, whole mg/dL
_THRESHOLDS = {
    FASTING: ((99, DiseaseClass.NORMAL), (125, DiseaseClass.IMPAIRED_GLUCOSE)),
    ONE_HOUR: ((154, DiseaseClass.NORMAL),),
    TWO_HOUR: ((139, DiseaseClass.NORMAL), (199, DiseaseClass.IMPAIRED_GLUCOSE)),
}
_TOP_CLASS = {FASTING: DiseaseClass.DIABETES, ONE_HOUR: DiseaseClass.IMPAIRED_GLUCOSE,
              TWO_HOUR: DiseaseClass.DIABETES}


def _lab_round(value: float) -> int:
    # whole mg/dL with halves rounded up, as lab reports do
    return math.floor(value + 0.5)


def classify_timepoint(timepoint: int, glucose: float) -> DiseaseClass:
    v = _lab_round(glucose)
    for upper, cls in _THRESHOLDS[timepoint]:
        if v <= upper:
            return cls
    return _TOP_CLASS[timepoint]


def classify_glucose(glucose: dict) -> DiseaseClass:
    """Worst class over the fasting, 1 h and 2 h values present in ``glucose``
    (a timepoint-minutes -> mg/dL map); other timepoints are ignored."""
    present = [t for t in (FASTING, ONE_HOUR, TWO_HOUR) if t in glucose]
    if not present:
        raise NoCriterionTimepoints("need a fasting, 1 hour or 2 hour glucose value")
    return max(classify_timepoint(t, glucose[t]) for t in present)


def classify_ogtt(record) -> DiseaseClass:
    return classify_glucose(record.glucose)


def classify_hba1c(value: float) -> DiseaseClass:
    if not (0 < value < 20):
        raise ImplausibleValue(f"HbA1c {value!r}% outside (0, 20)")
    if value < 5.7:
        return DiseaseClass.NORMAL
    if value < 6.5:
        return DiseaseClass.IMPAIRED_GLUCOSE
    return DiseaseClass.DIABETES
