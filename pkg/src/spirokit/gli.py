"""LMS reference equations: predicted values, z-scores, and lower limits.

A metric's reference distribution is summarized by the LMS triple
(M median, S coefficient of variation, L Box-Cox power).  Coefficients are
not hardcoded: they are loaded from a CSV table whose rows carry, per
(metric, sex, param), an intercept, log-height and log-age coefficients,
and an optional age spline given as knot/value pairs.  M and S are modeled
on the log scale (exponentiated after summing terms); L is modeled on the
natural scale.  Age splines are interpolated with a monotone piecewise
cubic (PCHIP), so interpolated corrections never overshoot their knots.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .cohort import Demographics
from .errors import LlnUndefined, MissingMetric, NonPositiveMeasured, OutOfRange

LLN_Z = -1.645  # 5th percentile
_L_LIMIT = 1e-6  # below this |L|, use the log-limit forms

METRICS = ("fev1", "fvc", "fev1_fvc", "pef", "fef25_75", "fef75")


@dataclass(frozen=True)
class LmsTriple:
    M: float
    S: float
    L: float

    def __post_init__(self):
        if not (self.M > 0 and self.S > 0):
            raise ValueError("LMS triple requires M > 0 and S > 0")


class _ParamModel:
    def __init__(self, intercept: float, coef_ln_height: float, coef_ln_age: float,
                 knot_ages: tuple[float, ...], knot_values: tuple[float, ...]):
        self.intercept = intercept
        self.coef_ln_height = coef_ln_height
        self.coef_ln_age = coef_ln_age
        self.knot_ages = knot_ages
        self.knot_values = knot_values
        self._spline = (PchipInterpolator(np.asarray(knot_ages), np.asarray(knot_values))
                        if len(knot_ages) >= 2 else None)

    def evaluate(self, ln_height: float, ln_age: float, age: float) -> float:
        total = (self.intercept + self.coef_ln_height * ln_height
                 + self.coef_ln_age * ln_age)
        if self._spline is not None:
            total += float(self._spline(age))
        elif self.knot_ages:
            total += self.knot_values[0]
        return total


class GliCoefficientTable:
    """Per-(metric, sex) LMS coefficient models with age coverage bounds."""

    def __init__(self, models: dict[tuple[str, str, str], _ParamModel],
                 age_range: tuple[float, float] = (4.0, 110.0)):
        self._models = models
        self.age_range = age_range

    def metrics(self) -> set[str]:
        return {metric for metric, _, _ in self._models}

    def model(self, metric: str, sex: str, param: str) -> _ParamModel:
        try:
            return self._models[(metric, sex, param)]
        except KeyError:
            raise MissingMetric(
                f"table has no entry for metric={metric!r} sex={sex!r} param={param!r}"
            ) from None

    @classmethod
    def from_csv(cls, path: str | Path) -> "GliCoefficientTable":
        models = {}
        with Path(path).open(newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().lower() == "metric":
                    continue
                metric, sex, param = (row[0].strip().lower(), row[1].strip().lower(),
                                      row[2].strip().upper())
                intercept, c_h, c_a = (float(row[3]), float(row[4]), float(row[5]))
                pairs = [float(v) for v in row[6:] if v != ""]
                if len(pairs) % 2:
                    raise ValueError(f"odd knot/value count in row {row[:3]}")
                ages = tuple(pairs[0::2])
                values = tuple(pairs[1::2])
                if any(b <= a for a, b in zip(ages, ages[1:])):
                    raise ValueError(f"spline knots not strictly increasing in {row[:3]}")
                models[(metric, sex, param)] = _ParamModel(
                    intercept, c_h, c_a, ages, values)
        return cls(models)

    @classmethod
    def bundled(cls) -> "GliCoefficientTable":
        ref = resources.files("spirokit.data").joinpath("gli_lookup.csv")
        with resources.as_file(ref) as path:
            return cls.from_csv(path)


def gli_lms(metric: str, demographics: Demographics,
            table: GliCoefficientTable) -> LmsTriple:
    """LMS triple for a metric given age/sex/height."""
    metric = metric.lower()
    age, height = demographics.age, demographics.height_cm
    lo, hi = table.age_range
    if not lo <= age <= hi:
        raise OutOfRange(f"age {age} outside table coverage [{lo}, {hi}]")
    for param in ("M", "S", "L"):
        model = table.model(metric, demographics.sex, param)
        if model.knot_ages and not (model.knot_ages[0] <= age <= model.knot_ages[-1]):
            raise OutOfRange(f"age {age} outside spline coverage for {metric}/{param}")
    ln_h, ln_a = math.log(height), math.log(age)
    m_val = table.model(metric, demographics.sex, "M").evaluate(ln_h, ln_a, age)
    s_val = table.model(metric, demographics.sex, "S").evaluate(ln_h, ln_a, age)
    l_val = table.model(metric, demographics.sex, "L").evaluate(ln_h, ln_a, age)
    return LmsTriple(M=math.exp(m_val), S=math.exp(s_val), L=l_val)


def z_score(measured: float, lms: LmsTriple) -> float:
    """Box-Cox z: ((y/M)^L - 1) / (L*S), with the log limit as L -> 0."""
    if measured <= 0:
        raise NonPositiveMeasured(f"measured value must be > 0, got {measured}")
    ratio = measured / lms.M
    if abs(lms.L) < _L_LIMIT:
        return math.log(ratio) / lms.S
    return (ratio ** lms.L - 1.0) / (lms.L * lms.S)


def lln(lms: LmsTriple) -> float:
    """Value whose z-score is -1.645 (the conventional lower limit of normal)."""
    if abs(lms.L) < _L_LIMIT:
        return lms.M * math.exp(LLN_Z * lms.S)
    base = 1.0 + lms.L * lms.S * LLN_Z
    if base <= 0:
        raise LlnUndefined(
            f"1 + L*S*z = {base:.6g} <= 0; percentile undefined for this triple")
    return lms.M * base ** (1.0 / lms.L)


def percent_predicted(measured: float, lms: LmsTriple) -> float:
    return 100.0 * measured / lms.M
