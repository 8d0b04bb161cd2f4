"""LMS engine: predicted values, z-scores, lower limits of normal.

Expected values for the formula paths come from an independent
extended-precision evaluation (mpmath at 50 significant digits).
"""

import math

import mpmath
import numpy as np
import pytest

from spirokit.cohort import Demographics
from spirokit.errors import (LlnUndefined, MissingMetric, NonPositiveMeasured,
                             OutOfRange)
from spirokit.gli import (GliCoefficientTable, LmsTriple, gli_lms, lln,
                          percent_predicted, z_score)

mpmath.mp.dps = 50


def mp_z(measured, M, S, L):
    m, M, S, L = map(mpmath.mpf, (measured, M, S, L))
    if abs(L) < mpmath.mpf("1e-6"):
        return mpmath.log(m / M) / S
    return ((m / M) ** L - 1) / (L * S)


def _table_from_rows(tmp_path, rows):
    path = tmp_path / "table.csv"
    path.write_text("\n".join(rows) + "\n")
    return GliCoefficientTable.from_csv(path)


class TestGliLms:
    def test_zero_coefficients_give_unit_median(self, tmp_path):
        rows = [f"fev1,male,{p},0,0,0" for p in "MSL"]
        table = _table_from_rows(tmp_path, rows)
        demo = Demographics(age=40, sex="male", height_cm=170, smoker=False)
        triple = gli_lms("fev1", demo, table)
        assert triple.M == 1.0
        assert triple.S == 1.0
        assert triple.L == 0.0

    def test_constant_model_is_exp_intercept(self, tmp_path):
        rows = ["fvc,female,M,1.3,0,0", "fvc,female,S,-2.0,0,0",
                "fvc,female,L,0.5,0,0"]
        table = _table_from_rows(tmp_path, rows)
        for age, height in ((25, 160), (70, 181)):
            demo = Demographics(age=age, sex="female", height_cm=height,
                                smoker=True)
            triple = gli_lms("fvc", demo, table)
            assert triple.M == pytest.approx(math.exp(1.3), rel=1e-15)
            assert triple.S == pytest.approx(math.exp(-2.0), rel=1e-15)
            assert triple.L == 0.5

    def test_bundled_table_against_extended_precision(self):
        # age 40 sits on a spline knot of the bundled table, so the expected
        # value is intercept + coefficients + knot value, all in mpmath
        table = GliCoefficientTable.bundled()
        demo = Demographics(age=40, sex="male", height_cm=175, smoker=False)
        triple = gli_lms("fev1", demo, table)
        ln_h, ln_a = mpmath.log(mpmath.mpf(175)), mpmath.log(mpmath.mpf(40))
        exp_m = mpmath.exp(mpmath.mpf("-11.32") + mpmath.mpf("2.45") * ln_h
                           + mpmath.mpf("0.035") * ln_a + 0)
        exp_s = mpmath.exp(mpmath.mpf("-2.30") + mpmath.mpf("0.08") * ln_a + 0)
        exp_l = mpmath.mpf("0.85") + mpmath.mpf("0.02") * ln_a
        assert triple.M == pytest.approx(float(exp_m), rel=1e-12)
        assert triple.S == pytest.approx(float(exp_s), rel=1e-12)
        assert triple.L == pytest.approx(float(exp_l), rel=1e-12)

    def test_spline_interpolation_is_monotone_between_knots(self, tmp_path):
        rows = ["fev1,male,M,0,0,0,10,0.0,30,0.5,60,0.6,110,0.9",
                "fev1,male,S,-2,0,0", "fev1,male,L,1,0,0"]
        table = _table_from_rows(tmp_path, rows)
        ages = np.linspace(10, 110, 101)
        values = [gli_lms("fev1",
                          Demographics(age=a, sex="male", height_cm=170,
                                       smoker=False), table).M
                  for a in ages]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))

    def test_age_outside_coverage(self, tmp_path):
        rows = ["fev1,male,M,0,0,0,10,0.0,60,0.5", "fev1,male,S,-2,0,0",
                "fev1,male,L,1,0,0"]
        table = _table_from_rows(tmp_path, rows)
        with pytest.raises(OutOfRange):
            gli_lms("fev1", Demographics(age=80, sex="male", height_cm=170,
                                         smoker=False), table)

    def test_missing_metric(self):
        table = GliCoefficientTable.bundled()
        with pytest.raises(MissingMetric):
            gli_lms("dlco", Demographics(age=40, sex="male", height_cm=175,
                                         smoker=False), table)


class TestZScore:
    def test_measured_equals_median(self):
        triple = LmsTriple(M=3.2, S=0.12, L=0.9)
        assert z_score(3.2, triple) == 0.0

    def test_linear_case(self):
        triple = LmsTriple(M=2.0, S=0.1, L=1.0)
        assert z_score(1.1 * 2.0, triple) == pytest.approx(1.0, abs=1e-9)

    def test_against_extended_precision(self):
        triple = LmsTriple(M=3.2, S=0.12, L=0.9)
        expected = float(mp_z(2.8, 3.2, 0.12, 0.9))
        assert z_score(2.8, triple) == pytest.approx(expected, abs=1e-12)

    def test_random_tuples_against_extended_precision(self):
        rng = np.random.default_rng(21)
        for _ in range(300):
            M = rng.uniform(0.5, 6.0)
            S = rng.uniform(0.05, 0.4)
            L = rng.uniform(-2.0, 2.0)
            measured = M * rng.uniform(0.5, 1.8)
            got = z_score(measured, LmsTriple(M=M, S=S, L=L))
            expected = float(mp_z(measured, M, S, L))
            assert got == pytest.approx(expected, abs=1e-9), (measured, M, S, L)

    def test_strictly_increasing_in_measured(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            triple = LmsTriple(M=rng.uniform(0.5, 5), S=rng.uniform(0.05, 0.4),
                               L=rng.uniform(-2, 2))
            values = np.sort(rng.uniform(0.3, 3.0, size=10) * triple.M)
            scores = [z_score(v, triple) for v in values]
            assert all(b > a for a, b in zip(scores, scores[1:]))

    def test_log_limit_continuity(self):
        # the |L| < 1e-6 branch must join the power branch smoothly
        for ratio in (0.8, 1.25):
            for S in (0.1, 0.3):
                below = z_score(ratio * 2.0, LmsTriple(M=2.0, S=S, L=9.9e-7))
                above = z_score(ratio * 2.0, LmsTriple(M=2.0, S=S, L=1.01e-6))
                assert abs(below - above) < 1e-6

    def test_non_positive_measured(self):
        with pytest.raises(NonPositiveMeasured):
            z_score(0.0, LmsTriple(M=1.0, S=0.1, L=1.0))


class TestLln:
    def test_linear_closed_form(self):
        triple = LmsTriple(M=4.0, S=0.15, L=1.0)
        assert lln(triple) == pytest.approx(4.0 * (1 - 1.645 * 0.15), rel=1e-12)

    def test_inverse_consistency_1000_random_triples(self):
        rng = np.random.default_rng(99)
        checked = 0
        while checked < 1000:
            triple = LmsTriple(M=rng.uniform(0.3, 8.0),
                               S=rng.uniform(0.03, 0.45),
                               L=rng.uniform(-2.5, 2.5))
            try:
                value = lln(triple)
            except LlnUndefined:
                continue
            assert z_score(value, triple) == pytest.approx(-1.645, abs=1e-9)
            assert value < triple.M
            checked += 1

    def test_undefined_region(self):
        # 1 + L*S*(-1.645) = 1 - 2*0.5*1.645 = -0.645 <= 0
        with pytest.raises(LlnUndefined):
            lln(LmsTriple(M=1.0, S=0.5, L=2.0))
        # just inside the defined region
        assert lln(LmsTriple(M=1.0, S=0.5, L=1.2)) > 0

    def test_log_limit(self):
        triple = LmsTriple(M=2.0, S=0.2, L=0.0)
        assert lln(triple) == pytest.approx(2.0 * math.exp(-1.645 * 0.2),
                                            rel=1e-12)


def test_percent_predicted():
    triple = LmsTriple(M=4.0, S=0.1, L=1.0)
    assert percent_predicted(3.0, triple) == pytest.approx(75.0)
