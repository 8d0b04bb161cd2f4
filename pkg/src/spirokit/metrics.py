"""Measured pulmonary-function metrics from a single forced expiration.

Conventions: volumes are absolute cumulative expired volume from the start
of the recording; back-extrapolation through the steepest volume slope only
shifts the clock used for the 1-second volume (FEV1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .cohort import Demographics, FlowSeries
from .errors import (BadConfig, FlatSignal, NoOfficialValues, NonPositiveFvc,
                     TooShort)
from .gli import GliCoefficientTable, gli_lms, lln, percent_predicted, z_score
from .signals import volume_from_flow

_QC_DEFAULT_TOLERANCE = 0.10


@dataclass(frozen=True)
class MeasuredMetrics:
    fev1_l: float
    fvc_l: float
    pef_l_per_s: float
    fef25_75_l_per_s: float
    fef75_l_per_s: float
    ratio_fev1_fvc: float

    def by_name(self) -> dict[str, float]:
        return {
            "fev1": self.fev1_l,
            "fvc": self.fvc_l,
            "pef": self.pef_l_per_s,
            "fef25_75": self.fef25_75_l_per_s,
            "fef75": self.fef75_l_per_s,
            "fev1_fvc": self.ratio_fev1_fvc,
        }


@dataclass(frozen=True)
class MetricReference:
    predicted: float
    z_score: float
    lln: float
    percent_predicted: float


@dataclass(frozen=True)
class PftMetrics:
    measured: MeasuredMetrics
    reference: dict[str, MetricReference]


def start_of_test(flow: FlowSeries) -> float:
    """Back-extrapolated time zero, clamped into [0, time of peak flow]."""
    f = flow.flow_l_per_s
    pef = float(np.max(f))
    if pef <= 0:
        raise FlatSignal("peak flow is not positive")
    m = int(np.argmax(f))
    t_m = m * flow.sample_period_s
    v = volume_from_flow(flow)
    t0 = t_m - v[m] / pef
    return float(min(max(t0, 0.0), t_m))


def _crossing_time(times: np.ndarray, volume: np.ndarray, target: float) -> float:
    idx = int(np.searchsorted(volume, target))
    if idx == 0:
        return float(times[0])
    if idx >= volume.size:
        return float(times[-1])
    v0, v1 = volume[idx - 1], volume[idx]
    if v1 == v0:
        return float(times[idx])
    frac = (target - v0) / (v1 - v0)
    return float(times[idx - 1] + frac * (times[idx] - times[idx - 1]))


def compute_measured(flow: FlowSeries) -> MeasuredMetrics:
    t0 = start_of_test(flow)  # raises FlatSignal on dead input
    times = flow.times_s
    volume = volume_from_flow(flow)
    fvc = float(volume[-1])
    if fvc <= 0:
        raise NonPositiveFvc(f"total expired volume {fvc} <= 0")
    if times[-1] - t0 < 1.0:
        raise TooShort(f"only {times[-1] - t0:.3f} s after start of test")

    f = flow.flow_l_per_s
    pef = float(np.max(f))
    fev1 = float(np.interp(t0 + 1.0, times, volume))
    t25 = _crossing_time(times, volume, 0.25 * fvc)
    t75 = _crossing_time(times, volume, 0.75 * fvc)
    fef25_75 = 0.5 * fvc / (t75 - t25) if t75 > t25 else float("inf")
    fef75 = float(np.interp(t75, times, f))
    return MeasuredMetrics(
        fev1_l=fev1, fvc_l=fvc, pef_l_per_s=pef,
        fef25_75_l_per_s=fef25_75, fef75_l_per_s=fef75,
        ratio_fev1_fvc=fev1 / fvc)


def compute_pft(flow: FlowSeries, demographics: Demographics,
                table: GliCoefficientTable) -> PftMetrics:
    """Measured metrics plus predicted / z-score / LLN / %predicted per metric."""
    measured = compute_measured(flow)
    reference = {}
    for name, value in measured.by_name().items():
        if name not in table.metrics():
            continue
        lms = gli_lms(name, demographics, table)
        reference[name] = MetricReference(
            predicted=lms.M,
            z_score=z_score(value, lms),
            lln=lln(lms),
            percent_predicted=percent_predicted(value, lms))
    return PftMetrics(measured=measured, reference=reference)


_QC_ALIASES = {
    "fev1": "fev1", "fev1_l": "fev1", "fvc": "fvc", "fvc_l": "fvc",
    "pef": "pef", "pef_l_per_s": "pef", "fef25_75": "fef25_75",
    "fef25_75_l_per_s": "fef25_75", "fef75": "fef75",
    "fef75_l_per_s": "fef75", "ratio": "fev1_fvc", "fev1_fvc": "fev1_fvc",
    "ratio_fev1_fvc": "fev1_fvc",
}


def qc_check(computed: MeasuredMetrics, official: dict[str, float],
             tolerance: float = _QC_DEFAULT_TOLERANCE) -> dict[str, bool]:
    """Relative-error check per metric; the tolerance boundary is inclusive."""
    values = computed.by_name()
    results = {}
    for key, official_value in official.items():
        name = _QC_ALIASES.get(key.strip().lower())
        if name is None:
            continue
        # inclusive boundary, with float-rounding headroom
        ok = abs(values[name] - official_value) <= tolerance * abs(official_value) * (1 + 1e-9)
        results[name] = bool(ok)
    if not any(name in results for name in ("fev1", "fvc", "pef")):
        raise NoOfficialValues("official metrics must include one of FEV1/FVC/PEF")
    return results


@dataclass(frozen=True)
class GoldThresholds:
    obstruction_ratio_threshold: float = 0.70
    obstruction_criterion: str = "fixed_ratio"  # or "lln"
    stage_cutpoints_percent_predicted: tuple[float, ...] = (80.0, 50.0, 30.0)

    def __post_init__(self):
        cuts = tuple(self.stage_cutpoints_percent_predicted)
        object.__setattr__(self, "stage_cutpoints_percent_predicted", cuts)
        if any(b >= a for a, b in zip(cuts, cuts[1:])):
            raise BadConfig("stage cut-points must be strictly decreasing")
        if self.obstruction_criterion not in ("fixed_ratio", "lln"):
            raise BadConfig(f"unknown obstruction criterion {self.obstruction_criterion!r}")

    @classmethod
    def from_json(cls, path: str | Path) -> "GoldThresholds":
        cfg = json.loads(Path(path).read_text())
        return cls(
            obstruction_ratio_threshold=float(cfg["obstruction_ratio_threshold"]),
            obstruction_criterion=cfg.get("obstruction_criterion", "fixed_ratio"),
            stage_cutpoints_percent_predicted=tuple(
                cfg["stage_cutpoints_percent_predicted"]))

    @classmethod
    def bundled(cls) -> "GoldThresholds":
        ref = resources.files("spirokit.data").joinpath("gold_thresholds.json")
        with resources.as_file(ref) as path:
            return cls.from_json(path)


def gold_stage(percent_predicted_fev1: float, ratio: float,
               thresholds: GoldThresholds) -> int | None:
    """Severity stage 1-4 when obstructed (ratio below threshold), else None."""
    if not (np.isfinite(percent_predicted_fev1) and np.isfinite(ratio)):
        raise ValueError("inputs must be finite")
    if ratio >= thresholds.obstruction_ratio_threshold:
        return None
    stage = 1
    for cut in thresholds.stage_cutpoints_percent_predicted:
        if percent_predicted_fev1 >= cut:
            return stage
        stage += 1
    return stage


def is_obstructed(metrics: PftMetrics, thresholds: GoldThresholds) -> bool:
    """Obstruction per the configured criterion (fixed ratio or ratio < LLN)."""
    ratio = metrics.measured.ratio_fev1_fvc
    if thresholds.obstruction_criterion == "lln":
        ref = metrics.reference.get("fev1_fvc")
        if ref is not None:
            return ratio < ref.lln
    return ratio < thresholds.obstruction_ratio_threshold
