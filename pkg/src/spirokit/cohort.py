"""Cohort data model: subjects, flow series, ingestion, labels, and splits.

The canonical on-disk form is one record per subject with a flow-time series
(liters/second, fixed sample period) plus demographics and an optional
COPD label.  Two file formats are supported: json-lines and CSV (flow
serialized as semicolon-joined decimals).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCohort, MalformedRecord, UnlabeledSample

SEXES = ("male", "female")
FLOW_ORIGINS = ("measured", "synthetic", "derived_from_volume")

AGE_RANGE = (4.0, 110.0)
HEIGHT_RANGE_CM = (80.0, 230.0)

# UK-Biobank-style coded records that mark a subject as COPD-positive.
# "439J" is kept verbatim alongside the plausible transposition "J439".
COPD_CODES = {
    20002: {"1112", "1113", "1472"},
    41270: {"J430", "J431", "J432", "J438", "439J", "J439",
            "J440", "J441", "J448", "J449"},
    42040: {"J430", "J431", "J432", "J438", "439J", "J439",
            "J440", "J441", "J448", "J449"},
}


@dataclass(frozen=True)
class Demographics:
    age: float
    sex: str
    height_cm: float
    smoker: bool

    def __post_init__(self):
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if not AGE_RANGE[0] <= self.age <= AGE_RANGE[1]:
            raise ValueError(f"age {self.age} outside accepted range {AGE_RANGE}")
        if not HEIGHT_RANGE_CM[0] <= self.height_cm <= HEIGHT_RANGE_CM[1]:
            raise ValueError(
                f"height_cm {self.height_cm} outside accepted range {HEIGHT_RANGE_CM}")


@dataclass(frozen=True)
class FlowSeries:
    """Expiratory flow samples (L/s) at a fixed sample period."""

    sample_period_s: float
    flow_l_per_s: np.ndarray
    origin: str = "measured"

    def __post_init__(self):
        flow = np.asarray(self.flow_l_per_s, dtype=np.float64)
        object.__setattr__(self, "flow_l_per_s", flow)
        if self.sample_period_s <= 0:
            raise ValueError("sample_period_s must be positive")
        if flow.ndim != 1 or flow.size < 2:
            raise ValueError("flow series must be 1-D with length >= 2")
        if not np.all(np.isfinite(flow)):
            raise ValueError("flow series contains non-finite values")
        if self.origin not in FLOW_ORIGINS:
            raise ValueError(f"origin must be one of {FLOW_ORIGINS}")

    @property
    def times_s(self) -> np.ndarray:
        return np.arange(self.flow_l_per_s.size) * self.sample_period_s

    @property
    def duration_s(self) -> float:
        return (self.flow_l_per_s.size - 1) * self.sample_period_s

    def __eq__(self, other):
        if not isinstance(other, FlowSeries):
            return NotImplemented
        return (self.sample_period_s == other.sample_period_s
                and self.origin == other.origin
                and np.array_equal(self.flow_l_per_s, other.flow_l_per_s))


@dataclass(frozen=True)
class SpiroSample:
    subject_id: str
    demographics: Demographics
    flow: FlowSeries
    copd_label: bool | None = None
    official_metrics: dict[str, float] | None = None


@dataclass(frozen=True)
class Cohort:
    samples: tuple[SpiroSample, ...]
    name: str = "cohort"

    def __post_init__(self):
        # empty cohorts are permitted only as split leftovers; ingestion
        # rejects them (parse_cohort raises EmptyCohort)
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.subject_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subject_id in cohort")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def prevalence(self) -> float:
        labels = [s.copd_label for s in self.samples]
        if any(l is None for l in labels):
            raise UnlabeledSample("cohort contains unlabeled samples")
        return sum(labels) / len(labels)


@dataclass(frozen=True)
class CodedRecord:
    field_id: int
    code: str


def extract_copd_label(records: list[CodedRecord]) -> bool:
    """True iff any record matches the COPD field/code lookup table.

    Monotone: adding records can only turn the result true.
    """
    for rec in records:
        codes = COPD_CODES.get(rec.field_id)
        if codes is not None and rec.code in codes:
            return True
    return False


# --- serialization -------------------------------------------------------

_REQUIRED_KEYS = ("subject_id", "age", "sex", "height_cm", "smoker",
                  "sample_period_s", "flow")


def _sample_to_record(sample: SpiroSample) -> dict:
    rec = {
        "subject_id": sample.subject_id,
        "age": sample.demographics.age,
        "sex": sample.demographics.sex,
        "height_cm": sample.demographics.height_cm,
        "smoker": sample.demographics.smoker,
        "sample_period_s": sample.flow.sample_period_s,
        "flow": [float(v) for v in sample.flow.flow_l_per_s],
        "origin": sample.flow.origin,
    }
    if sample.copd_label is not None:
        rec["copd_label"] = sample.copd_label
    if sample.official_metrics is not None:
        rec["official_metrics"] = dict(sample.official_metrics)
    return rec


def _sample_from_record(rec: dict, line_no: int) -> SpiroSample:
    for key in _REQUIRED_KEYS:
        if key not in rec:
            raise MalformedRecord(line_no, f"missing key {key!r}")
    try:
        demo = Demographics(age=float(rec["age"]), sex=rec["sex"],
                            height_cm=float(rec["height_cm"]),
                            smoker=bool(rec["smoker"]))
        flow = FlowSeries(sample_period_s=float(rec["sample_period_s"]),
                          flow_l_per_s=np.asarray(rec["flow"], dtype=np.float64),
                          origin=rec.get("origin", "measured"))
    except (ValueError, TypeError) as exc:
        raise MalformedRecord(line_no, str(exc)) from exc
    label = rec.get("copd_label")
    official = rec.get("official_metrics")
    return SpiroSample(subject_id=str(rec["subject_id"]), demographics=demo,
                       flow=flow, copd_label=None if label is None else bool(label),
                       official_metrics=None if official is None else
                       {k: float(v) for k, v in official.items()})


def parse_cohort(path: str | Path, format: str = "json-lines",
                 name: str | None = None) -> Cohort:
    """Read a cohort file.  Raises MalformedRecord on the first bad record."""
    path = Path(path)
    samples = []
    if format == "json-lines":
        with path.open() as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedRecord(line_no, f"invalid json: {exc}") from exc
                samples.append(_sample_from_record(rec, line_no))
    elif format == "csv":
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            for line_no, row in enumerate(reader, start=2):
                rec = dict(row)
                if rec.get("flow") is not None:
                    try:
                        rec["flow"] = [float(v) for v in rec["flow"].split(";") if v]
                    except ValueError as exc:
                        raise MalformedRecord(line_no, f"bad flow field: {exc}") from exc
                if rec.get("smoker") is not None:
                    rec["smoker"] = rec["smoker"].strip().lower() in ("1", "true", "yes")
                if rec.get("copd_label") not in (None, ""):
                    rec["copd_label"] = rec["copd_label"].strip().lower() in ("1", "true", "yes")
                else:
                    rec.pop("copd_label", None)
                if rec.get("official_metrics") not in (None, ""):
                    rec["official_metrics"] = json.loads(rec["official_metrics"])
                else:
                    rec.pop("official_metrics", None)
                for key in ("age", "height_cm", "sample_period_s"):
                    if rec.get(key) in (None, ""):
                        raise MalformedRecord(line_no, f"missing key {key!r}")
                samples.append(_sample_from_record(rec, line_no))
    else:
        raise ValueError(f"unknown format {format!r}")
    if not samples:
        raise EmptyCohort(f"no valid records in {path}")
    return Cohort(samples=tuple(samples), name=name or path.stem)


def export_cohort(cohort: Cohort, path: str | Path, format: str = "json-lines") -> None:
    """Inverse of parse_cohort: parse(export(c)) == c for valid cohorts."""
    path = Path(path)
    if format == "json-lines":
        with path.open("w") as fh:
            for sample in cohort:
                fh.write(json.dumps(_sample_to_record(sample)) + "\n")
    elif format == "csv":
        fields = ["subject_id", "age", "sex", "height_cm", "smoker",
                  "sample_period_s", "flow", "origin", "copd_label",
                  "official_metrics"]
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for sample in cohort:
                rec = _sample_to_record(sample)
                rec["flow"] = ";".join(repr(v) for v in rec["flow"])
                if "official_metrics" in rec:
                    rec["official_metrics"] = json.dumps(rec["official_metrics"])
                writer.writerow(rec)
    else:
        raise ValueError(f"unknown format {format!r}")


# --- stratified splitting ------------------------------------------------

def _largest_remainder_counts(n: int, ratios: tuple[float, ...]) -> list[int]:
    exact = [n * r for r in ratios]
    base = [math.floor(x) for x in exact]
    short = n - sum(base)
    # distribute leftovers to the largest fractional parts; ties go to the
    # earliest subset so the allocation is deterministic
    order = sorted(range(len(ratios)), key=lambda j: (-(exact[j] - base[j]), j))
    for j in order[:short]:
        base[j] += 1
    return base


def stratified_split(cohort: Cohort, ratios: tuple[float, float, float],
                     seed: int) -> tuple[Cohort, Cohort, Cohort]:
    """Split per class by largest-remainder counts; deterministic under seed."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative floats")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    for sample in cohort:
        if sample.copd_label is None:
            raise UnlabeledSample(f"sample {sample.subject_id} has no copd_label")

    rng = np.random.default_rng(seed)
    buckets: tuple[list, list, list] = ([], [], [])
    for label in (False, True):
        members = [s for s in cohort if s.copd_label == label]
        if not members:
            continue
        perm = rng.permutation(len(members))
        members = [members[i] for i in perm]
        counts = _largest_remainder_counts(len(members), tuple(ratios))
        start = 0
        for j, count in enumerate(counts):
            buckets[j].extend(members[start:start + count])
            start += count
    names = (f"{cohort.name}-train", f"{cohort.name}-val", f"{cohort.name}-test")
    out = []
    for bucket, name in zip(buckets, names):
        bucket.sort(key=lambda s: s.subject_id)
        out.append(Cohort(samples=tuple(bucket), name=name))
    return tuple(out)
