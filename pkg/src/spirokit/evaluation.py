"""Judge-based evaluation: six-dimension scoring, diagnostic metrics,
bootstrap confidence intervals, and the masking-robustness experiment.

Judge responses must match the evaluation_result JSON schema embedded in the
judge prompt template exactly (field names, score ranges).  Diagnostic
metrics are computed only over valid responses; the valid-response rate is
reported alongside so degraded conditions stay visible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chat import ChatClient, ChatEndpointConfig
from .cohort import Cohort
from .errors import (AllResamplesDegenerate, DegenerateLabels,
                     InvalidJudgeResponse, OutOfRange)
from .pipeline import (GeneratedReport, GenerationContext, run_generation,
                       strip_code_fences)
from .prompts import load_template

logger = logging.getLogger(__name__)

DIMENSIONS = ("factual_accuracy", "completeness_coverage", "logic_evidence",
              "medical_terminology", "spirometry_curve_accuracy",
              "medical_safety")

MASKING_CONDITIONS = ("multimodal+unmasked", "multimodal+masked",
                      "textonly+unmasked", "textonly+masked")


@dataclass(frozen=True)
class JudgeScores:
    factual_accuracy: int
    completeness_coverage: int
    logic_evidence: int
    medical_terminology: int
    spirometry_curve_accuracy: int
    medical_safety: int
    copd_diagnosis_confidence_score: float
    copd_diagnosis_binary_decision: int
    justifications: dict[str, str] = field(default_factory=dict)

    def dimension(self, name: str) -> int:
        return getattr(self, name)


def _require_int_score(obj, name, low, high):
    score = obj.get("score")
    if isinstance(score, bool) or not isinstance(score, int):
        raise InvalidJudgeResponse(f"{name}.score must be an integer")
    if not low <= score <= high:
        raise InvalidJudgeResponse(
            f"{name}.score {score} outside [{low}, {high}]")
    return score


def parse_judge_scores(text: str) -> JudgeScores:
    """Strict parse of a judge response against the template schema."""
    try:
        payload = json.loads(strip_code_fences(text.strip()))
    except json.JSONDecodeError as exc:
        raise InvalidJudgeResponse(f"not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "evaluation_result" not in payload:
        raise InvalidJudgeResponse("missing evaluation_result object")
    result = payload["evaluation_result"]
    if not isinstance(result, dict):
        raise InvalidJudgeResponse("evaluation_result must be an object")

    values = {}
    justifications = {}
    for name in DIMENSIONS:
        entry = result.get(name)
        if not isinstance(entry, dict):
            raise InvalidJudgeResponse(f"missing dimension {name!r}")
        values[name] = _require_int_score(entry, name, 1, 5)
        justification = entry.get("justification", "")
        if not isinstance(justification, str):
            raise InvalidJudgeResponse(f"{name}.justification must be a string")
        justifications[name] = justification

    conf_entry = result.get("copd_diagnosis_confidence_score")
    if not isinstance(conf_entry, dict):
        raise InvalidJudgeResponse("missing copd_diagnosis_confidence_score")
    confidence = conf_entry.get("score")
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
        raise InvalidJudgeResponse("confidence score must be a number")
    confidence = float(confidence)
    if not 0.0 <= confidence <= 1.0:
        raise InvalidJudgeResponse(f"confidence {confidence} outside [0, 1]")
    justifications["copd_diagnosis_confidence_score"] = \
        conf_entry.get("justification", "")

    binary_entry = result.get("copd_diagnosis_binary_decision")
    if not isinstance(binary_entry, dict):
        raise InvalidJudgeResponse("missing copd_diagnosis_binary_decision")
    binary = _require_int_score(binary_entry, "copd_diagnosis_binary_decision",
                                0, 1)
    justifications["copd_diagnosis_binary_decision"] = \
        binary_entry.get("justification", "")

    return JudgeScores(**values,
                       copd_diagnosis_confidence_score=confidence,
                       copd_diagnosis_binary_decision=binary,
                       justifications=justifications)


def build_judge_prompt(generated: GeneratedReport, gold: GeneratedReport) -> str:
    template = load_template("judge_prompt")
    return (template
            .replace("{{model_generated_text}}", generated.content)
            .replace("{{ground_truth_summary}}", gold.content))


def judge_report(generated: GeneratedReport, gold: GeneratedReport,
                 endpoint: ChatEndpointConfig | ChatClient) -> JudgeScores:
    """Submit one generated/gold pair to the judge endpoint."""
    if not (generated.valid and gold.valid):
        raise ValueError("judge_report requires two valid reports")
    client = endpoint if isinstance(endpoint, ChatClient) else ChatClient(endpoint)
    result = client.complete(build_judge_prompt(generated, gold))
    if not result.ok:
        raise InvalidJudgeResponse(f"judge endpoint status {result.status}")
    return parse_judge_scores(result.text)


def normalize_score(raw: int) -> float:
    """Linear 1..5 -> 0..100 (1 maps to 0, 5 maps to 100)."""
    if isinstance(raw, bool) or not isinstance(raw, int) or not 1 <= raw <= 5:
        raise OutOfRange(f"raw score must be an integer in 1..5, got {raw!r}")
    return (raw - 1) * 25.0


# --- ranking / classification metrics -------------------------------------

def _check_binary_labels(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0:
        raise DegenerateLabels("empty label set")
    return labels


def compute_auroc(scores, labels) -> float:
    """Pairwise ranking probability (ties count one half)."""
    labels = _check_binary_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("need at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_auprc(scores, labels) -> float:
    """Average precision with stable input order on score ties."""
    labels = _check_binary_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DegenerateLabels("need at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            total += hits / rank
    return total / n_pos


def compute_confusion_metrics(decisions, labels) -> tuple[float, float, float]:
    labels = _check_binary_labels(labels)
    decisions = np.asarray(decisions, dtype=bool)
    tp = int(np.sum(decisions & labels))
    fn = int(np.sum(~decisions & labels))
    fp = int(np.sum(decisions & ~labels))
    tn = int(np.sum(~decisions & ~labels))
    if tp + fn == 0:
        raise DegenerateLabels("need at least one positive label")
    if tn + fp == 0:
        raise DegenerateLabels("need at least one negative label")
    sensitivity = tp / (tp + fn)
    specificity = tn / (tn + fp)
    precision = tp / (tp + fp) if tp + fp else 0.0
    denom = precision + sensitivity
    f1 = 2 * precision * sensitivity / denom if denom else 0.0
    return sensitivity, specificity, f1


def bootstrap_ci(values, labels, metric_fn, n_resamples: int = 1000,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap (2.5/97.5) over paired resampling.

    Resamples on which metric_fn raises DegenerateLabels are skipped and
    logged; if every resample degenerates, AllResamplesDegenerate is raised.
    """
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("empty data")
    labels_arr = None if labels is None else np.asarray(labels)
    rng = np.random.default_rng(seed)
    stats = []
    skipped = 0
    n = values.shape[0]
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        try:
            if labels_arr is None:
                stats.append(metric_fn(values[idx], None))
            else:
                stats.append(metric_fn(values[idx], labels_arr[idx]))
        except DegenerateLabels:
            skipped += 1
    if not stats:
        raise AllResamplesDegenerate(
            f"all {n_resamples} bootstrap resamples were degenerate")
    if skipped:
        logger.debug("bootstrap skipped %d/%d degenerate resamples",
                     skipped, n_resamples)
    low, high = np.percentile(stats, [2.5, 97.5])
    return float(low), float(high)


def valid_response_rate(reports: list[GeneratedReport]) -> float:
    if not reports:
        raise ValueError("empty report list")
    good = sum(1 for r in reports if r.valid and r.content.strip())
    return good / len(reports)


# --- summaries -------------------------------------------------------------

@dataclass(frozen=True)
class MetricCI:
    point: float
    low: float
    high: float

    def to_json(self):
        return {"point": self.point, "low": self.low, "high": self.high}

    def format(self, digits=4):
        return (f"{self.point:.{digits}f} "
                f"({self.low:.{digits}f}-{self.high:.{digits}f})")


@dataclass(frozen=True)
class EvalSummary:
    dimensions: dict[str, MetricCI]
    auroc: MetricCI | None
    auprc: MetricCI | None
    sensitivity: MetricCI | None
    specificity: MetricCI | None
    f1: MetricCI | None
    valid_response_rate: float
    n_total: int
    n_scored: int

    def to_json(self) -> dict:
        return {
            "dimensions": {k: v.to_json() for k, v in self.dimensions.items()},
            "auroc": self.auroc.to_json() if self.auroc else None,
            "auprc": self.auprc.to_json() if self.auprc else None,
            "sensitivity": self.sensitivity.to_json() if self.sensitivity else None,
            "specificity": self.specificity.to_json() if self.specificity else None,
            "f1": self.f1.to_json() if self.f1 else None,
            "valid_response_rate": self.valid_response_rate,
            "n_total": self.n_total,
            "n_scored": self.n_scored,
        }


def summarize(scores: list[JudgeScores | None], reports: list[GeneratedReport],
              labels: list[bool], n_resamples: int = 1000,
              seed: int = 0) -> EvalSummary:
    """Normalized dimension means plus diagnostic metrics with bootstrap CIs.

    scores must align with reports/labels; entries are None where no judge
    score exists (invalid response, judging skipped).  Diagnostic metrics
    use only the scored subset.
    """
    if not (len(scores) == len(reports) == len(labels)):
        raise ValueError("scores, reports, and labels must align")
    rate = valid_response_rate(reports)
    scored_idx = [i for i, s in enumerate(scores) if s is not None]

    dimensions: dict[str, MetricCI] = {}
    auroc = auprc = sensitivity = specificity = f1 = None
    if scored_idx:
        subset = [scores[i] for i in scored_idx]
        subset_labels = np.asarray([bool(labels[i]) for i in scored_idx])
        for name in DIMENSIONS:
            normalized = np.array([normalize_score(s.dimension(name))
                                   for s in subset])
            low, high = bootstrap_ci(normalized, None,
                                     lambda v, _: float(np.mean(v)),
                                     n_resamples=n_resamples, seed=seed)
            dimensions[name] = MetricCI(float(np.mean(normalized)), low, high)

        confidences = np.array([s.copd_diagnosis_confidence_score
                                for s in subset])
        decisions = np.array([s.copd_diagnosis_binary_decision
                              for s in subset], dtype=bool)

        def ci_or_none(values, metric_fn):
            try:
                point = metric_fn(values, subset_labels)
            except DegenerateLabels:
                return None
            try:
                low, high = bootstrap_ci(values, subset_labels, metric_fn,
                                         n_resamples=n_resamples, seed=seed)
            except AllResamplesDegenerate:
                low = high = point
            return MetricCI(float(point), low, high)

        auroc = ci_or_none(confidences, compute_auroc)
        auprc = ci_or_none(confidences, compute_auprc)
        sensitivity = ci_or_none(decisions,
                                 lambda d, l: compute_confusion_metrics(d, l)[0])
        specificity = ci_or_none(decisions,
                                 lambda d, l: compute_confusion_metrics(d, l)[1])
        f1 = ci_or_none(decisions,
                        lambda d, l: compute_confusion_metrics(d, l)[2])

    return EvalSummary(dimensions=dimensions, auroc=auroc, auprc=auprc,
                       sensitivity=sensitivity, specificity=specificity,
                       f1=f1, valid_response_rate=rate,
                       n_total=len(reports), n_scored=len(scored_idx))


def judge_cohort(reports: list[GeneratedReport],
                 gold_reports: list[GeneratedReport],
                 endpoint: ChatEndpointConfig | ChatClient
                 ) -> list[JudgeScores | None]:
    """Judge every valid (generated, gold) pair; None where judging is
    impossible or the judge response is invalid (recorded, not raised)."""
    client = endpoint if isinstance(endpoint, ChatClient) else ChatClient(endpoint)
    out: list[JudgeScores | None] = []
    for generated, gold in zip(reports, gold_reports):
        if not (generated.valid and generated.content.strip() and gold.valid):
            out.append(None)
            continue
        try:
            out.append(judge_report(generated, gold, client))
        except InvalidJudgeResponse as exc:
            logger.warning("judge response rejected: %s", exc)
            out.append(None)
    return out


def run_masking_experiment(cohort: Cohort,
                           endpoint: ChatEndpointConfig | ChatClient,
                           ctx: GenerationContext,
                           gold_reports: list[GeneratedReport] | None = None,
                           judge_endpoint=None,
                           journal_dir: str | Path | None = None,
                           n_resamples: int = 200,
                           seed: int = 0) -> dict[str, EvalSummary]:
    """Generate, judge, and summarize the four query conditions.

    Conditions cross {multimodal, textonly} x {masked, unmasked}.  Gold
    reports are generated first when not supplied.  Partial results are
    journaled per condition when journal_dir is given.
    """
    client = endpoint if isinstance(endpoint, ChatClient) else ChatClient(endpoint)
    judge_client = judge_endpoint or client
    journal_dir = Path(journal_dir) if journal_dir is not None else None
    labels = [bool(s.copd_label) for s in cohort]

    if gold_reports is None:
        gold_reports = run_generation(
            cohort, "gold", False, client, ctx,
            journal_path=journal_dir / "journal-gold.jsonl" if journal_dir else None)

    summaries: dict[str, EvalSummary] = {}
    for condition in MASKING_CONDITIONS:
        channel, masking = condition.split("+")
        mode = "query-multimodal" if channel == "multimodal" else "query-textonly"
        journal_path = (journal_dir / f"journal-{condition}.jsonl"
                        if journal_dir else None)
        reports = run_generation(cohort, mode, masking == "masked", client,
                                 ctx, journal_path=journal_path)
        scores = judge_cohort(reports, gold_reports, judge_client)
        summaries[condition] = summarize(scores, reports, labels,
                                         n_resamples=n_resamples, seed=seed)
        if journal_dir is not None:
            (journal_dir / f"summary-{condition}.json").write_text(
                json.dumps(summaries[condition].to_json(), indent=2))
    return summaries


# --- presentation ----------------------------------------------------------

def _cell(metric: MetricCI | None, digits=4) -> str:
    return metric.format(digits) if metric is not None else "-"


def render_summary_table(summaries: dict[str, EvalSummary]) -> str:
    """Aligned-text table: diagnostic block then report-quality block."""
    diag_headers = ["condition", "n", "valid-rate", "sensitivity",
                    "specificity", "f1", "auroc", "auprc"]
    diag_rows = [diag_headers]
    for name, summary in summaries.items():
        diag_rows.append([
            name, str(summary.n_total), f"{summary.valid_response_rate:.3f}",
            _cell(summary.sensitivity), _cell(summary.specificity),
            _cell(summary.f1), _cell(summary.auroc), _cell(summary.auprc),
        ])
    quality_headers = ["condition"] + [d.replace("_", " ") for d in DIMENSIONS]
    quality_rows = [quality_headers]
    for name, summary in summaries.items():
        row = [name]
        for dim in DIMENSIONS:
            row.append(_cell(summary.dimensions.get(dim), digits=2))
        quality_rows.append(row)

    def align(rows):
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = []
        for k, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)

    return ("Diagnostic metrics (scored responses only)\n"
            + align(diag_rows)
            + "\n\nReport quality (0-100 normalized judge scores)\n"
            + align(quality_rows) + "\n")
