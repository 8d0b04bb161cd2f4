"""Cohort-scale report generation: orchestration, parsing, journaling.

Reports come back as strict JSON with two fields (content: string,
is_ok: boolean), optionally wrapped in code fences.  Anything that does not
parse is preserved as an invalid report rather than raised: invalid
responses are data for the robustness metrics.

Runs are resumable.  Each completed sample is journaled (json-lines keyed
by subject_id and prompt hash); a rerun replays journaled entries whose
prompt hash still matches and only generates the remainder.
"""

from __future__ import annotations

import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .chat import ChatClient, ChatEndpointConfig
from .cohort import Cohort, SpiroSample
from .errors import EndpointUnreachable, UnlabeledSample
from .gli import GliCoefficientTable
from .knowledge import KnowledgeIndex, compose_query, retrieve
from .metrics import GoldThresholds, compute_pft
from .morphology import extract_descriptors, render_description
from .prompts import PromptBundle, build_gold_prompt, build_query_prompt

GENERATION_MODES = ("gold", "query-multimodal", "query-textonly")

_FENCE_RE = re.compile(r"^\s*```[A-Za-z0-9]*\s*\n(.*?)\n?\s*```\s*$", re.DOTALL)


@dataclass(frozen=True)
class GeneratedReport:
    content: str
    is_ok: bool
    model_id: str
    raw_response: str
    parse_status: str  # "valid" | "invalid"

    @property
    def valid(self) -> bool:
        return self.parse_status == "valid"

    def to_json(self) -> dict:
        return {"content": self.content, "is_ok": self.is_ok,
                "model_id": self.model_id, "raw_response": self.raw_response,
                "parse_status": self.parse_status}

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratedReport":
        return cls(content=obj["content"], is_ok=obj["is_ok"],
                   model_id=obj["model_id"], raw_response=obj["raw_response"],
                   parse_status=obj["parse_status"])


def strip_code_fences(text: str) -> str:
    match = _FENCE_RE.match(text)
    return match.group(1) if match else text


def parse_report_text(text: str, model_id: str, raw: str) -> GeneratedReport:
    candidate = strip_code_fences(text.strip())
    try:
        obj = json.loads(candidate)
    except json.JSONDecodeError:
        obj = None
    if (isinstance(obj, dict) and isinstance(obj.get("content"), str)
            and isinstance(obj.get("is_ok"), bool)):
        return GeneratedReport(content=obj["content"], is_ok=obj["is_ok"],
                               model_id=model_id, raw_response=raw,
                               parse_status="valid")
    return GeneratedReport(content="", is_ok=False, model_id=model_id,
                           raw_response=raw, parse_status="invalid")


def generate_report(bundle: PromptBundle,
                    endpoint: ChatEndpointConfig | ChatClient) -> GeneratedReport:
    """One chat completion; never raises on malformed output."""
    client = endpoint if isinstance(endpoint, ChatClient) else ChatClient(endpoint)
    result = client.complete(bundle.user_text, bundle.system_text)
    if not result.ok:
        return GeneratedReport(content="", is_ok=False,
                               model_id=client.config.model,
                               raw_response=result.raw_body,
                               parse_status="invalid")
    return parse_report_text(result.text, client.config.model, result.raw_body)


@dataclass
class GenerationContext:
    """Everything needed to turn a sample into a prompt."""

    gli_table: GliCoefficientTable
    thresholds: GoldThresholds
    index: KnowledgeIndex | None = None
    encoder_params: object = None
    projector_params: object = None
    top_k: int = 4

    def describe(self, sample: SpiroSample) -> tuple:
        metrics = compute_pft(sample.flow, sample.demographics, self.gli_table)
        morphology_text = render_description(extract_descriptors(sample.flow))
        return metrics, morphology_text


def build_bundle(sample: SpiroSample, mode: str, mask: bool,
                 ctx: GenerationContext) -> PromptBundle:
    if mode not in GENERATION_MODES:
        raise ValueError(f"mode must be one of {GENERATION_MODES}")
    metrics, morphology_text = ctx.describe(sample)
    if mode == "gold":
        if sample.copd_label is None:
            raise UnlabeledSample(
                f"gold prompt for {sample.subject_id} needs a ground-truth label")
        if ctx.index is None:
            raise ValueError("gold mode requires a knowledge index")
        query = compose_query(metrics, morphology_text, ctx.thresholds)
        snippets = retrieve(ctx.index, query, ctx.top_k)
        return build_gold_prompt(sample, metrics, morphology_text, snippets,
                                 sample.copd_label)
    if mode == "query-multimodal":
        if ctx.encoder_params is None:
            raise ValueError("multimodal mode requires encoder parameters")
        from .neural import encoder_forward, projector_forward

        encoder_out = encoder_forward(sample.flow, ctx.encoder_params)
        projected = None
        if ctx.projector_params is not None:
            projected = projector_forward(encoder_out.features,
                                          ctx.projector_params, mode="eval")
        return build_query_prompt(sample, metrics, encoder_out=encoder_out,
                                  mask=mask, projected=projected)
    return build_query_prompt(sample, metrics, encoder_out=None, mask=mask)


class Journal:
    """Append-only json-lines store keyed by (subject_id, prompt sha)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str], dict] = {}
        if self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._entries[(entry["subject_id"], entry["prompt_sha"])] = entry

    def lookup(self, subject_id: str, prompt_sha: str) -> GeneratedReport | None:
        entry = self._entries.get((subject_id, prompt_sha))
        return GeneratedReport.from_json(entry["report"]) if entry else None

    def record(self, subject_id: str, prompt_sha: str,
               report: GeneratedReport, prompt_text: str = "") -> None:
        entry = {"subject_id": subject_id, "prompt_sha": prompt_sha,
                 "prompt": prompt_text, "report": report.to_json()}
        with self._lock:
            self._entries[(subject_id, prompt_sha)] = entry
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps(entry) + "\n")


def run_generation(cohort: Cohort, mode: str, mask: bool,
                   endpoint: ChatEndpointConfig | ChatClient,
                   ctx: GenerationContext,
                   journal_path: str | Path | None = None,
                   progress=None) -> list[GeneratedReport]:
    """One report per sample, in cohort order, with bounded concurrency.

    Raises EndpointUnreachable if the endpoint dies; the journal keeps
    whatever completed, so a rerun resumes where it stopped.
    """
    client = endpoint if isinstance(endpoint, ChatClient) else ChatClient(endpoint)
    journal = Journal(journal_path) if journal_path is not None else None
    bundles = [build_bundle(sample, mode, mask, ctx) for sample in cohort]
    reports: list[GeneratedReport | None] = [None] * len(bundles)

    pending: list[int] = []
    for i, (sample, bundle) in enumerate(zip(cohort, bundles)):
        cached = journal.lookup(sample.subject_id, bundle.sha()) if journal else None
        if cached is not None:
            reports[i] = cached
        else:
            pending.append(i)

    def work(i: int) -> None:
        sample = cohort.samples[i]
        report = generate_report(bundles[i], client)
        if journal is not None:
            journal.record(sample.subject_id, bundles[i].sha(), report,
                           prompt_text=bundles[i].user_text)
        reports[i] = report
        if progress is not None:
            progress(sample.subject_id, report)

    if pending:
        max_workers = max(1, client.config.max_in_flight)
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {pool.submit(work, i): i for i in pending}
            failure = None
            for future in futures:
                try:
                    future.result()
                except EndpointUnreachable as exc:
                    failure = exc
            if failure is not None:
                raise failure
    return [r for r in reports if r is not None]


def save_reports(reports: list[GeneratedReport], cohort: Cohort,
                 path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for sample, report in zip(cohort, reports):
            record = {"subject_id": sample.subject_id, **report.to_json()}
            fh.write(json.dumps(record) + "\n")


def load_reports(path: str | Path) -> tuple[list[str], list[GeneratedReport]]:
    subject_ids, reports = [], []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            subject_ids.append(record.pop("subject_id"))
            reports.append(GeneratedReport.from_json(record))
    return subject_ids, reports
