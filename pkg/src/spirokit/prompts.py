"""Prompt construction: gold-report prompts, query prompts, metric masking.

Templates live as versioned text files under spirokit/templates; golden
tests pin them byte-exactly.  Placeholders use the __NAME__ convention and
substitution must be total: any placeholder left after filling is an error.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .cohort import SpiroSample
from .errors import TemplateError
from .knowledge import KnowledgeSnippet
from .metrics import PftMetrics

_PLACEHOLDER_RE = re.compile(r"__[A-Z0-9_]+__")
REDACTION_TOKEN = "[REDACTED]"
_NUMERAL_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")

# metric lines in query prompts start with one of these names
METRIC_LINE_PREFIXES = ("FEV1", "FVC", "PEF", "FEF25-75", "FEF75")

_GOLD_PLACEHOLDERS = {"__PATIENT_DATA_JSON__", "__GROUND_TRUTH_LABEL__",
                      "__KNOWLEDGE_SNIPPETS__"}
_QUERY_PLACEHOLDERS = {"__DEMOGRAPHICS__", "__PFT_RESULTS__",
                       "__SIGNAL_ANALYSIS__"}


def load_template(name: str) -> str:
    return resources.files("spirokit.templates").joinpath(f"{name}.txt").read_text()


def template_version(name: str) -> str:
    digest = hashlib.sha256(load_template(name).encode("utf-8")).hexdigest()
    return f"{name}@{digest[:8]}"


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    masked: bool
    multimodal_payload: str | None
    template_version: str

    def sha(self) -> str:
        blob = json.dumps({
            "system": self.system_text, "user": self.user_text,
            "masked": self.masked, "payload": self.multimodal_payload,
            "version": self.template_version,
        }, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _fill(template: str, known: set[str], values: dict[str, str]) -> str:
    found = set(_PLACEHOLDER_RE.findall(template))
    unknown = found - known
    if unknown:
        raise TemplateError(f"unknown placeholders in template: {sorted(unknown)}")
    text = template
    for key, value in values.items():
        text = text.replace(key, value)
    leftover = _PLACEHOLDER_RE.findall(text)
    if leftover:
        raise TemplateError(f"unsubstituted placeholders: {sorted(set(leftover))}")
    return text


def patient_payload(sample: SpiroSample, metrics: PftMetrics,
                    morphology_text: str) -> dict:
    """Structured patient object embedded in gold prompts (JSON-exact)."""
    demo = sample.demographics
    measured = metrics.measured
    pft: dict[str, dict] = {}

    def block(name, value, unit_key):
        entry = {unit_key: value}
        ref = metrics.reference.get(name)
        if ref is not None:
            entry.update({
                "predicted": ref.predicted,
                "predicted_percent": ref.percent_predicted,
                "z_score": ref.z_score,
                "LLN": ref.lln,
            })
        return entry

    pft["FEV1"] = block("fev1", measured.fev1_l, "measured_L")
    pft["FVC"] = block("fvc", measured.fvc_l, "measured_L")
    pft["PEF"] = block("pef", measured.pef_l_per_s, "measured_L_per_s")
    pft["FEF25_75"] = block("fef25_75", measured.fef25_75_l_per_s,
                            "measured_L_per_s")
    pft["FEF75"] = block("fef75", measured.fef75_l_per_s, "measured_L_per_s")
    ratio_entry = {"ratio": measured.ratio_fev1_fvc}
    ratio_ref = metrics.reference.get("fev1_fvc")
    if ratio_ref is not None:
        ratio_entry.update({
            "predicted": ratio_ref.predicted,
            "z_score": ratio_ref.z_score,
            "LLN": ratio_ref.lln,
            "LLN_percent": 100.0 * ratio_ref.lln,
        })
    pft["FEV1_FVC"] = ratio_entry
    return {
        "BasicInfo": {
            "Age": demo.age,
            "Sex": demo.sex,
            "Height_cm": demo.height_cm,
            "IsSmoker": demo.smoker,
        },
        "PFT_Results": pft,
        "SpirometryGraphDescription": morphology_text,
    }


def format_snippets(snippets: list[KnowledgeSnippet]) -> str:
    lines = []
    for i, snippet in enumerate(snippets, start=1):
        header = f"[{i}]"
        if snippet.section_path:
            header += f" ({snippet.section_path})"
        lines.append(f"{header} {snippet.text}")
    return "\n\n".join(lines) if lines else "(none)"


def build_gold_prompt(sample: SpiroSample, metrics: PftMetrics,
                      morphology_text: str, snippets: list[KnowledgeSnippet],
                      ground_truth_label: bool) -> PromptBundle:
    template = load_template("gold_report_prompt")
    payload = patient_payload(sample, metrics, morphology_text)
    filled = _fill(template, _GOLD_PLACEHOLDERS, {
        "__PATIENT_DATA_JSON__": json.dumps(payload, indent=2),
        "__GROUND_TRUTH_LABEL__": "COPD" if ground_truth_label else "Non-COPD",
        "__KNOWLEDGE_SNIPPETS__": format_snippets(snippets),
    })
    return PromptBundle(system_text="", user_text=filled, masked=False,
                        multimodal_payload=None,
                        template_version=template_version("gold_report_prompt"))


_PATIENT_JSON_RE = re.compile(
    r"\*\*1\. Patient Data \(JSON Format\):\*\*\s*```json\n(.*?)\n```",
    re.DOTALL)


def extract_patient_payload(prompt_text: str) -> dict:
    """Inverse of the gold-prompt embedding, for round-trip checks."""
    match = _PATIENT_JSON_RE.search(prompt_text)
    if not match:
        raise TemplateError("no embedded patient JSON found")
    return json.loads(match.group(1))


def _demographics_block(sample: SpiroSample) -> str:
    demo = sample.demographics
    return "\n".join([
        f"Age: {demo.age:.0f} years",
        f"Sex: {demo.sex}",
        f"Height: {demo.height_cm:.1f} cm",
        f"Smoker: {'yes' if demo.smoker else 'no'}",
    ])


def _metric_line(name: str, value: float, unit: str,
                 ref) -> str:
    line = f"{name}: {value:.2f} {unit}".rstrip()
    if ref is not None:
        line += (f" (predicted {ref.predicted:.2f}, "
                 f"{ref.percent_predicted:.1f}% predicted, "
                 f"z-score {ref.z_score:.2f}, LLN {ref.lln:.2f})")
    return line


def _pft_block(metrics: PftMetrics) -> str:
    measured = metrics.measured
    ref = metrics.reference
    lines = [
        _metric_line("FEV1", measured.fev1_l, "L", ref.get("fev1")),
        _metric_line("FVC", measured.fvc_l, "L", ref.get("fvc")),
        _metric_line("FEV1/FVC ratio", measured.ratio_fev1_fvc, "",
                     ref.get("fev1_fvc")),
        _metric_line("PEF", measured.pef_l_per_s, "L/s", ref.get("pef")),
        _metric_line("FEF25-75", measured.fef25_75_l_per_s, "L/s",
                     ref.get("fef25_75")),
        _metric_line("FEF75", measured.fef75_l_per_s, "L/s", ref.get("fef75")),
    ]
    return "\n".join(lines)


def feature_digest(pooled: np.ndarray, buckets: int = 8, levels: int = 10) -> str:
    """Fixed-width text digest of a pooled feature vector."""
    pooled = np.asarray(pooled, dtype=np.float64)
    pad = (-pooled.size) % buckets
    if pad:
        pooled = np.concatenate([pooled, np.zeros(pad)])
    grouped = pooled.reshape(buckets, -1).mean(axis=1)
    scale = np.max(np.abs(grouped))
    if scale == 0:
        quantized = np.zeros(buckets, dtype=int)
    else:
        quantized = np.clip(((grouped / scale) * 0.5 + 0.5) * levels, 0,
                            levels - 1).astype(int)
    return " ".join(str(int(q)) for q in quantized)


def build_query_prompt(sample: SpiroSample, metrics: PftMetrics,
                       encoder_out=None, mask: bool = False,
                       projected: np.ndarray | None = None) -> PromptBundle:
    """Query prompt for report generation.

    Multimodal when encoder_out is present: the encoder probability plus a
    digest of the (projected) features ride along as a separate signal
    block that masking never touches.  Text-only mode omits the block
    entirely.
    """
    template = load_template("query_prompt")
    payload = None
    if encoder_out is not None:
        source = projected if projected is not None else encoder_out.features
        digest = feature_digest(np.asarray(source).mean(axis=0))
        payload = (f"copd_probability={encoder_out.copd_probability:.3f}\n"
                   f"feature_digest={digest}")
        signal_block = f"\n**Waveform analysis (encoder output):**\n{payload}\n"
    else:
        signal_block = ""
    filled = _fill(template, _QUERY_PLACEHOLDERS, {
        "__DEMOGRAPHICS__": _demographics_block(sample),
        "__PFT_RESULTS__": _pft_block(metrics),
        "__SIGNAL_ANALYSIS__": signal_block,
    })
    bundle = PromptBundle(system_text="", user_text=filled, masked=False,
                          multimodal_payload=payload,
                          template_version=template_version("query_prompt"))
    return mask_metrics(bundle) if mask else bundle


def is_metric_line(line: str) -> bool:
    stripped = line.lstrip()
    return stripped.startswith(METRIC_LINE_PREFIXES)


def mask_metrics(bundle: PromptBundle) -> PromptBundle:
    """Redact every numeral in metric lines; demographics and the signal
    block are untouched.  Idempotent."""
    masked_lines = []
    for line in bundle.user_text.splitlines():
        if is_metric_line(line):
            head, sep, tail = line.partition(":")
            if sep:
                line = head + sep + _NUMERAL_RE.sub(REDACTION_TOKEN, tail)
            else:
                line = _NUMERAL_RE.sub(REDACTION_TOKEN, line)
        masked_lines.append(line)
    return replace(bundle, user_text="\n".join(masked_lines), masked=True)
