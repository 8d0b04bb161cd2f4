"""Scripted offline endpoints for tests, demos, and CLI dry runs.

Two deterministic chat endpoints are exposed through the ``mock://`` URL
scheme of ChatEndpointConfig:

* ``mock://metric-gate``   answers a report request only when the prompt
  still carries a quantitative channel: either metric lines with numbers in
  them or a waveform-analysis payload.  Otherwise it refuses in free text
  (which downstream parsing classifies as invalid).
* ``mock://always-valid``  always answers.

Both handle gold-report prompts, query prompts, judge prompts, and the
curve-description prompt, so an entire pipeline run can execute offline.
Responses are pure functions of the request payload.
"""

from __future__ import annotations

import hashlib
import json
import re

_METRIC_LINE_RE = re.compile(
    r"^(?:FEV1|FVC|PEF|FEF[0-9-]*)[^:\n]*:([^\n]*)$", re.MULTILINE)
_RATIO_RE = re.compile(r"^FEV1/FVC ratio:\s*([0-9.]+)", re.MULTILINE)
_PROBABILITY_RE = re.compile(r"copd_probability=([0-9.]+)")
_GOLD_LABEL_RE = re.compile(r"Ground Truth Label[^\n]*`(COPD|Non-COPD)`")
_JUDGED_TEXT_RE = re.compile(
    r"\*\*\[Model-generated COPD text\]\*\*[^\n]*\n\s*```\n(.*?)\n\s*```",
    re.DOTALL)
_CONFIDENCE_RE = re.compile(r"model confidence ([0-9.]+)")

POSITIVE_DIAGNOSIS = "Diagnosis: COPD confirmed."
NEGATIVE_DIAGNOSIS = "Diagnosis: Diagnostic criteria for COPD are not met."
REFUSAL_TEXT = ("I cannot produce an assessment: the quantitative pulmonary "
                "function values are missing from the request.")


def _chat_body(text: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def _user_text(payload: dict) -> str:
    parts = []
    for message in payload.get("messages", []):
        content = message.get("content", "")
        if isinstance(content, str):
            parts.append(content)
        else:
            parts.extend(p.get("text", "") for p in content
                         if isinstance(p, dict) and p.get("type") == "text")
    return "\n".join(parts)


def _report_json(positive: bool, confidence: float, detail: str) -> str:
    sentence = POSITIVE_DIAGNOSIS if positive else NEGATIVE_DIAGNOSIS
    content = (f"{sentence} {detail} This conclusion follows from the "
               f"available channels (model confidence {confidence:.2f}).")
    return json.dumps({"content": content, "is_ok": True})


def _has_metric_numbers(text: str) -> bool:
    return any(re.search(r"\d", tail) for tail in _METRIC_LINE_RE.findall(text))


def _query_response(text: str, gate: bool) -> str:
    has_metrics = _has_metric_numbers(text)
    probability_match = _PROBABILITY_RE.search(text)
    if gate and not has_metrics and probability_match is None:
        return REFUSAL_TEXT
    if has_metrics:
        ratio_match = _RATIO_RE.search(text)
        ratio = float(ratio_match.group(1)) if ratio_match else 1.0
        positive = ratio < 0.70
        confidence = min(max(0.5 + (0.70 - ratio) * 3.0, 0.02), 0.98)
        detail = f"The FEV1/FVC ratio of {ratio:.2f} was compared against 0.70."
    elif probability_match is not None:
        probability = float(probability_match.group(1))
        positive = probability >= 0.5
        confidence = min(max(probability, 0.02), 0.98)
        detail = "The waveform analysis channel drove the assessment."
    else:
        positive, confidence = False, 0.5
        detail = "No quantitative channel was available."
    return _report_json(positive, confidence, detail)


def _gold_response(text: str) -> str:
    match = _GOLD_LABEL_RE.search(text)
    positive = bool(match and match.group(1) == "COPD")
    confidence = 0.97 if positive else 0.03
    detail = ("Airflow limitation is demonstrated by the recorded values."
              if positive else
              "The recorded values do not demonstrate airflow limitation.")
    return _report_json(positive, confidence, detail)


def _judge_response(text: str) -> str:
    match = _JUDGED_TEXT_RE.search(text)
    judged = match.group(1) if match else ""
    binary = 1 if "COPD confirmed" in judged else 0
    conf_match = _CONFIDENCE_RE.search(judged)
    if conf_match:
        confidence = float(conf_match.group(1))
    else:
        confidence = 0.9 if binary else 0.1
    digest = hashlib.sha256(judged.encode("utf-8")).digest()
    dims = ("factual_accuracy", "completeness_coverage", "logic_evidence",
            "medical_terminology", "spirometry_curve_accuracy",
            "medical_safety")
    result = {}
    for i, dim in enumerate(dims):
        result[dim] = {"score": 3 + digest[i] % 3,
                       "justification": "scripted check"}
    result["copd_diagnosis_confidence_score"] = {
        "score": confidence, "justification": "scripted check"}
    result["copd_diagnosis_binary_decision"] = {
        "score": binary, "justification": "scripted check"}
    return json.dumps({"evaluation_result": result})


_DESCRIPTION_TEXT = (
    "The curve rises steeply from the origin to a sharp peak early in the "
    "volume range, then descends toward the volume axis and terminates at "
    "the right edge of the plotted range.")


class ScriptedEndpoint:
    """Deterministic request handler shared by the mock:// schemes."""

    def __init__(self, gate: bool):
        self.gate = gate

    def __call__(self, payload: dict) -> tuple[int, dict]:
        text = _user_text(payload)
        if '"evaluation_result"' in text:
            return 200, _chat_body(_judge_response(text))
        if "Ground Truth Label" in text:
            return 200, _chat_body(_gold_response(text))
        if "Generate the description based" in text:
            return 200, _chat_body(_DESCRIPTION_TEXT)
        return 200, _chat_body(_query_response(text, self.gate))


def make_mock_transport(url: str):
    kind = url[len("mock://"):]
    if kind == "metric-gate":
        return ScriptedEndpoint(gate=True)
    if kind == "always-valid":
        return ScriptedEndpoint(gate=False)
    raise ValueError(f"unknown mock endpoint {url!r}")
