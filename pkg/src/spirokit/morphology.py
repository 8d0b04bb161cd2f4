"""Geometric description of the expiratory flow-volume curve.

The descriptor path is deterministic and offline; a vision-model client is
available as an opt-in substitute that sends a rendered curve image to an
OpenAI-compatible multimodal endpoint.
"""

from __future__ import annotations

import base64
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .chat import ChatClient
from .cohort import FlowSeries
from .errors import EmptyResponse, EndpointError, FlatSignal
from .signals import volume_from_flow

# Terms the objective description must never contain (clinical or
# judgmental vocabulary; matching is case-insensitive on word boundaries).
BANNED_TERMS = (
    "normal", "abnormal", "COPD", "asthma", "emphysema",
    "obstructive pattern", "restrictive pattern", "airway limitation",
    "obstruction", "restriction", "impairment", "airflow reduction",
    "good", "poor", "healthy", "pathological",
)

_BANNED_RE = re.compile(
    r"\b(?:" + "|".join(re.escape(t) for t in BANNED_TERMS) + r")\b",
    re.IGNORECASE)

CONCAVE_THRESHOLD = 0.05
CONVEX_THRESHOLD = -0.05
_SHARP_PEAK_THRESHOLD = 0.02
_EARLY_PEAK_FRACTION = 0.25

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class MorphologyDescriptor:
    peak_flow: float
    peak_volume_fraction: float
    peak_sharpness: float
    concavity_index: float
    terminal_slope: float
    end_volume: float


def extract_descriptors(flow: FlowSeries) -> MorphologyDescriptor:
    """Descriptor of the flow-volume curve; concavity is measured against
    the chord of the descending limb (positive = scooped)."""
    f = flow.flow_l_per_s
    pef = float(np.max(f))
    if pef <= 0:
        raise FlatSignal("peak flow is not positive")
    volume = volume_from_flow(flow)
    # trailing zero-flow samples add no volume or area; trimming them makes
    # the descriptor invariant to padding
    last = int(np.nonzero(f > 0)[0][-1])
    f = f[:last + 1]
    volume = volume[:last + 1]
    m = int(np.argmax(f))
    end_volume = float(volume[-1])

    limb_v = volume[m:]
    limb_f = f[m:]
    span = limb_v[-1] - limb_v[0]
    if span > 0:
        area_curve = float(_trapezoid(limb_f, limb_v))
        area_chord = 0.5 * (limb_f[0] + limb_f[-1]) * span
        concavity = (area_chord - area_curve) / area_chord if area_chord > 0 else 0.0
    else:
        concavity = 0.0
    concavity = float(np.clip(concavity, -1.0, 1.0))

    lo = max(m - 1, 0)
    hi = min(m + 1, f.size - 1)
    sharpness = (2.0 * f[m] - f[lo] - f[hi]) / pef

    # secant slope over the last tenth of expired volume
    tail_target = end_volume - 0.1 * max(span, 0.0)
    j = int(np.searchsorted(volume, tail_target))
    j = min(max(j, m), f.size - 2)
    dv = volume[-1] - volume[j]
    terminal_slope = float((f[-1] - f[j]) / dv) if dv > 0 else 0.0

    return MorphologyDescriptor(
        peak_flow=pef,
        peak_volume_fraction=float(np.clip(volume[m] / end_volume, 0.0, 1.0))
        if end_volume > 0 else 0.0,
        peak_sharpness=float(max(sharpness, 0.0)),
        concavity_index=concavity,
        terminal_slope=terminal_slope,
        end_volume=end_volume)


def limb_shape_word(concavity_index: float) -> str:
    if concavity_index > CONCAVE_THRESHOLD:
        return "concave"
    if concavity_index < CONVEX_THRESHOLD:
        return "convex"
    return "linear"


def render_description(d: MorphologyDescriptor) -> str:
    """Objective English paragraph covering rise, peak, limb shape, and
    termination.  Never emits any term from BANNED_TERMS."""
    rise = ("rises steeply" if d.peak_volume_fraction <= _EARLY_PEAK_FRACTION
            else "rises gradually")
    peak_pos = (f"early in the volume range, near {d.peak_volume_fraction:.0%} "
                "of the expired volume"
                if d.peak_volume_fraction <= _EARLY_PEAK_FRACTION
                else f"at roughly {d.peak_volume_fraction:.0%} of the expired volume")
    peak_shape = "a sharp peak" if d.peak_sharpness >= _SHARP_PEAK_THRESHOLD \
        else "a rounded peak"
    shape = limb_shape_word(d.concavity_index)
    if shape == "concave":
        limb = ("the descending limb is concave, with a scooped-out appearance "
                "curving inward toward the volume axis")
    elif shape == "convex":
        limb = "the descending limb is convex, bulging outward above a straight path"
    else:
        limb = "the descending limb is close to linear, with a relatively constant slope"
    sentences = [
        f"The curve {rise} from the origin to {peak_shape} of "
        f"{d.peak_flow:.1f} L/s, occurring {peak_pos}.",
        f"After the peak, {limb}.",
        f"The flow approaches the horizontal axis with a terminal slope of about "
        f"{abs(d.terminal_slope):.1f} L/s per L, and the curve terminates at "
        f"approximately {d.end_volume:.1f} L on the volume axis.",
    ]
    text = " ".join(sentences)
    assert not scan_banned_terms(text), "description emitted a prohibited term"
    return text


def scan_banned_terms(text: str) -> list[str]:
    """All prohibited-vocabulary matches found in the text (empty = clean)."""
    return _BANNED_RE.findall(text)


# --- vision-model path ----------------------------------------------------

def load_morphology_prompt() -> str:
    return resources.files("spirokit.templates").joinpath(
        "morphology_prompt.txt").read_text()


def render_curve_svg(flow: FlowSeries, width: int = 640, height: int = 480) -> str:
    """Minimal flow-vs-volume SVG with axes, suitable for a vision endpoint."""
    f = flow.flow_l_per_s
    v = volume_from_flow(flow)
    pad = 50
    vmax = max(float(v[-1]), 1e-9)
    fmax = max(float(np.max(f)), 1e-9)
    xs = pad + (width - 2 * pad) * (v / vmax)
    ys = height - pad - (height - 2 * pad) * (f / fmax)
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white"/>'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        f'stroke="black"/>'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>'
        f'<text x="{width // 2}" y="{height - 12}" font-size="14">Volume (L), '
        f'0 to {vmax:.2f}</text>'
        f'<text x="12" y="{height // 2}" font-size="14" '
        f'transform="rotate(-90 12,{height // 2})">Flow (L/s), 0 to {fmax:.2f}</text>'
        f'<polyline fill="none" stroke="#1460aa" stroke-width="2" points="{points}"/>'
        f'</svg>')


def vlm_describe(flow: FlowSeries, client: ChatClient) -> str:
    """Ask a multimodal endpoint for a curve description.

    Sends the objective-description prompt followed by the rendered curve
    image; returns the endpoint's text verbatim.
    """
    svg = render_curve_svg(flow)
    data_url = ("data:image/svg+xml;base64,"
                + base64.b64encode(svg.encode("utf-8")).decode("ascii"))
    image_part = {"type": "image_url", "image_url": {"url": data_url}}
    result = client.complete(load_morphology_prompt(),
                             extra_user_parts=[image_part])
    if not result.ok:
        raise EndpointError(result.status, result.raw_body)
    if not result.text.strip():
        raise EmptyResponse("vision endpoint returned empty content")
    return result.text
