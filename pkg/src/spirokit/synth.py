"""Synthetic expiratory maneuvers for offline development and testing.

The flow-vs-volume template is a sharp rise to peak flow followed by a
descending limb that blends a straight chord (severity 0) into an
exponential decay (severity 1).  The blend weight is the severity knob, so
the concavity of the generated limb grows monotonically with it.
"""

from __future__ import annotations

import numpy as np

from .cohort import Cohort, Demographics, FlowSeries, SpiroSample

DEFAULT_SAMPLE_PERIOD_S = 0.01
_MAX_DURATION_S = 6.0
_DECAY_SHAPE = 4.0        # exponent scale of the fully-scooped limb
_RISE_EXPONENT = 0.6
_MIN_FLOW_L_S = 0.05      # integration stops once the template drops below this

PROFILES = ("normal", "obstructive")


def _limb_flow(u: float, pef: float, severity: float) -> float:
    """Template flow on the descending limb at normalized volume u in [0, 1]."""
    chord = 1.0 - u
    k = _DECAY_SHAPE
    scooped = (np.exp(-k * u) - np.exp(-k)) / (1.0 - np.exp(-k))
    return pef * ((1.0 - severity) * chord + severity * scooped)


def generate_synthetic_sample(profile: str, severity: float, noise_sd: float,
                              seed: int, subject_id: str | None = None,
                              sample_period_s: float = DEFAULT_SAMPLE_PERIOD_S,
                              ) -> SpiroSample:
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {PROFILES}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must be in [0, 1]")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    if profile == "normal":
        severity = 0.0

    rng = np.random.default_rng(seed)
    sex = "male" if rng.random() < 0.5 else "female"
    age = float(rng.uniform(30.0, 80.0))
    height = float(rng.uniform(162.0, 190.0) if sex == "male"
                   else rng.uniform(150.0, 178.0))
    smoker_p = 0.25 + 0.55 * severity
    smoker = bool(rng.random() < smoker_p)

    scale = (height / 175.0) ** 2
    fvc = float(rng.uniform(3.6, 5.4)) * scale * (1.0 - 0.30 * severity)
    pef = float(rng.uniform(7.0, 10.0)) * scale * (1.0 - 0.45 * severity)
    peak_frac = float(rng.uniform(0.10, 0.16))
    v_peak = peak_frac * fvc

    dt = sample_period_s
    n_max = int(_MAX_DURATION_S / dt) + 1
    flow = np.zeros(n_max)
    volume = 0.0
    limb_span = fvc - v_peak
    for k in range(n_max):
        if volume < v_peak:
            f = pef * (volume / v_peak) ** _RISE_EXPONENT if volume > 0 else 0.3 * pef
        else:
            u = min((volume - v_peak) / limb_span, 1.0)
            f = _limb_flow(u, pef, severity)
        if f < _MIN_FLOW_L_S and volume >= v_peak:
            flow = flow[:k]
            break
        flow[k] = f
        volume += f * dt

    if noise_sd > 0:
        flow = flow * (1.0 + noise_sd * rng.standard_normal(flow.size))
        np.clip(flow, 0.0, None, out=flow)

    series = FlowSeries(sample_period_s=dt, flow_l_per_s=flow, origin="synthetic")
    demo = Demographics(age=age, sex=sex, height_cm=height, smoker=smoker)
    return SpiroSample(
        subject_id=subject_id or f"synthetic-{profile}-{seed}",
        demographics=demo, flow=series,
        copd_label=(profile == "obstructive"))


def generate_cohort(n: int, prevalence: float, noise_sd: float, seed: int,
                    name: str = "synthetic") -> Cohort:
    """n subjects, round(n * prevalence) obstructive with severity in [0.3, 1]."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if not 0.0 < prevalence < 1.0:
        raise ValueError("prevalence must be in (0, 1)")
    n_pos = int(round(n * prevalence))
    rng = np.random.default_rng(seed)
    sample_seeds = rng.integers(0, 2**63 - 1, size=n)
    severities = rng.uniform(0.3, 1.0, size=n)
    samples = []
    width = len(str(n))
    for i in range(n):
        positive = i < n_pos
        samples.append(generate_synthetic_sample(
            profile="obstructive" if positive else "normal",
            severity=float(severities[i]) if positive else 0.0,
            noise_sd=noise_sd, seed=int(sample_seeds[i]),
            subject_id=f"S{i:0{width}d}"))
    return Cohort(samples=tuple(samples), name=name)
