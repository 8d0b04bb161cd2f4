"""Curve-shape descriptors and the objective text renderer."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spirokit.cohort import FlowSeries
from spirokit.errors import FlatSignal
from spirokit.morphology import (BANNED_TERMS, MorphologyDescriptor,
                                 extract_descriptors, limb_shape_word,
                                 render_description, scan_banned_terms)
from spirokit.synth import generate_synthetic_sample

DT = 0.01


def _limb_series(flow_of_u, pef, total_volume, dt=DT):
    """Time series whose flow-volume limb follows flow_of_u(u), u = v/V."""
    flows = [pef]
    v = 0.0
    for _ in range(100_000):
        f_prev = flows[-1]
        # implicit step keeps the realized trapezoid volume on the curve
        f_next = flow_of_u(min((v + dt * f_prev) / total_volume, 1.0), pef)
        v += 0.5 * dt * (f_prev + f_next)
        flows.append(f_next)
        if f_next <= 0.02 * pef or v >= 0.999 * total_volume:
            break
    return FlowSeries(sample_period_s=dt, flow_l_per_s=np.asarray(flows))


def _exact_chord_series(pef=8.0, total_volume=4.0, dt=DT):
    """Every trapezoid-integrated point lies exactly on the chord."""
    flows = [pef]
    v = 0.0
    half = 0.5 * dt * pef / total_volume
    while flows[-1] > 0.02 * pef:
        f_prev = flows[-1]
        f_next = (pef * (1.0 - v / total_volume) - half * f_prev) / (1.0 + half)
        flows.append(f_next)
        v += 0.5 * dt * (f_prev + f_next)
    return FlowSeries(sample_period_s=dt, flow_l_per_s=np.asarray(flows))


def _oracle_concavity(flow: FlowSeries) -> float:
    """Independent area integration of the descending limb in f-v space."""
    f = flow.flow_l_per_s
    dt = flow.sample_period_s
    v = np.concatenate([[0.0], np.cumsum(0.5 * dt * (f[1:] + f[:-1]))])
    m = int(np.argmax(f))
    area_curve = 0.0
    for k in range(m, f.size - 1):
        area_curve += 0.5 * (f[k] + f[k + 1]) * (v[k + 1] - v[k])
    area_chord = 0.5 * (f[m] + f[-1]) * (v[-1] - v[m])
    return (area_chord - area_curve) / area_chord


class TestExtractDescriptors:
    def test_exactly_linear_limb_has_zero_concavity(self):
        d = extract_descriptors(_exact_chord_series())
        assert abs(d.concavity_index) < 1e-9

    def test_synthetic_obstructive_matches_area_oracle(self):
        sample = generate_synthetic_sample("obstructive", 1.0, 0.0, 7)
        d = extract_descriptors(sample.flow)
        assert d.concavity_index > 0.15
        assert d.concavity_index == pytest.approx(
            _oracle_concavity(sample.flow), abs=1e-9)

    def test_convex_limb_is_negative(self):
        series = _limb_series(lambda u, pef: pef * (1.0 - u ** 2), 6.0, 3.0)
        d = extract_descriptors(series)
        assert d.concavity_index < -0.1

    def test_flat_signal_rejected(self):
        with pytest.raises(FlatSignal):
            extract_descriptors(FlowSeries(sample_period_s=DT,
                                           flow_l_per_s=np.zeros(100)))

    def test_scale_invariance(self):
        sample = generate_synthetic_sample("obstructive", 0.7, 0.0, 3)
        d1 = extract_descriptors(sample.flow)
        scaled = FlowSeries(sample_period_s=DT,
                            flow_l_per_s=3.7 * sample.flow.flow_l_per_s)
        d2 = extract_descriptors(scaled)
        assert d2.concavity_index == pytest.approx(d1.concavity_index, abs=1e-12)

    def test_trailing_zero_invariance(self):
        sample = generate_synthetic_sample("normal", 0.0, 0.0, 4)
        base = extract_descriptors(sample.flow)
        extended = FlowSeries(
            sample_period_s=DT,
            flow_l_per_s=np.concatenate([sample.flow.flow_l_per_s, np.zeros(300)]))
        tail = extract_descriptors(extended)
        assert tail.concavity_index == pytest.approx(base.concavity_index,
                                                     abs=1e-6)
        assert tail.end_volume == pytest.approx(base.end_volume, abs=1e-9)

    def test_descriptor_ranges(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            flow = FlowSeries(sample_period_s=DT,
                              flow_l_per_s=rng.uniform(0.01, 8, size=400))
            d = extract_descriptors(flow)
            assert 0.0 <= d.peak_volume_fraction <= 1.0
            assert -1.0 <= d.concavity_index <= 1.0


def _descriptor(concavity):
    return MorphologyDescriptor(peak_flow=7.5, peak_volume_fraction=0.14,
                                peak_sharpness=0.05, concavity_index=concavity,
                                terminal_slope=-2.0, end_volume=4.2)


class TestRenderDescription:
    def test_concave_wording(self):
        assert "concave" in render_description(_descriptor(0.3))

    def test_linear_wording(self):
        text = render_description(_descriptor(0.0))
        assert "linear" in text
        assert "concave" not in text

    def test_convex_wording(self):
        assert "convex" in render_description(_descriptor(-0.2))

    def test_shape_word_thresholds(self):
        assert limb_shape_word(0.051) == "concave"
        assert limb_shape_word(0.05) == "linear"
        assert limb_shape_word(-0.05) == "linear"
        assert limb_shape_word(-0.051) == "convex"

    @settings(max_examples=300, deadline=None)
    @given(
        peak_flow=st.floats(0.1, 15.0),
        pvf=st.floats(0.0, 1.0),
        sharp=st.floats(0.0, 2.0),
        concavity=st.floats(-1.0, 1.0),
        slope=st.floats(-50.0, 50.0),
        end_volume=st.floats(0.2, 9.0),
    )
    def test_never_emits_banned_terms(self, peak_flow, pvf, sharp, concavity,
                                      slope, end_volume):
        d = MorphologyDescriptor(peak_flow=peak_flow, peak_volume_fraction=pvf,
                                 peak_sharpness=sharp, concavity_index=concavity,
                                 terminal_slope=slope, end_volume=end_volume)
        assert scan_banned_terms(render_description(d)) == []


class TestBannedScan:
    def test_detects_each_term(self):
        for term in BANNED_TERMS:
            assert scan_banned_terms(f"This looks {term} to me.")
            assert scan_banned_terms(f"this looks {term.upper()} to me.")

    def test_word_boundaries(self):
        assert scan_banned_terms("The construction is sound.") == []
        assert scan_banned_terms("a subnormal reading") == []
        assert scan_banned_terms("an abnormal reading") == ["abnormal"]
