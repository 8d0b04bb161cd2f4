"""Acceptance suite: one test per criterion, reported in the run summary.

Each test carries a criterion marker; conftest prints a PASS/FAIL line per
criterion after the run.  Tolerances are pinned here and nowhere else.
"""

import math
import re
import socket
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from spirokit.chat import ChatClient, ChatEndpointConfig
from spirokit.cohort import CodedRecord, FlowSeries, extract_copd_label, stratified_split
from spirokit.errors import OutOfRange
from spirokit.evaluation import (bootstrap_ci, compute_auprc, compute_auroc,
                                 normalize_score, run_masking_experiment)
from spirokit.gli import GliCoefficientTable, LmsTriple, lln, z_score
from spirokit.knowledge import ingest
from spirokit.metrics import GoldThresholds, compute_measured
from spirokit.morphology import MorphologyDescriptor, render_description, scan_banned_terms
from spirokit.neural import (EncoderConfig, EncoderParams, ProjectorParams,
                             TrainConfig, train_classifier)
from spirokit.neural.encoder import classifier_loss_and_grads
from spirokit.neural.projector import alignment_loss_and_grads
from spirokit.neural.training import evaluate_bce, _cohort_arrays
from spirokit.pipeline import GenerationContext
from spirokit.prompts import (build_gold_prompt, extract_patient_payload,
                              load_template, patient_payload)
from spirokit.synth import generate_cohort, generate_synthetic_sample

mpmath.mp.dps = 50

GOLDEN_DIR = Path(__file__).parent / "golden"


# --------------------------------------------------------------------------
# criterion 1: measured-metric engine vs closed-form piecewise oracle
# --------------------------------------------------------------------------

DT = 1e-3


def _random_piecewise_curve(rng):
    """Breakpoints on the sample grid; strictly single-peaked; slopes bounded."""
    t_peak = round(float(rng.uniform(0.2, 0.6)), 3)
    t_end = round(float(rng.uniform(3.0, 5.0)), 3)
    n_mid = int(rng.integers(1, 4))
    fractions = sorted(rng.choice([0.2, 0.35, 0.5, 0.65, 0.8], size=n_mid,
                                  replace=False))
    mids = [round(t_peak + fr * (t_end - t_peak), 3) for fr in fractions]
    times = np.array([0.0, t_peak] + mids + [t_end])
    pef = float(rng.uniform(6.0, 10.0))
    f_start = float(rng.uniform(0.3, 1.5))
    f_end = float(rng.uniform(0.05, 0.3))
    descend = sorted(rng.uniform(f_end + 0.3, pef - 0.5, n_mid), reverse=True)
    flows = np.array([f_start, pef] + [float(x) for x in descend] + [f_end])
    return times, flows


def _oracle_measured(times, flows):
    """Exact metrics for a piecewise-linear flow curve (quadratic volumes)."""
    slopes = np.diff(flows) / np.diff(times)
    volumes = np.concatenate(
        [[0.0], np.cumsum(0.5 * (flows[1:] + flows[:-1]) * np.diff(times))])

    def volume_at(t):
        k = np.searchsorted(times, t, side="right") - 1
        k = min(max(k, 0), len(slopes) - 1)
        tau = t - times[k]
        return volumes[k] + flows[k] * tau + 0.5 * slopes[k] * tau * tau

    def flow_at(t):
        k = np.searchsorted(times, t, side="right") - 1
        k = min(max(k, 0), len(slopes) - 1)
        return flows[k] + slopes[k] * (t - times[k])

    def time_at_volume(target):
        k = int(np.searchsorted(volumes, target, side="right")) - 1
        k = min(max(k, 0), len(slopes) - 1)
        d = target - volumes[k]
        s, f = slopes[k], flows[k]
        if abs(s) < 1e-15:
            tau = d / f
        else:
            tau = (-f + math.sqrt(f * f + 2.0 * s * d)) / s
        return times[k] + tau

    pef = float(np.max(flows))
    t_peak = float(times[int(np.argmax(flows))])
    t0 = min(max(t_peak - volume_at(t_peak) / pef, 0.0), t_peak)
    fvc = float(volumes[-1])
    fev1 = volume_at(t0 + 1.0)
    t25 = time_at_volume(0.25 * fvc)
    t75 = time_at_volume(0.75 * fvc)
    return {
        "fev1": fev1, "fvc": fvc, "pef": pef,
        "fef25_75": 0.5 * fvc / (t75 - t25),
        "fef75": flow_at(t75),
    }


@pytest.mark.criterion(1, "measured metrics match closed-form oracle (1e-4)")
def test_metric_engine_oracle():
    rng = np.random.default_rng(2024)
    curves = [_random_piecewise_curve(rng) for _ in range(100)]
    series = []
    expectations = []
    for times, flows in curves:
        grid = np.arange(0.0, times[-1] + DT / 2, DT)
        sampled = np.interp(grid, times, flows)
        series.append(FlowSeries(sample_period_s=DT, flow_l_per_s=sampled))
        expectations.append(_oracle_measured(times, flows))

    start = time.perf_counter()
    results = [compute_measured(s) for s in series]
    elapsed = time.perf_counter() - start

    for measured, expected in zip(results, expectations):
        assert abs(measured.fev1_l - expected["fev1"]) < 1e-4
        assert abs(measured.fvc_l - expected["fvc"]) < 1e-4
        assert abs(measured.pef_l_per_s - expected["pef"]) < 1e-4
        assert abs(measured.fef25_75_l_per_s - expected["fef25_75"]) < 1e-4
        assert abs(measured.fef75_l_per_s - expected["fef75"]) < 1e-4
    assert elapsed < 1.0, f"metric engine took {elapsed:.3f}s for 100 curves"


# --------------------------------------------------------------------------
# criterion 2: LMS engine vs extended-precision evaluation
# --------------------------------------------------------------------------

@pytest.mark.criterion(2, "LMS z/LLN match 50-digit evaluation (1e-9)")
def test_lms_correctness():
    rng = np.random.default_rng(501)
    checked = 0
    while checked < 1000:
        M = float(rng.uniform(0.3, 8.0))
        S = float(rng.uniform(0.05, 0.4))
        L = float(rng.uniform(-2.5, 2.5))
        measured = M * float(rng.uniform(0.5, 1.8))
        triple = LmsTriple(M=M, S=S, L=L)
        mm, mM, mS, mL = map(mpmath.mpf, (measured, M, S, L))
        expected = (mpmath.log(mm / mM) / mS if abs(L) < 1e-6
                    else ((mm / mM) ** mL - 1) / (mL * mS))
        assert abs(z_score(measured, triple) - float(expected)) < 1e-9
        base = 1.0 + L * S * (-1.645)
        if base > 0:
            assert abs(z_score(lln(triple), triple) - (-1.645)) < 1e-9
        checked += 1

    # continuity across the |L| = 1e-6 branch switch
    for ratio in (0.75, 0.9, 1.1, 1.3):
        for S in (0.1, 0.2, 0.3):
            below = z_score(ratio * 2.0, LmsTriple(M=2.0, S=S, L=0.999e-6))
            above = z_score(ratio * 2.0, LmsTriple(M=2.0, S=S, L=1.001e-6))
            assert abs(below - above) < 1e-6


# --------------------------------------------------------------------------
# criterion 3: ranking metrics exactly equal brute force
# --------------------------------------------------------------------------

def _auroc_brute(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def _auprc_brute(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            total += hits / rank
    return total / sum(labels)


@pytest.mark.criterion(3, "AUROC/AUPRC exactly equal brute-force oracles")
def test_ranking_metric_exactness():
    rng = np.random.default_rng(77)
    instances = []
    for _ in range(200):
        n = int(rng.integers(2, 31))
        labels = rng.integers(0, 2, size=n).astype(bool)
        if labels.all() or not labels.any():
            labels[0] = ~labels[0]
        scores = np.round(rng.uniform(0, 1, size=n), 1)  # ties guaranteed
        instances.append((scores, labels))

    start = time.perf_counter()
    produced = [(compute_auroc(s, l), compute_auprc(s, l)) for s, l in instances]
    elapsed = time.perf_counter() - start

    for (scores, labels), (auroc, auprc) in zip(instances, produced):
        assert auroc == _auroc_brute(list(scores), list(labels))
        assert auprc == _auprc_brute(list(scores), list(labels))
    assert elapsed < 1.0, f"ranking metrics took {elapsed:.3f}s"


# --------------------------------------------------------------------------
# criterion 4: score normalization
# --------------------------------------------------------------------------

@pytest.mark.criterion(4, "1..5 -> {0,25,50,75,100} exactly; rejects others")
def test_score_normalization():
    assert [normalize_score(r) for r in (1, 2, 3, 4, 5)] == \
        [0.0, 25.0, 50.0, 75.0, 100.0]
    for bad in (0, 6, -1, 2.5, True, None, "3"):
        with pytest.raises(OutOfRange):
            normalize_score(bad)


# --------------------------------------------------------------------------
# criterion 5: gradient checks
# --------------------------------------------------------------------------

def _finite_diff(loss_fn, tensors, step=1e-4):
    grads = {}
    for name, arr in tensors.items():
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads[name] = grad
    return grads


def _max_rel_err(analytic, numeric):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.mark.criterion(5, "analytic gradients match finite differences (1e-3)")
def test_gradient_checks():
    start = time.perf_counter()
    tiny = EncoderConfig(conv_channels=(1, 2), conv_strides=(2,),
                         kernel_size=3, hidden=2)
    params = EncoderParams.init(tiny, seed=6)
    rng = np.random.default_rng(9)
    flows = [rng.uniform(0.2, 4.0, n) for n in (9, 7)]
    labels = np.array([1.0, 0.0])
    _, grads, _ = classifier_loss_and_grads(params, flows, labels,
                                            backend="numpy")
    numeric = _finite_diff(
        lambda: classifier_loss_and_grads(params, flows, labels,
                                          backend="numpy")[0],
        params.tensors)
    assert _max_rel_err(grads, numeric) <= 1e-3

    proj = ProjectorParams.init(4, 8, seed=3, dropout_rate=0.5)
    pairs = [(rng.normal(size=(5, 4)), rng.normal(size=8)),
             (rng.normal(size=(3, 4)), rng.normal(size=8))]
    _, pgrads = alignment_loss_and_grads(pairs, proj, mode="train", seed=21)
    pnumeric = _finite_diff(
        lambda: alignment_loss_and_grads(pairs, proj, mode="train", seed=21)[0],
        proj.tensors)
    assert _max_rel_err(pgrads, pnumeric) <= 1e-3

    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"gradient checks took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# criterion 6: end-to-end encoder training
# --------------------------------------------------------------------------

@pytest.mark.criterion(6, "n=2000 training: held-out AUROC >= 0.95 in < 2 min; "
                          "rerun reproduces val loss to 1e-12")
def test_end_to_end_training():
    cohort = generate_cohort(n=2000, prevalence=0.5, noise_sd=0.05, seed=77)
    train_cohort, _, test_cohort = stratified_split(cohort, (0.85, 0.0, 0.15),
                                                    seed=1)
    config = TrainConfig(epochs=8, seed=5, batch_size=64, patience=3)

    start = time.perf_counter()
    params, log = train_classifier(train_cohort, config)
    flows, labels = _cohort_arrays(test_cohort)
    _, probs = evaluate_bce(params, flows, labels)
    elapsed = time.perf_counter() - start

    auroc = compute_auroc(probs, labels.astype(bool))
    assert auroc >= 0.95, f"held-out AUROC {auroc:.4f}"
    assert elapsed < 120.0, f"training+evaluation took {elapsed:.1f}s"

    _, log_again = train_classifier(train_cohort, config)
    assert abs(log_again[-1]["val_loss"] - log[-1]["val_loss"]) <= 1e-12


# --------------------------------------------------------------------------
# criterion 7: masking-robustness structure with a scripted endpoint
# --------------------------------------------------------------------------

@pytest.mark.criterion(7, "masked valid-response rates: textonly 0.0, "
                          "multimodal 1.0, unmasked 1.0 (scripted mock)")
def test_masking_robustness_structure(tmp_path):
    start = time.perf_counter()
    cohort = generate_cohort(n=12, prevalence=0.5, noise_sd=0.02, seed=5)
    corpus = tmp_path / "guide.md"
    corpus.write_text("# Criteria\n\nratio below 0.70 confirms obstruction\n")
    encoder_config = EncoderConfig(conv_channels=(1, 4), conv_strides=(2,),
                                   kernel_size=5, hidden=4)
    ctx = GenerationContext(
        gli_table=GliCoefficientTable.bundled(),
        thresholds=GoldThresholds.bundled(),
        index=ingest([corpus], chunk_tokens=50, overlap_tokens=10),
        encoder_params=EncoderParams.init(encoder_config, seed=0),
        projector_params=ProjectorParams.init(8, 16, seed=0))
    client = ChatClient(ChatEndpointConfig(base_url="mock://metric-gate"))
    summaries = run_masking_experiment(cohort, client, ctx, n_resamples=50,
                                       seed=0)
    elapsed = time.perf_counter() - start

    assert summaries["textonly+masked"].valid_response_rate == 0.0
    assert summaries["multimodal+masked"].valid_response_rate == 1.0
    assert summaries["multimodal+unmasked"].valid_response_rate == 1.0
    assert summaries["textonly+unmasked"].valid_response_rate == 1.0
    assert elapsed < 10.0, f"masking experiment took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# criterion 8: prompt fidelity
# --------------------------------------------------------------------------

@pytest.mark.criterion(8, "templates byte-pinned; total substitution; "
                          "10k descriptor renders pass the banned-term scan")
def test_prompt_fidelity():
    for name in ("morphology_prompt", "gold_report_prompt", "judge_prompt",
                 "query_prompt"):
        golden = (GOLDEN_DIR / f"{name}.txt").read_bytes()
        assert load_template(name).encode("utf-8") == golden, name

    from spirokit.knowledge import KnowledgeSnippet
    from spirokit.metrics import compute_pft

    sample = generate_synthetic_sample("obstructive", 0.9, 0.0, 11)
    table = GliCoefficientTable.bundled()
    metrics = compute_pft(sample.flow, sample.demographics, table)
    snippets = [KnowledgeSnippet(chunk_id=0, text="criteria text",
                                 section_path="Diagnosis", score=1.0)]
    bundle = build_gold_prompt(sample, metrics, "a morphology text", snippets,
                               ground_truth_label=True)
    assert not re.search(r"__[A-Z0-9_]+__", bundle.user_text)
    assert extract_patient_payload(bundle.user_text) == \
        patient_payload(sample, metrics, "a morphology text")

    rng = np.random.default_rng(88)
    for _ in range(10_000):
        descriptor = MorphologyDescriptor(
            peak_flow=float(rng.uniform(0.1, 15)),
            peak_volume_fraction=float(rng.uniform(0, 1)),
            peak_sharpness=float(rng.uniform(0, 2)),
            concavity_index=float(rng.uniform(-1, 1)),
            terminal_slope=float(rng.uniform(-50, 50)),
            end_volume=float(rng.uniform(0.2, 9)))
        assert scan_banned_terms(render_description(descriptor)) == []


# --------------------------------------------------------------------------
# criterion 9: bootstrap sanity
# --------------------------------------------------------------------------

@pytest.mark.criterion(9, "bootstrap: degenerate CI, Bernoulli band, "
                          "seeded reproducibility")
def test_bootstrap_sanity():
    mean_metric = lambda v, _: float(np.mean(v))  # noqa: E731

    values = np.full(25, 0.42)
    point = float(np.mean(values))
    assert bootstrap_ci(values, None, mean_metric, seed=3) == (point, point)

    rng = np.random.default_rng(1234)
    bern = (rng.random(500) < 0.5).astype(float)
    low, high = bootstrap_ci(bern, None, mean_metric, n_resamples=1000, seed=5)
    assert 0.05 <= high - low <= 0.12
    assert low <= float(bern.mean()) <= high

    again = bootstrap_ci(bern, None, mean_metric, n_resamples=1000, seed=5)
    assert again == (low, high)


# --------------------------------------------------------------------------
# criterion 10: label extraction table
# --------------------------------------------------------------------------

LISTED = ([(20002, c) for c in ("1112", "1113", "1472")]
          + [(f, c) for f in (41270, 42040)
             for c in ("J430", "J431", "J432", "J438", "439J",
                       "J440", "J441", "J448", "J449")])

UNLISTED = [(20002, "1111"), (20002, "1473"), (20002, "J449"), (20002, "0"),
            (41270, "J42"), (41270, "J45"), (41270, "I10"), (41270, "1112"),
            (41270, "J4"), (41270, "K440"), (42040, "E11"), (42040, "J181"),
            (42040, "1472"), (42040, "X99"), (42040, ""), (99999, "J449"),
            (12345, "1112"), (41271, "J430"), (2002, "1112"), (42041, "439J")]


@pytest.mark.criterion(10, "coded-record label table: all listed pairs true, "
                           "20 unlisted pairs false")
def test_label_extraction_table():
    for field_id, code in LISTED:
        assert extract_copd_label([CodedRecord(field_id, code)]) is True, \
            (field_id, code)
    assert len(UNLISTED) == 20
    for field_id, code in UNLISTED:
        assert extract_copd_label([CodedRecord(field_id, code)]) is False, \
            (field_id, code)


# --------------------------------------------------------------------------
# criterion 11: offline guarantee
# --------------------------------------------------------------------------

@pytest.mark.criterion(11, "suite runs offline: socket connects are blocked")
def test_offline_guarantee():
    # the session-wide guard (conftest) must be active for every test
    with pytest.raises(RuntimeError, match="network access is disabled"):
        socket.create_connection(("127.0.0.1", 9))
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        with pytest.raises(RuntimeError, match="network access is disabled"):
            sock.connect(("127.0.0.1", 9))
    finally:
        sock.close()
