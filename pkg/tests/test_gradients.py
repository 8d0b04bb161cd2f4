"""Analytic gradients against central finite differences.

The checks run on a deliberately tiny configuration (one conv layer with
kernel 3 and 2 output channels, LSTM hidden 2, projector 4 -> 8) so every
parameter can be perturbed individually in well under the time budget.
"""

import numpy as np
import pytest

from spirokit.neural import EncoderConfig, EncoderParams, ProjectorParams
from spirokit.neural.encoder import classifier_loss_and_grads
from spirokit.neural.projector import alignment_loss_and_grads

STEP = 1e-4
MAX_REL_ERR = 1e-3

TINY = EncoderConfig(conv_channels=(1, 2), conv_strides=(2,), kernel_size=3,
                     hidden=2)


def finite_diff(loss_fn, tensors):
    grads = {}
    for name, arr in tensors.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            up = loss_fn()
            flat[i] = orig - STEP
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * STEP)
        grads[name] = grad
    return grads


def relative_errors(analytic, numeric):
    out = {}
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        out[name] = np.max(np.abs(a - n) / denom)
    return out


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_classifier_gradients_match_finite_differences(backend):
    params = EncoderParams.init(TINY, seed=6)
    rng = np.random.default_rng(9)
    flows = [rng.uniform(0.2, 4.0, n) for n in (9, 7)]
    labels = np.array([1.0, 0.0])

    loss, grads, _ = classifier_loss_and_grads(params, flows, labels,
                                               backend=backend)

    def loss_fn():
        value, _, _ = classifier_loss_and_grads(params, flows, labels,
                                                backend=backend)
        return value

    numeric = finite_diff(loss_fn, params.tensors)
    errors = relative_errors(grads, numeric)
    worst = max(errors.values())
    assert worst <= MAX_REL_ERR, errors


def test_projector_alignment_gradients_match_finite_differences():
    params = ProjectorParams.init(4, 8, seed=3, dropout_rate=0.5)
    rng = np.random.default_rng(4)
    pairs = [(rng.normal(size=(5, 4)), rng.normal(size=8)),
             (rng.normal(size=(3, 4)), rng.normal(size=8))]

    loss, grads = alignment_loss_and_grads(pairs, params, mode="train", seed=21)
    assert 0.0 <= loss <= 2.0

    def loss_fn():
        value, _ = alignment_loss_and_grads(pairs, params, mode="train", seed=21)
        return value

    numeric = finite_diff(loss_fn, params.tensors)
    errors = relative_errors(grads, numeric)
    worst = max(errors.values())
    assert worst <= MAX_REL_ERR, errors


def test_projector_eval_mode_gradients():
    params = ProjectorParams.init(4, 8, seed=5, dropout_rate=0.0)
    rng = np.random.default_rng(8)
    pairs = [(rng.normal(size=(4, 4)), rng.normal(size=8))]
    _, grads = alignment_loss_and_grads(pairs, params, mode="eval")

    def loss_fn():
        value, _ = alignment_loss_and_grads(pairs, params, mode="eval")
        return value

    numeric = finite_diff(loss_fn, params.tensors)
    worst = max(relative_errors(grads, numeric).values())
    assert worst <= MAX_REL_ERR
