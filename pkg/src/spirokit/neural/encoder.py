"""Sequence encoder: strided 1-D conv stack into a bidirectional LSTM.

Per-step features are the concatenated forward/backward hidden states; the
classification head is a sigmoid affine over the masked mean-pooled
features.  All math is float64 and runs through the pluggable kernels
backend; forward and backward passes for a padded batch are exactly equal
to stacked single-sample passes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ..cohort import FlowSeries
from ..errors import TooShortForReceptiveField
from . import kernels as kernels_mod

CHECKPOINT_FORMAT = "spirokit-checkpoint/1"


@dataclass(frozen=True)
class EncoderConfig:
    conv_channels: tuple[int, ...] = (1, 8, 16)
    conv_strides: tuple[int, ...] = (2, 2)
    kernel_size: int = 5
    hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "conv_strides", tuple(self.conv_strides))
        if len(self.conv_channels) != len(self.conv_strides) + 1:
            raise ValueError("need one stride per conv layer")
        if self.conv_channels[0] != 1:
            raise ValueError("first conv layer must take the single flow channel")

    @property
    def n_layers(self) -> int:
        return len(self.conv_strides)

    @property
    def feature_dim(self) -> int:
        return 2 * self.hidden

    @property
    def temporal_stride(self) -> int:
        return int(np.prod(self.conv_strides))

    @property
    def receptive_field(self) -> int:
        rf = 1
        for stride in reversed(self.conv_strides):
            rf = (rf - 1) * stride + self.kernel_size
        return rf


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    @staticmethod
    def tensor_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer, (c_in, c_out) in enumerate(
                zip(config.conv_channels, config.conv_channels[1:])):
            shapes[f"conv{layer}_w"] = (config.kernel_size, c_in, c_out)
            shapes[f"conv{layer}_b"] = (c_out,)
        lstm_in = config.conv_channels[-1]
        for direction in ("fwd", "bwd"):
            shapes[f"lstm_{direction}_w"] = (lstm_in, 4 * config.hidden)
            shapes[f"lstm_{direction}_u"] = (config.hidden, 4 * config.hidden)
            shapes[f"lstm_{direction}_b"] = (4 * config.hidden,)
        shapes["head_w"] = (config.feature_dim,)
        shapes["head_b"] = (1,)
        return shapes

    @classmethod
    def zeros(cls, config: EncoderConfig) -> "EncoderParams":
        return cls(config, {name: np.zeros(shape) for name, shape
                            in cls.tensor_shapes(config).items()})

    @classmethod
    def init(cls, config: EncoderConfig, seed: int) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in cls.tensor_shapes(config).items():
            if name.endswith("_b"):
                tensors[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
                tensors[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
        # positive forget-gate bias stabilizes early training
        hidden = config.hidden
        for direction in ("fwd", "bwd"):
            tensors[f"lstm_{direction}_b"][hidden:2 * hidden] = 1.0
        return cls(config, tensors)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config,
                             {k: v.copy() for k, v in self.tensors.items()})

    def save(self, path) -> None:
        save_checkpoint(path, self.tensors, {
            "kind": "encoder",
            "config": {
                "conv_channels": list(self.config.conv_channels),
                "conv_strides": list(self.config.conv_strides),
                "kernel_size": self.config.kernel_size,
                "hidden": self.config.hidden,
            },
        })

    @classmethod
    def load(cls, path) -> "EncoderParams":
        tensors, meta = load_checkpoint(path, expected_kind="encoder")
        cfg = meta["config"]
        config = EncoderConfig(conv_channels=tuple(cfg["conv_channels"]),
                               conv_strides=tuple(cfg["conv_strides"]),
                               kernel_size=cfg["kernel_size"],
                               hidden=cfg["hidden"])
        return cls(config, tensors)


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    meta = dict(meta)
    meta["format"] = CHECKPOINT_FORMAT
    blob = json.dumps(meta).encode("utf-8")
    np.savez(path, __meta__=np.frombuffer(blob, dtype=np.uint8),
             **{k: np.asarray(v) for k, v in tensors.items()})


def load_checkpoint(path, expected_kind: str | None = None):
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"].tobytes()).decode("utf-8"))
        tensors = {k: archive[k].copy() for k in archive.files if k != "__meta__"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    if expected_kind and meta.get("kind") != expected_kind:
        raise ValueError(f"checkpoint kind {meta.get('kind')!r}, "
                         f"expected {expected_kind!r}")
    return tensors, meta


@dataclass(frozen=True)
class EncoderOutput:
    features: np.ndarray  # (L_i, feature_dim)
    copd_probability: float


def _pad_time_major(arrays: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    t_max = int(lengths.max())
    channels = arrays[0].shape[1] if arrays[0].ndim == 2 else 1
    out = np.zeros((t_max, len(arrays), channels))
    for i, arr in enumerate(arrays):
        out[:arr.shape[0], i, :] = arr.reshape(arr.shape[0], channels)
    return out, lengths


def _length_mask(t_max: int, lengths: np.ndarray) -> np.ndarray:
    return (np.arange(t_max)[:, None] < lengths[None, :]).astype(np.float64)


def _reverse_padded(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for i, n in enumerate(lengths):
        out[:n, i] = x[n - 1::-1, i]
    return out


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


class _ForwardCache:
    __slots__ = ("conv", "lstm_fwd", "lstm_bwd", "x_rev", "features", "mask",
                 "lengths", "pooled", "probs", "logits", "x0", "conv_out")

    def __init__(self):
        self.conv = []


def _forward_batch(flows: list[np.ndarray], params: EncoderParams, kern
                   ) -> _ForwardCache:
    config = params.config
    for arr in flows:
        if arr.shape[0] < config.receptive_field:
            raise TooShortForReceptiveField(
                f"series length {arr.shape[0]} < receptive field "
                f"{config.receptive_field}")
    cache = _ForwardCache()
    x, lengths = _pad_time_major([a.reshape(-1, 1) for a in flows])
    cache.x0 = x
    for layer in range(config.n_layers):
        w = params.tensors[f"conv{layer}_w"]
        b = params.tensors[f"conv{layer}_b"]
        stride = config.conv_strides[layer]
        pad_to = kernels_mod.padded_input_length(x.shape[0], config.kernel_size,
                                                 stride)
        xp = np.zeros((pad_to, x.shape[1], x.shape[2]))
        xp[:x.shape[0]] = x
        z = kern.conv1d_forward(xp, w, b, stride)
        lengths = -(-lengths // stride)  # ceil
        mask = _length_mask(z.shape[0], lengths)[:, :, None]
        a = np.maximum(z, 0.0) * mask
        cache.conv.append((xp, z, mask, stride))
        x = a
    cache.lengths = lengths
    cache.mask = _length_mask(x.shape[0], lengths)[:, :, None]

    t = params.tensors
    cache.lstm_fwd = kern.lstm_forward(x, t["lstm_fwd_w"], t["lstm_fwd_u"],
                                       t["lstm_fwd_b"])
    cache.x_rev = _reverse_padded(x, lengths)
    cache.lstm_bwd = kern.lstm_forward(cache.x_rev, t["lstm_bwd_w"],
                                       t["lstm_bwd_u"], t["lstm_bwd_b"])
    h_fwd = cache.lstm_fwd[0]
    h_bwd = _reverse_padded(cache.lstm_bwd[0], lengths)
    features = np.concatenate([h_fwd, h_bwd], axis=2) * cache.mask
    cache.features = features
    pooled = features.sum(axis=0) / lengths[:, None]
    cache.pooled = pooled
    cache.logits = pooled @ t["head_w"] + t["head_b"][0]
    cache.probs = _sigmoid(cache.logits)
    # keep the conv output around for the lstm backward pass
    cache.conv_out = x
    return cache


def encoder_forward(flow: FlowSeries | np.ndarray, params: EncoderParams,
                    mode: str = "eval", backend: str | None = None
                    ) -> EncoderOutput:
    """Features (L x feature_dim) and COPD probability for one series.

    mode is accepted for interface symmetry; the encoder has no
    train-only stochastic pieces.
    """
    del mode
    kern = kernels_mod.get_kernels(backend)
    arr = flow.flow_l_per_s if isinstance(flow, FlowSeries) else np.asarray(flow)
    cache = _forward_batch([arr.astype(np.float64)], params, kern)
    n = int(cache.lengths[0])
    return EncoderOutput(features=cache.features[:n, 0, :].copy(),
                         copd_probability=float(cache.probs[0]))


def bce_loss(probs: np.ndarray, labels: np.ndarray, eps: float = 1e-12) -> float:
    p = np.clip(probs, eps, 1.0 - eps)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))


def classifier_loss_and_grads(params: EncoderParams, flows: list[np.ndarray],
                              labels: np.ndarray, backend: str | None = None
                              ) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean BCE over the batch plus analytic gradients for every tensor."""
    kern = kernels_mod.get_kernels(backend)
    config = params.config
    t = params.tensors
    cache = _forward_batch(flows, params, kern)
    batch = len(flows)
    labels = np.asarray(labels, dtype=np.float64)
    loss = bce_loss(cache.probs, labels)

    grads = {name: np.zeros_like(arr) for name, arr in t.items()}
    dlogit = (cache.probs - labels) / batch
    grads["head_w"] = cache.pooled.T @ dlogit
    grads["head_b"] = np.array([dlogit.sum()])
    dpooled = dlogit[:, None] * t["head_w"][None, :]
    dfeatures = cache.mask * (dpooled / cache.lengths[:, None])[None, :, :]

    hidden = config.hidden
    dh_fwd = np.ascontiguousarray(dfeatures[:, :, :hidden])
    dh_bwd = _reverse_padded(np.ascontiguousarray(dfeatures[:, :, hidden:]),
                             cache.lengths)

    x_conv = cache.conv_out
    h_all, gi, gf, gg, go, cells = cache.lstm_fwd
    dx_f, dw, du, db = kern.lstm_backward(x_conv, t["lstm_fwd_w"],
                                          t["lstm_fwd_u"], h_all, gi, gf, gg,
                                          go, cells, dh_fwd)
    grads["lstm_fwd_w"], grads["lstm_fwd_u"], grads["lstm_fwd_b"] = dw, du, db
    h_all, gi, gf, gg, go, cells = cache.lstm_bwd
    dx_r, dw, du, db = kern.lstm_backward(cache.x_rev, t["lstm_bwd_w"],
                                          t["lstm_bwd_u"], h_all, gi, gf, gg,
                                          go, cells, dh_bwd)
    grads["lstm_bwd_w"], grads["lstm_bwd_u"], grads["lstm_bwd_b"] = dw, du, db
    dx = dx_f + _reverse_padded(dx_r, cache.lengths)

    for layer in range(config.n_layers - 1, -1, -1):
        xp, z, mask, stride = cache.conv[layer]
        dz = dx * mask * (z > 0.0)
        dxp, dw, db = kern.conv1d_backward(xp, t[f"conv{layer}_w"], stride, dz)
        grads[f"conv{layer}_w"] = dw
        grads[f"conv{layer}_b"] = db
        prev_len = cache.conv[layer - 1][1].shape[0] if layer else cache.x0.shape[0]
        dx = dxp[:prev_len]
    return loss, grads, cache.probs
