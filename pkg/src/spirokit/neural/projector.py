"""Feature projector: two-layer MLP with inverted dropout.

Maps encoder features row-wise into the target embedding dimension:
out = Dropout(ReLU(x W1 + b1)) W2 + b2.  Dropout is active only in train
mode and is inverted (kept units scaled by 1/(1-rate)), so eval mode applies
the raw affine pipeline with no rescaling.  The alignment objective for
pretraining is 1 - cosine(mean-pooled projection, target).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch
from .encoder import load_checkpoint, save_checkpoint


@dataclass
class ProjectorParams:
    tensors: dict[str, np.ndarray]
    dropout_rate: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        required = {"w1", "b1", "w2", "b2"}
        if set(self.tensors) != required:
            raise ValueError(f"projector tensors must be exactly {sorted(required)}")

    @property
    def in_dim(self) -> int:
        return self.tensors["w1"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.tensors["w2"].shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, seed: int,
             dropout_rate: float = 0.1) -> "ProjectorParams":
        rng = np.random.default_rng(seed)
        tensors = {
            "w1": rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, out_dim)),
            "b1": np.zeros(out_dim),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(out_dim), (out_dim, out_dim)),
            "b2": np.zeros(out_dim),
        }
        return cls(tensors, dropout_rate)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int,
              dropout_rate: float = 0.0) -> "ProjectorParams":
        return cls({"w1": np.zeros((in_dim, out_dim)), "b1": np.zeros(out_dim),
                    "w2": np.zeros((out_dim, out_dim)), "b2": np.zeros(out_dim)},
                   dropout_rate)

    def copy(self) -> "ProjectorParams":
        return ProjectorParams({k: v.copy() for k, v in self.tensors.items()},
                               self.dropout_rate)

    def save(self, path) -> None:
        save_checkpoint(path, self.tensors,
                        {"kind": "projector", "dropout_rate": self.dropout_rate})

    @classmethod
    def load(cls, path) -> "ProjectorParams":
        tensors, meta = load_checkpoint(path, expected_kind="projector")
        return cls(tensors, meta.get("dropout_rate", 0.0))


def dropout_mask(shape: tuple[int, ...], rate: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.random(shape) >= rate).astype(np.float64)


def preactivation(features: np.ndarray, params: ProjectorParams) -> np.ndarray:
    """First-layer affine output (the linear sub-path before ReLU)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.in_dim:
        raise DimensionMismatch(
            f"expected (*, {params.in_dim}) features, got {features.shape}")
    return features @ params.tensors["w1"] + params.tensors["b1"]


def projector_forward(features: np.ndarray, params: ProjectorParams,
                      mode: str = "eval", seed: int = 0) -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    out, _ = _forward_with_cache(features, params, mode, seed)
    return out


def _forward_with_cache(features, params, mode, seed):
    pre = preactivation(features, params)
    relu = np.maximum(pre, 0.0)
    if mode == "train" and params.dropout_rate > 0.0:
        mask = dropout_mask(relu.shape, params.dropout_rate, seed)
        dropped = relu * mask / (1.0 - params.dropout_rate)
    else:
        mask = None
        dropped = relu
    out = dropped @ params.tensors["w2"] + params.tensors["b2"]
    return out, (pre, mask, dropped)


def alignment_loss_and_grads(pairs, params: ProjectorParams, mode: str = "train",
                             seed: int = 0):
    """Mean (1 - cosine) between pooled projections and targets, with grads.

    pairs: sequence of (feature matrix (L_i, in_dim), target (out_dim,)).
    Each pair gets an independent dropout mask derived from (seed, index).
    """
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    w2 = params.tensors["w2"]
    total = 0.0
    for idx, (features, target) in enumerate(pairs):
        features = np.asarray(features, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        out, (pre, mask, dropped) = _forward_with_cache(
            features, params, mode, seed + 7919 * idx)
        pooled = out.mean(axis=0)
        norm_u = np.linalg.norm(pooled)
        norm_t = np.linalg.norm(target)
        if norm_u == 0.0 or norm_t == 0.0:
            total += 1.0
            continue
        cos = float(pooled @ target) / (norm_u * norm_t)
        if 1.0 - cos <= 1e-14:
            # numerically perfect alignment: the true gradient is below
            # rounding noise, and emitting noise would let Adam walk away
            # from the optimum
            total += max(1.0 - cos, 0.0)
            continue
        total += 1.0 - cos
        dpooled = -(target / (norm_u * norm_t) - cos * pooled / norm_u ** 2)
        dout = np.broadcast_to(dpooled / out.shape[0], out.shape)
        grads["w2"] += dropped.T @ dout
        grads["b2"] += dout.sum(axis=0)
        ddropped = dout @ w2.T
        if mask is not None:
            ddropped = ddropped * mask / (1.0 - params.dropout_rate)
        dpre = ddropped * (pre > 0.0)
        grads["w1"] += features.T @ dpre
        grads["b1"] += dpre.sum(axis=0)
    n = max(len(pairs), 1)
    for k in grads:
        grads[k] /= n
    return total / n, grads
