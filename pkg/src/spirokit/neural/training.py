"""Training loops: Adam updates, warmup/cosine schedule, early stopping.

Everything is deterministic given the config seed: batch order, parameter
init, and dropout masks all derive from it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..cohort import Cohort, stratified_split
from ..errors import DivergedLoss
from .encoder import (EncoderConfig, EncoderParams, bce_loss,
                      classifier_loss_and_grads, _forward_batch)
from . import kernels as kernels_mod
from .projector import ProjectorParams, alignment_loss_and_grads

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr_classifier: float = 3e-3
    lr_projector: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    patience: int = 5
    warmup_frac: float = 0.1
    cosine_anneal: bool = True
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr_classifier < 0 or self.lr_projector < 0:
            raise ValueError("learning rates must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_frac <= 1:
            raise ValueError("warmup_frac must be in [0, 1]")


class AdamState:
    def __init__(self, tensors: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        b1, b2 = ADAM_BETAS
        self.t += 1
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, grad in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
            tensors[name] -= lr * update


def schedule_lr(base_lr: float, step: int, total_steps: int,
                warmup_frac: float, cosine: bool) -> float:
    warmup_steps = max(int(round(warmup_frac * total_steps)), 0)
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if not cosine:
        return base_lr
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _cohort_arrays(cohort: Cohort):
    flows = [s.flow.flow_l_per_s.astype(np.float64) for s in cohort]
    labels = np.array([float(s.copd_label) for s in cohort])
    return flows, labels


def evaluate_bce(params: EncoderParams, flows, labels, batch_size=256,
                 backend=None):
    kern = kernels_mod.get_kernels(backend)
    probs = np.empty(len(flows))
    for start in range(0, len(flows), batch_size):
        chunk = flows[start:start + batch_size]
        cache = _forward_batch(chunk, params, kern)
        probs[start:start + len(chunk)] = cache.probs
    return bce_loss(probs, labels), probs


def train_classifier(cohort: Cohort, config: TrainConfig,
                     encoder_config: EncoderConfig | None = None,
                     log_path: str | Path | None = None,
                     backend: str | None = None,
                     initial_params: EncoderParams | None = None,
                     start_epoch: int = 0):
    """Mini-batch Adam on mean BCE with warmup/cosine schedule and early stop.

    Returns (best-validation EncoderParams, list of per-epoch log records).
    """
    encoder_config = encoder_config or EncoderConfig()
    train_cohort, val_cohort, _ = stratified_split(
        cohort, (1.0 - config.val_fraction, config.val_fraction, 0.0),
        seed=config.seed)
    flows, labels = _cohort_arrays(train_cohort)
    val_flows, val_labels = _cohort_arrays(val_cohort)

    params = (initial_params.copy() if initial_params is not None
              else EncoderParams.init(encoder_config, config.seed))
    adam = AdamState(params.tensors)
    rng = np.random.default_rng(config.seed + 1)

    steps_per_epoch = max(1, math.ceil(len(flows) / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    best_val = math.inf
    best_params = params.copy()
    stale_epochs = 0
    log: list[dict] = []
    step = 0

    for epoch in range(start_epoch, start_epoch + config.epochs):
        order = rng.permutation(len(flows))
        epoch_loss = 0.0
        lr = config.lr_classifier
        for start in range(0, len(flows), config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            batch_flows = [flows[i] for i in batch_idx]
            batch_labels = labels[batch_idx]
            loss, grads, _ = classifier_loss_and_grads(
                params, batch_flows, batch_labels, backend=backend)
            if not math.isfinite(loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            lr = schedule_lr(config.lr_classifier, step, total_steps,
                             config.warmup_frac, config.cosine_anneal)
            adam.step(params.tensors, grads, lr)
            epoch_loss += loss * len(batch_idx)
            step += 1
        train_loss = epoch_loss / len(flows)
        val_loss, _ = evaluate_bce(params, val_flows, val_labels,
                                   backend=backend)
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        record = {"epoch": epoch, "train_loss": train_loss,
                  "val_loss": val_loss, "learning_rate": lr}
        log.append(record)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs > config.patience:
                break

    if log_path is not None:
        with Path(log_path).open("a") as fh:
            for record in log:
                fh.write(json.dumps(record) + "\n")
    return best_params, log


def pretrain_projector(pairs, params: ProjectorParams, config: TrainConfig,
                       log_path: str | Path | None = None):
    """Full-batch Adam on the cosine alignment loss; only projector tensors move."""
    params = params.copy()
    adam = AdamState(params.tensors)
    log: list[dict] = []
    for epoch in range(config.epochs):
        loss, grads = alignment_loss_and_grads(
            pairs, params, mode="train", seed=config.seed + epoch)
        if not math.isfinite(loss):
            raise DivergedLoss(f"non-finite alignment loss at epoch {epoch}")
        lr = schedule_lr(config.lr_projector, epoch, config.epochs,
                         config.warmup_frac, config.cosine_anneal)
        adam.step(params.tensors, grads, lr)
        log.append({"epoch": epoch, "train_loss": loss, "val_loss": loss,
                    "learning_rate": lr})
    if log_path is not None:
        with Path(log_path).open("a") as fh:
            for record in log:
                fh.write(json.dumps(record) + "\n")
    return params, log
