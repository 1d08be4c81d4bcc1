"""Adversarial multi-task training: source-only, DANN and MDANN modes.

One backward pass over ``L_C + CE_D`` gives all three gradient sets because
the reversal layer already scales the extractor's share of the domain
gradient by ``-(lambda * tau)``.  The discriminator's own gradient is then
multiplied by ``lambda`` so lambda enters each branch exactly once.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ReversalScale
from .data.augment import AugmentPolicy, augment
from .data.splits import make_batches
from .data.synth import ImageSample
from .errors import InvalidConfig, TrainingAborted
from .model import (
    BackboneConfig,
    ModelParams,
    build_model,
    classify,
    discriminate,
    extract_features,
    param_grads,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

MODES = ("source_only", "dann", "mdann")
METRICS_HEADER = ("epoch", "tau", "loss_c", "loss_d", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    mode: str = "dann"
    epochs: int = 90
    batch_size: int = 6
    learning_rate: float = 0.001
    weight_decay: float = 0.001
    lam: float = 1.0
    seed: int = 0
    checkpoint_path: str | None = None
    augment: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be > 0")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if not self.lam >= 0:
            raise InvalidConfig("lam must be >= 0")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be >= 0")


def tau(t_i: int, t: int) -> float:
    """Reversal ramp ``2 / (1 + exp(-10 t_i / t)) - 1``: 0 at the start, near 1 at the end."""
    if t < 1:
        raise InvalidConfig("total epochs must be >= 1")
    if not 0 <= t_i <= t:
        raise InvalidConfig(f"epoch index {t_i} outside [0, {t}]")
    return 2.0 / (1.0 + math.exp(-10.0 * t_i / t)) - 1.0


@dataclass
class TauSchedule:
    total_epochs: int
    current_epoch: int = 0

    @property
    def value(self) -> float:
        return tau(self.current_epoch, self.total_epochs)


@dataclass
class LossBreakdown:
    """Batch losses.  ``loss_d`` is the lambda-weighted domain cross-entropy."""

    loss_c: float
    loss_d: float
    total: float
    objective: ad.Tensor | None = field(default=None, repr=False)
    class_probs: np.ndarray | None = field(default=None, repr=False)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def stack_pixels(batch: list[ImageSample]) -> np.ndarray:
    return np.stack([s.pixels for s in batch])[:, None]


def compute_losses(params: ModelParams, batch: list[ImageSample], schedule: TauSchedule, config: TrainConfig,
                   domain_branch: str = "reversal") -> LossBreakdown:
    """Build the forward graph for one batch.

    ``domain_branch`` selects how the discriminator sees the embedding:
    ``"reversal"`` (training), ``"detached"`` (no gradient reaches the
    extractor) or ``"plain"`` (no reversal layer).  Source-only mode never
    builds the domain branch.
    """
    if not batch:
        raise InvalidConfig("empty batch")
    x = stack_pixels(batch)
    e = extract_features(params, x)
    loss_c, probs = ad.softmax_cross_entropy(classify(params, e), [s.class_label for s in batch])
    if config.mode == "source_only":
        lc = float(loss_c.values)
        return LossBreakdown(lc, 0.0, lc, loss_c, probs)
    if domain_branch == "reversal":
        d_logits = discriminate(params, e, ReversalScale(config.lam, schedule.value))
    elif domain_branch == "detached":
        d_logits = discriminate(params, e.tape.leaf(e.values), None)
    elif domain_branch == "plain":
        d_logits = discriminate(params, e, None)
    else:
        raise InvalidConfig(f"unknown domain_branch {domain_branch!r}")
    ce_d, _ = ad.softmax_cross_entropy(d_logits, [s.domain_label for s in batch])
    objective = ad.add(loss_c, ce_d)
    lc = float(loss_c.values)
    ld = config.lam * float(ce_d.values)
    return LossBreakdown(lc, ld, lc + ld, objective, probs)


def adamw_step(group: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, weight_decay: float) -> None:
    """In-place AdamW update with decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in group.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def new_optimizer_states(params: ModelParams) -> dict[str, OptimizerState]:
    return {name: OptimizerState() for name in params.groups}


def compute_gradients(params: ModelParams, breakdown: LossBreakdown, config: TrainConfig) -> dict[str, np.ndarray]:
    """Parameter gradients of one batch, lambda applied to the discriminator."""
    tape = breakdown.objective.tape
    grads = param_grads(params, tape, ad.backward(breakdown.objective))
    if config.mode != "source_only":
        for name in params.theta_d:
            grads[name] = grads[name] * config.lam
    return grads


def train_step(params: ModelParams, batch: list[ImageSample], schedule: TauSchedule, config: TrainConfig,
               opt_states: dict[str, OptimizerState], domain_branch: str = "reversal") -> LossBreakdown:
    bd = compute_losses(params, batch, schedule, config, domain_branch)
    grads = compute_gradients(params, bd, config)
    for gname, group in params.groups.items():
        if gname == "theta_d" and config.mode == "source_only":
            continue
        adamw_step(group, {k: grads[k] for k in group}, opt_states[gname], config.learning_rate,
                   config.weight_decay)
    return bd


def predict(params: ModelParams, samples: list[ImageSample], batch_size: int = 128):
    """``(class_logits, embeddings)`` for ``samples`` as numpy arrays."""
    logits, embs = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        e = extract_features(params, stack_pixels(chunk))
        logits.append(classify(params, e).values)
        embs.append(e.values)
    return np.concatenate(logits), np.concatenate(embs)


def evaluate_loss(params: ModelParams, samples: list[ImageSample]) -> tuple[float, float]:
    """Mean class cross-entropy and accuracy over ``samples``."""
    logits, _ = predict(params, samples)
    labels = np.array([s.class_label for s in samples])
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return float(loss), acc


@dataclass
class TrainData:
    """Labelled inputs to :func:`fit`.

    Source samples carry domain label 0; target shots carry 1..m-1.
    """

    source_train: list[ImageSample]
    source_val: list[ImageSample]
    target_shots: list[ImageSample] = field(default_factory=list)
    num_domains: int = 2


@dataclass
class CheckpointMeta:
    epoch: int
    validation_loss: float
    validation_accuracy: float
    config_hash: str


@dataclass
class FitResult:
    params: ModelParams
    meta: CheckpointMeta
    log: list[dict]

    def metrics_csv(self) -> str:
        return format_metrics(self.log)


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["epoch"]] + [f"{r[k]:.9g}" for k in METRICS_HEADER[1:]])
    return buf.getvalue()


def fit(config: TrainConfig, data: TrainData, backbone: BackboneConfig | None = None,
        policy: AugmentPolicy | None = None, checkpoint_meta: dict | None = None,
        on_epoch=None) -> FitResult:
    """Train for ``config.epochs`` epochs and keep the lowest-validation-loss weights.

    Validation uses source-domain classification loss only.  tau is updated
    once per epoch from the epoch index.  In source-only mode target shots
    are ignored.
    """
    backbone = backbone or BackboneConfig(num_domains=max(2, data.num_domains))
    if backbone.num_domains < data.num_domains:
        raise InvalidConfig(f"backbone has {backbone.num_domains} domains, data needs {data.num_domains}")
    policy = policy if policy is not None else (AugmentPolicy() if config.augment else AugmentPolicy.disabled())
    params = build_model(backbone, seed=config.seed)
    states = new_optimizer_states(params)
    shots = [] if config.mode == "source_only" else data.target_shots
    batcher = make_batches(data.source_train, shots, config.batch_size, seed=config.seed)
    aug_root = np.random.SeedSequence([config.seed, 0xA06])
    log: list[dict] = []
    best: ModelParams | None = None
    best_meta: CheckpointMeta | None = None
    for epoch in range(config.epochs):
        schedule = TauSchedule(config.epochs, epoch)
        lc_sum = ld_sum = 0.0
        n_seen = 0
        for b, batch in enumerate(batcher.epoch(epoch)):
            seeds = np.random.SeedSequence(aug_root.entropy, spawn_key=(epoch, b)).spawn(len(batch))
            batch = [augment(s, policy, sd) for s, sd in zip(batch, seeds)]
            bd = train_step(params, batch, schedule, config, states)
            lc_sum += bd.loss_c * len(batch)
            ld_sum += bd.loss_d * len(batch)
            n_seen += len(batch)
        val_loss, val_acc = evaluate_loss(params, data.source_val)
        row = {
            "epoch": epoch,
            "tau": schedule.value,
            "loss_c": lc_sum / n_seen,
            "loss_d": ld_sum / n_seen,
            "val_loss": val_loss,
            "val_acc": val_acc,
        }
        log.append(row)
        logger.info("epoch %d tau=%.4f loss_c=%.4f loss_d=%.4f val_loss=%.4f val_acc=%.3f", epoch,
                    row["tau"], row["loss_c"], row["loss_d"], val_loss, val_acc)
        if best_meta is None or val_loss < best_meta.validation_loss:
            best = params.copy()
            best_meta = CheckpointMeta(epoch, val_loss, val_acc, backbone.config_hash())
            if config.checkpoint_path:
                meta = dict(checkpoint_meta or {})
                meta.update(epoch=epoch, validation_loss=val_loss, validation_accuracy=val_acc)
                save_checkpoint(Path(config.checkpoint_path), best, meta)
        if on_epoch is not None:
            on_epoch(row)
    return FitResult(best, best_meta, log)
