"""Alignment losses and the Adam training loop over the adapter parameters.

Each level contributes a Dice + Focal segmentation term, computed on the
anomaly-probability map upsampled to image resolution, plus a BCE term on
the max anomaly probability over the grid. The total loss sums the
included levels. Samples without a pixel mask contribute only the BCE
term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .adaptation import AdaptedFeatures, MVFAParams, adapt_forward, similarity_logits
from .autograd import Tensor
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError

PROB_EPS = 1e-7
FOCAL_GAMMA = 2.0
DICE_SMOOTH = 1.0


@dataclass
class LossWeights:
    lambda1: float = 1.0  # dice
    lambda2: float = 1.0  # focal
    lambda3: float = 1.0  # bce

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    gamma: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 0.07
    levels: tuple = (1, 2, 3, 4)

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if not self.levels or any(l not in (1, 2, 3, 4) for l in self.levels):
            raise ConfigError(f"levels must be a nonempty subset of 1..4, got {self.levels}")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        weights = LossWeights(raw.pop("lambda1", 1.0), raw.pop("lambda2", 1.0),
                              raw.pop("lambda3", 1.0))
        levels = tuple(raw.pop("levels", (1, 2, 3, 4)))
        return cls(weights=weights, levels=levels, **raw)


def _as_mask(s, like: Tensor):
    if isinstance(s, Tensor):
        s = s.data
    arr = np.asarray(s)
    if arr.shape != like.shape:
        raise ShapeError(f"mask shape {arr.shape} does not match map shape {like.shape}")
    return arr.astype(like.dtype)


def dice_loss(p: Tensor, s) -> Tensor:
    """1 - (2 sum(p*s) + 1) / (sum(p) + sum(s) + 1)."""
    mask = _as_mask(s, p)
    inter = ag.sum(ag.mul(p, Tensor(mask)))
    numer = ag.add(ag.scale(inter, 2.0), DICE_SMOOTH)
    denom = ag.add(ag.sum(p), float(mask.sum()) + DICE_SMOOTH)
    return ag.add(ag.scale(ag.div(numer, denom), -1.0), 1.0)


def focal_loss(p: Tensor, s) -> Tensor:
    """Mean of -(1 - p_t)^2 log(p_t) with p_t = p on positives else 1 - p."""
    mask = _as_mask(s, p)
    m = Tensor(mask)
    p_t = ag.add(ag.mul(p, m), ag.mul(ag.add(ag.scale(p, -1.0), 1.0), Tensor(1.0 - mask)))
    p_t = ag.clip(p_t, PROB_EPS, 1.0 - PROB_EPS)
    one_minus = ag.add(ag.scale(p_t, -1.0), 1.0)
    weight = ag.mul(one_minus, one_minus)  # focusing exponent 2
    return ag.scale(ag.mean(ag.mul(weight, ag.log(p_t))), -1.0)


def bce_image(prob: Tensor, c) -> Tensor:
    """Binary cross-entropy of a scalar probability against label c."""
    c = int(c)
    prob = ag.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    if c == 1:
        return ag.scale(ag.log(prob), -1.0)
    return ag.scale(ag.log(ag.add(ag.scale(prob, -1.0), 1.0)), -1.0)


def _anomaly_column(features: Tensor, f_text: Tensor, tau) -> Tensor:
    """Grid anomaly probabilities: softmax over the two text rows, column 1."""
    probs = ag.softmax_rows(similarity_logits(features, f_text, tau))
    selector = Tensor(np.array([[0.0], [1.0]], dtype=probs.dtype))
    return ag.matmul(probs, selector)


def level_loss(cls_l: Tensor, seg_l: Tensor, f_text: Tensor, c, s, weights: LossWeights,
               tau=0.07, out_hw=None) -> Tensor:
    """One level's weighted Dice + Focal + BCE; seg terms skip when s is None."""
    parts = []
    if s is not None and (weights.lambda1 > 0 or weights.lambda2 > 0):
        grid = int(math.isqrt(seg_l.shape[0]))
        if grid * grid != seg_l.shape[0]:
            raise ShapeError(f"grid count {seg_l.shape[0]} is not a perfect square")
        if out_hw is None:
            out_hw = np.asarray(s).shape
        anomaly = _anomaly_column(seg_l, f_text, tau)
        upsampled = ag.bilinear_upsample(ag.reshape(anomaly, (grid, grid)), out_hw)
        if weights.lambda1 > 0:
            parts.append(ag.scale(dice_loss(upsampled, s), weights.lambda1))
        if weights.lambda2 > 0:
            parts.append(ag.scale(focal_loss(upsampled, s), weights.lambda2))
    if weights.lambda3 > 0:
        peak = ag.max(_anomaly_column(cls_l, f_text, tau))
        parts.append(ag.scale(bce_image(peak, c), weights.lambda3))
    if not parts:
        return Tensor(np.zeros((), dtype=cls_l.dtype))
    total = parts[0]
    for part in parts[1:]:
        total = ag.add(total, part)
    return total


def total_loss(features: AdaptedFeatures, f_text: Tensor, c, s, weights: LossWeights,
               tau=0.07, out_hw=None, levels=(1, 2, 3, 4)) -> Tensor:
    """Sum of level losses over the included levels."""
    total = None
    for level in levels:
        ll = level_loss(features.cls[level - 1], features.seg[level - 1], f_text,
                        c, s, weights, tau=tau, out_hw=out_hw)
        total = ll if total is None else ag.add(total, ll)
    return total


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, named_params):
        self.m = {t: np.zeros_like(t.data) for _, t in named_params}
        self.v = {t: np.zeros_like(t.data) for _, t in named_params}
        self.step = 0


def adam_step(named_params, grads, state: AdamState, lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, applied in place."""
    state.step += 1
    t = state.step
    for name, p in named_params:
        if p not in grads:
            raise ContractError(f"adam_step: missing gradient for {name!r}")
        g = grads[p].data
        m = state.m[p] = beta1 * state.m[p] + (1 - beta1) * g
        v = state.v[p] = beta2 * state.v[p] + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def train(backbone, params: MVFAParams, samples, text_features: dict,
          config: TrainConfig, loss_log_path=None, on_epoch=None):
    """Optimize the adapter parameters on loaded samples.

    ``samples`` are objects with image/label/mask/modality attributes;
    ``text_features`` maps each modality to its 2 x d text tensor. Returns
    the per-epoch mean losses and optionally appends them to a CSV file.
    """
    if not samples:
        raise DataError("training set is empty")
    for sample in samples:
        if sample.modality not in text_features:
            raise DataError(f"no text features for modality {sample.modality!r}")

    named = params.named_tensors()
    state = AdamState(named)
    rng = np.random.default_rng(config.seed)
    out_hw = (backbone.config.image_size, backbone.config.image_size)
    history = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        weighted = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            batch = None
            for index in chunk:
                sample = samples[index]
                features, _ = adapt_forward(backbone, params, sample.image)
                loss = total_loss(features, text_features[sample.modality],
                                  sample.label, sample.mask, config.weights,
                                  tau=config.tau, out_hw=out_hw, levels=config.levels)
                batch = loss if batch is None else ag.add(batch, loss)
            batch = ag.scale(batch, 1.0 / len(chunk))
            value = float(batch.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch + 1}, step {state.step + 1}")
            grads = ag.backward(batch)
            # ablation level masks can leave some tensors off the loss path
            active = [(n, p) for n, p in named if p in grads]
            adam_step(active, grads, state, config.lr)
            weighted += value * len(chunk)
        history.append(weighted / len(samples))
        if on_epoch is not None:
            on_epoch(epoch + 1, history[-1])

    if loss_log_path is not None:
        lines = ["epoch,mean_loss"]
        lines += [f"{i + 1},{value:.8f}" for i, value in enumerate(history)]
        from .fileio import write_text_atomic
        write_text_atomic(loss_log_path, "\n".join(lines) + "\n")
    return history
