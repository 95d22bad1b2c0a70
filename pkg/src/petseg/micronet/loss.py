"""Soft Dice + weighted cross-entropy.

    loss = mix * L_dice + (1 - mix) * L_wce
    L_dice = 1 - mean_{c >= 1} (2 sum(p_c g_c) + eps) / (sum(p_c) + sum(g_c) + eps)
    L_wce  = -mean_voxels w[t] * log p[t]

Sums run over the whole batch (batch dice). The class weights multiply the
per-voxel cross-entropy terms; the mean is over voxels, not over weights, so
scaling every weight scales L_wce by the same factor. Everything is evaluated
in float64 regardless of the network precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from .layers import log_softmax, softmax

_TINY = 1e-300


@dataclass(frozen=True)
class LossSpec:
    dice_epsilon: float = 1e-5
    class_weights: tuple | None = None
    dice_ce_mix: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.dice_ce_mix <= 1.0:
            raise ValidationError(f"dice_ce_mix must lie in [0, 1], got {self.dice_ce_mix}")
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
            if min(self.class_weights) <= 0:
                raise ValidationError("class weights must be positive")

    def weights(self, k: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(k)
        if len(self.class_weights) != k:
            raise ValidationError(f"{len(self.class_weights)} class weights for {k} classes")
        return np.asarray(self.class_weights)

    def to_dict(self) -> dict:
        return {
            "dice_epsilon": self.dice_epsilon,
            "class_weights": None if self.class_weights is None else list(self.class_weights),
            "dice_ce_mix": self.dice_ce_mix,
        }


def one_hot(target: np.ndarray, k: int) -> np.ndarray:
    """``(N, D, H, W)`` ids -> ``(N, K, D, H, W)`` float64 indicators."""
    t = np.asarray(target)
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValidationError(f"target labels must lie in [0, {k}), got range [{t.min()}, {t.max()}]")
    return (t[:, None] == np.arange(k).reshape(1, k, 1, 1, 1)).astype(np.float64)


def _terms(probs, log_probs, onehot, spec):
    k = probs.shape[1]
    axes = (0, 2, 3, 4)
    inter = 2.0 * (probs * onehot).sum(axis=axes) + spec.dice_epsilon
    denom = probs.sum(axis=axes) + onehot.sum(axis=axes) + spec.dice_epsilon
    l_dice = 1.0 - float(np.mean(inter[1:] / denom[1:]))
    w = spec.weights(k).reshape(1, k, 1, 1, 1)
    n_vox = onehot.size // k
    l_ce = -float((w * onehot * log_probs).sum()) / n_vox
    return l_dice, l_ce, inter, denom, w, n_vox


def dice_ce_loss(probs: np.ndarray, target: np.ndarray, spec: LossSpec = LossSpec()) -> float:
    p = np.asarray(probs, dtype=np.float64)
    oh = one_hot(target, p.shape[1])
    l_dice, l_ce, *_ = _terms(p, np.log(np.maximum(p, _TINY)), oh, spec)
    return spec.dice_ce_mix * l_dice + (1.0 - spec.dice_ce_mix) * l_ce


def loss_components(logits: np.ndarray, target: np.ndarray, spec: LossSpec = LossSpec()):
    z = np.asarray(logits, dtype=np.float64)
    oh = one_hot(target, z.shape[1])
    l_dice, l_ce, *_ = _terms(softmax(z), log_softmax(z), oh, spec)
    return l_dice, l_ce


def loss_from_logits(logits: np.ndarray, target: np.ndarray, spec: LossSpec = LossSpec()) -> float:
    l_dice, l_ce = loss_components(logits, target, spec)
    return spec.dice_ce_mix * l_dice + (1.0 - spec.dice_ce_mix) * l_ce


def loss_and_grad(logits: np.ndarray, target: np.ndarray, spec: LossSpec = LossSpec()):
    """Return ``(loss, d loss / d logits)``; the gradient is float64."""
    z = np.asarray(logits, dtype=np.float64)
    k = z.shape[1]
    oh = one_hot(target, k)
    p = softmax(z)
    l_dice, l_ce, inter, denom, w, n_vox = _terms(p, log_softmax(z), oh, spec)
    lam = spec.dice_ce_mix

    # dice part: gradient w.r.t. probabilities, then through the softmax
    coef = np.zeros(k)
    coef[1:] = -1.0 / (k - 1)
    dp = coef.reshape(1, k, 1, 1, 1) * (2.0 * oh * denom.reshape(1, k, 1, 1, 1) - inter.reshape(1, k, 1, 1, 1)) / (
        denom.reshape(1, k, 1, 1, 1) ** 2
    )
    dz_dice = p * (dp - (p * dp).sum(axis=1, keepdims=True))

    # cross-entropy part straight on the logits: w_t (p - onehot)
    wt = (w * oh).sum(axis=1, keepdims=True)
    dz_ce = wt * (p - oh) / n_vox

    loss = lam * l_dice + (1.0 - lam) * l_ce
    return loss, lam * dz_dice + (1.0 - lam) * dz_ce
