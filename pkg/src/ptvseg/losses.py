"""Training objectives: binary cross-entropy and soft-Dice, with gradients.

Both losses take a prediction map ``p`` with values in (0, 1) and a
binary ground-truth map ``y`` of the same shape, and return the scalar
loss together with its per-pixel gradient. BCE is reduced as the mean
over pixels so the learning rate does not depend on resolution. The
Dice loss uses sums over the whole sample with a +1 smoothing term in
numerator and denominator, which makes the empty-vs-empty case exact
zero instead of undefined.

``loss_from_logits`` is the numerically stable entry point used during
training: it evaluates the same quantities directly from pre-sigmoid
logits and returns the gradient with respect to the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ops import sigmoid_forward

BCEL = "bcel"
DICE = "dice"
LOSS_KINDS = (BCEL, DICE)

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class LossValue:
    scalar: float
    grad: np.ndarray  # same shape as the prediction


def _check_pair(p: np.ndarray, y: np.ndarray) -> None:
    if p.shape != y.shape:
        raise ShapeError("shape", f"prediction {p.shape} vs ground truth {y.shape}")


def bce_loss(p: np.ndarray, y: np.ndarray) -> LossValue:
    """Mean per-pixel binary cross-entropy.

    p is clamped to [1e-7, 1 - 1e-7] before the logs; the gradient is
    (p - y) / (p (1 - p)) / N evaluated at the clamped p.
    """
    _check_pair(p, y)
    n = p.size
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    scalar = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    grad = (pc - y) / (pc * (1.0 - pc)) / n
    return LossValue(scalar, grad)


def dice_loss(p: np.ndarray, y: np.ndarray) -> LossValue:
    """Smoothed soft-Dice loss, 1 - (2*sum(y p) + 1) / (sum(y) + sum(p) + 1)."""
    _check_pair(p, y)
    inter = float((y * p).sum())
    total = float(y.sum() + p.sum())
    num = 2.0 * inter + 1.0
    den = total + 1.0
    scalar = 1.0 - num / den
    # quotient rule: d/dp_i [num/den] = (2 y_i den - num) / den^2
    grad = -(2.0 * y * den - num) / (den * den)
    return LossValue(scalar, grad)


def loss_from_logits(logits: np.ndarray, y: np.ndarray, kind: str) -> LossValue:
    """Sigmoid fused with the chosen loss, stable for |logit| up to 1e3.

    The value equals composing ``sigmoid_forward`` with ``bce_loss`` or
    ``dice_loss`` exactly (the sigmoid never overflows and the BCE clamp
    is applied identically). The returned gradient is with respect to
    the logits: for BCE the chain collapses to (p - y) / N, for Dice it
    is the Dice gradient scaled by sigmoid's derivative.
    """
    _check_pair(logits, y)
    p = sigmoid_forward(logits)
    if kind == BCEL:
        inner = bce_loss(p, y)
        pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
        return LossValue(inner.scalar, (pc - y) / y.size)
    if kind == DICE:
        inner = dice_loss(p, y)
        return LossValue(inner.scalar, inner.grad * p * (1.0 - p))
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
