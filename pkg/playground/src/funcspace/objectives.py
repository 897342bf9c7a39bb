"""
Module that contains the objectives used to train the autoencoder and to search its embedding space.

- :class:`MinLoss` and :class:`PNormLoss` aggregate per-decoder reconstruction errors of a batch.
- :class:`SparsityPenalty` is the scaled L1 norm plus the soft count of weights above a threshold.
- :class:`SearchObjective` is the squared error of a decoded network on a minibatch plus the penalty.
- :func:`mpe` is the median percentage error used for every reported accuracy.

"""

from abc import ABC, abstractmethod

import numpy as np
import torch

from . import diffcore
from .netrep import effective_weights, from_matrix, matrix_forward
from .utilities import rc

P_NORM_FLOOR = 1e-12
L1_SCALE = 0.1
SOFTCOUNT_SCALE = 0.5
SOFTCOUNT_SHARPNESS = 10.0


class Objective(ABC):
    def __init__(self):
        pass

    @abstractmethod
    def __call__(self):
        pass


class MinLoss(Objective):
    """Sum over networks of the smallest decoder error; gradients reach the arg-min decoder only."""

    name = "min"

    def __call__(self, errors):
        return diffcore.reduce_sum(diffcore.min_select(diffcore.as_tensor(errors), dim=1))


class PNormLoss(Objective):
    """
    Sum over networks of ``(sum_i a_i^p)^(1/p)``.

    For ``p < 0`` every ``a_i`` is offset by ``1e-12`` so that an exact reconstruction stays finite.
    """

    def __init__(self, p: float):
        if p == 0:
            raise ValueError("The p-norm loss is undefined for p = 0.")
        self.p = float(p)

    @property
    def name(self):
        return f"p:{self.p:g}"

    def __call__(self, errors):
        errors = diffcore.as_tensor(errors)
        if self.p < 0:
            errors = diffcore.add(errors, P_NORM_FLOOR)
        aggregated = diffcore.reduce_sum(diffcore.power(errors, self.p), dim=1)
        return diffcore.reduce_sum(diffcore.power(aggregated, 1.0 / self.p))


def loss_from_kind(kind: str) -> Objective:
    """Parse ``"min"`` or ``"p:<float>"``."""
    kind = str(kind).strip().lower()
    if kind == "min":
        return MinLoss()
    if kind.startswith("p:"):
        try:
            p = float(kind[2:])
        except ValueError:
            raise ValueError(f"Malformed p-norm loss '{kind}'.") from None
        return PNormLoss(p)
    raise ValueError(f"Unknown loss kind '{kind}'. Use 'min' or 'p:<float>'.")


def soft_count(weights, t, mode="per_element"):
    """
    Smooth count of weights whose magnitude exceeds `t`.

    ``per_element``: ``0.5 * sum_j sigmoid(10 (|w_j| - t))``, decreasing in `t`.
    ``aggregate``: ``0.5 * sigmoid(10 * sum_j |w_j - t|)``, a single switch over the whole matrix.
    """
    weights = rc.concatenate(weights) if isinstance(weights, (list, tuple)) else weights
    if mode == "per_element":
        shifted = rc.sub(rc.abs(weights), t)
        return rc.scale(rc.sum(rc.sigmoid(rc.scale(shifted, SOFTCOUNT_SHARPNESS))), SOFTCOUNT_SCALE)
    if mode == "aggregate":
        distance = rc.sum(rc.abs(rc.sub(weights, t)))
        return rc.scale(rc.sigmoid(rc.scale(distance, SOFTCOUNT_SHARPNESS)), SOFTCOUNT_SCALE)
    raise ValueError(f"Unknown soft count mode '{mode}'.")


class SparsityPenalty(Objective):
    """``alpha * (0.1 * ||W||_1 + soft_count(W, t))``."""

    def __init__(self, alpha: float, mode="per_element"):
        if alpha < 0:
            raise ValueError(f"Sparsity weight must be nonnegative, got {alpha}.")
        self.alpha = float(alpha)
        self.mode = mode

    def __call__(self, weights, t):
        weights = rc.concatenate(weights) if isinstance(weights, (list, tuple)) else weights
        l1 = rc.scale(rc.sum(rc.abs(weights)), L1_SCALE)
        return rc.scale(rc.add(l1, soft_count(weights, t, self.mode)), self.alpha)


def sparsity_penalty(weights, t, alpha, mode="per_element"):
    return SparsityPenalty(alpha, mode)(weights, t)


class SearchObjective(Objective):
    """
    Loss of one decoder at embedding `z` with threshold `t` on a minibatch.

    Every operation is a Torch primitive, so the loss is differentiable in ``(z, t)``.
    With ``alpha == 0`` the loss is exactly the squared-error term.
    """

    def __init__(self, model, depth, alpha=0.0, mode="per_element"):
        self.model = model
        self.depth = depth
        self.penalty = SparsityPenalty(alpha, mode)

    def decoded(self, z):
        return self.model.decode(diffcore.reshape(z, (1, -1)), depths=[self.depth])[self.depth]

    def data_term(self, values, x, y):
        predictions = matrix_forward(
            values,
            self.model.meta(self.depth),
            x,
            negative_slope=self.model.architecture.negative_slope,
        )
        residual = diffcore.sub(predictions, diffcore.as_tensor(y)[None])
        return diffcore.reduce_sum(diffcore.square(residual))

    def __call__(self, z, t, x, y):
        values = self.decoded(z)
        data = self.data_term(values, x, y)
        if self.penalty.alpha == 0:
            return data
        spec = from_matrix(
            diffcore.reshape(values, tuple(values.shape[1:])),
            self.model.meta(self.depth),
            soft=True,
        )
        return diffcore.add(data, self.penalty(effective_weights(spec), t))


def mpe(predictions, truths, eps=1e-8):
    """Median over points of ``|truth - prediction| / (|truth| + eps)``."""
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    truths = np.asarray(truths, dtype=np.float64).ravel()
    if predictions.shape != truths.shape:
        raise ValueError(
            f"Predictions and truths differ in length: {predictions.size} vs {truths.size}."
        )
    if truths.size == 0:
        raise ValueError("MPE of an empty set is undefined.")
    if eps <= 0:
        raise ValueError("eps must be positive.")
    return float(np.median(np.abs(truths - predictions) / (np.abs(truths) + eps)))
