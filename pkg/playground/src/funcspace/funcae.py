"""
This module contains the public operations of the multi-scale autoencoder.

- :func:`encode` / :func:`decode_all` map networks to embeddings and back,
- :func:`functional_loss_p` / :func:`functional_loss_min` are the functional reconstruction losses,
- :func:`train_autoencoder` runs :class:`funcspace.scenarios.AutoencoderTrainingScenario`,
- :func:`eval_mpe_grid`, :func:`best_decoder_mpe` and :func:`export_surface` evaluate a trained model.

The model itself lives in :mod:`funcspace.models`.

"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from . import diffcore
from .genlab import Corpus
from .models import ArchitectureConfig, AutoencoderParams, MultiScaleAutoencoder
from .netrep import DimensionError, MlpSpec, from_matrix, matrix_forward, mlp_forward
from .objectives import MinLoss, PNormLoss, loss_from_kind, mpe
from .scenarios import (
    AutoencoderTrainingScenario,
    TrainingDivergedError,
    batched_loss,
    embedding_statistics as _embedding_statistics,
)

logger = logging.getLogger("funcspace.funcae")

__all__ = [
    "ArchitectureConfig",
    "AutoencoderParams",
    "TrainConfig",
    "TrainingDivergedError",
    "encode",
    "decode_all",
    "functional_loss_p",
    "functional_loss_min",
    "train_autoencoder",
    "evaluate_loss",
    "mpe",
    "eval_mpe_grid",
    "best_decoder_mpe",
    "best_decoded",
    "embedding_statistics",
    "export_surface",
]


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 1
    lr: float = 1e-3
    loss: str = "min"
    seed: int = 0
    optimizer: str = "adam"
    evaluate_initial: bool = True

    def validate(self):
        if self.batch_size < 1:
            raise ValueError(f"Batch size must be at least 1, got {self.batch_size}.")
        if self.epochs < 1:
            raise ValueError(f"Epoch count must be at least 1, got {self.epochs}.")
        if self.lr < 0:
            raise ValueError(f"Learning rate must be nonnegative, got {self.lr}.")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"Unknown update rule '{self.optimizer}'. Use 'adam' or 'sgd'.")
        loss_from_kind(self.loss)
        return self


def encode(params: MultiScaleAutoencoder, spec: MlpSpec) -> np.ndarray:
    """Embedding of one network, a vector of length ``d_z``."""
    matrices, depths = params.matrices([spec])
    with torch.no_grad():
        return params.embed(matrices, depths)[0].numpy().copy()


def decode_all(params: MultiScaleAutoencoder, z, soft=False):
    """
    One network per decoder, depths ``1..l_max`` in order.

    With ``soft=True`` the specs hold tensors that stay differentiable with respect to `z`.
    """
    z = diffcore.as_tensor(z)
    if tuple(z.shape) != (params.d_z,):
        raise DimensionError(f"Expected an embedding of length {params.d_z}, got {tuple(z.shape)}.")
    decoded = params.decode(diffcore.reshape(z, (1, params.d_z)))
    specs = []
    for depth, values in decoded.items():
        matrix = diffcore.reshape(values, tuple(values.shape[1:]))
        if not soft:
            matrix = matrix.detach()
        specs.append(from_matrix(matrix, params.meta(depth), soft=soft))
    return specs


def _batch_errors(params, batch):
    """
    Per-decoder squared errors of a batch, shape ``(B, l_max)``.

    `batch` is a :class:`funcspace.genlab.Corpus` or a sequence of ``(spec, X, Y)`` triples.
    """
    if isinstance(batch, Corpus):
        matrices, depths = params.matrices(batch.specs)
        return params(matrices, depths, batch.inputs, batch.targets)
    batch = list(batch)
    if not batch:
        raise ValueError("The batch is empty.")
    rows = []
    for spec, inputs, outputs in batch:
        matrices, depths = params.matrices([spec])
        outputs = np.asarray(outputs, dtype=np.float64).reshape(len(inputs), -1)
        rows.append(params(matrices, depths, inputs, outputs[None]))
    return diffcore.concat(rows, dim=0)


def functional_loss_p(batch, params, p):
    """``sum_s (sum_i a_i^p)^(1/p)`` with ``a_i`` the squared error of decoder ``i`` on network ``s``."""
    return PNormLoss(p)(_batch_errors(params, batch))


def functional_loss_min(batch, params):
    """``sum_s min_i a_i``; only the arg-min decoder of every network receives gradients."""
    return MinLoss()(_batch_errors(params, batch))


def train_autoencoder(
    cfg: TrainConfig,
    corpus: Corpus,
    params: MultiScaleAutoencoder,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    callbacks=None,
):
    """
    Train `params` in place.

    :param checkpoint_dir: when given, a checkpoint is written there after every epoch.
    :return: ``(params, losses)`` where `losses` has the columns ``epoch, loss, batches``.
    :raises TrainingDivergedError: on a non-finite loss; `params` hold the last finished epoch.
    """
    cfg.validate()
    if len(corpus) == 0:
        raise ValueError("Cannot train on an empty corpus.")
    writer = None
    if checkpoint_dir is not None:
        from .persist import save_checkpoint

        writer = lambda model: save_checkpoint(model, checkpoint_dir)
    kwargs = {} if callbacks is None else {"callbacks": callbacks}
    scenario = AutoencoderTrainingScenario(
        params, corpus, cfg, checkpoint_writer=writer, **kwargs
    )
    logger.info(
        "Training on %d networks: %d epochs of %d batches, loss %s.",
        len(corpus),
        cfg.epochs,
        scenario.batches,
        scenario.objective.name,
    )
    history = scenario.run()
    return params, pd.DataFrame(history, columns=["epoch", "loss", "batches"])


def evaluate_loss(params, corpus: Corpus, loss="min", batch_size=256):
    """Mean loss per network of `corpus` without updating anything."""
    matrices, depths = params.matrices(corpus.specs)
    return (
        batched_loss(
            params, loss_from_kind(loss), matrices, depths, corpus.inputs, corpus.targets, batch_size
        )
        / len(corpus)
    )


def _per_network_mpe(predictions, targets, eps):
    predictions = predictions.reshape(len(predictions), -1)
    targets = targets.reshape(len(targets), -1)
    return np.median(np.abs(targets - predictions) / (np.abs(targets) + eps), axis=1)


def _mpe_table(params, specs, inputs, eps=1e-8, batch_size=256):
    """Array of shape ``(len(specs), l_max)``: hard-decoded MPE of every network under every decoder."""
    inputs = np.asarray(inputs, dtype=np.float64)
    table = np.empty((len(specs), params.l_max))
    with torch.no_grad():
        for start in range(0, len(specs), batch_size):
            chunk = specs[start : start + batch_size]
            targets = np.stack([mlp_forward(spec, inputs) for spec in chunk])
            decoded = params.decode(params.embed(*params.matrices(chunk)))
            for depth, values in decoded.items():
                predictions = matrix_forward(
                    values,
                    params.meta(depth),
                    inputs,
                    hard=True,
                    negative_slope=params.architecture.negative_slope,
                ).numpy()
                table[start : start + len(chunk), depth - 1] = _per_network_mpe(
                    predictions, targets, eps
                )
    return table


def _grouped(corpora) -> Dict[int, Sequence[MlpSpec]]:
    if isinstance(corpora, Corpus):
        return dict(sorted(corpora.by_depth().items()))
    return {int(depth): list(specs) for depth, specs in sorted(corpora.items())}


def eval_mpe_grid(params, corpora: Union[Corpus, Mapping[int, Sequence[MlpSpec]]], inputs, eps=1e-8):
    """
    Median over test networks of the hard-decoded MPE, for every pair of input depth and decoder.

    :param corpora: networks keyed by depth, or a corpus that is grouped by depth.
    :return: frame with rows ``D1..D{l_max}`` (decoders) and columns ``E1..E{l_max}`` (input depths);
        depths without test networks give empty columns.
    """
    grid = pd.DataFrame(
        np.nan,
        index=[f"D{i}" for i in range(1, params.l_max + 1)],
        columns=[f"E{j}" for j in range(1, params.l_max + 1)],
    )
    grid.index.name = "decoder"
    for depth, specs in _grouped(corpora).items():
        if not specs:
            continue
        table = _mpe_table(params, specs, inputs, eps)
        grid[f"E{depth}"] = np.median(table, axis=0)
    return grid


def best_decoder_mpe(params, corpora, inputs, eps=1e-8) -> pd.Series:
    """Per input depth, the median over networks of the smallest MPE any decoder achieves on that network."""
    best = pd.Series(
        np.nan, index=[f"E{j}" for j in range(1, params.l_max + 1)], name="best"
    )
    for depth, specs in _grouped(corpora).items():
        if specs:
            best[f"E{depth}"] = float(np.median(_mpe_table(params, specs, inputs, eps).min(axis=1)))
    return best


def best_decoded(params, spec: MlpSpec, inputs) -> MlpSpec:
    """The hard-decoded reconstruction of `spec` with the smallest squared error on `inputs`."""
    inputs = np.asarray(inputs, dtype=np.float64)
    target = mlp_forward(spec, inputs)
    candidates = decode_all(params, encode(params, spec), soft=False)
    errors = [np.sum((mlp_forward(candidate, inputs) - target) ** 2) for candidate in candidates]
    return candidates[int(np.argmin(errors))]


def embedding_statistics(params, corpus: Corpus, batch_size=256):
    """Mean and population standard deviation of the embeddings of `corpus`, as arrays of length ``d_z``."""
    matrices, depths = params.matrices(corpus.specs)
    mean, std = _embedding_statistics(params, matrices, depths, batch_size)
    return mean.numpy(), std.numpy()


def export_surface(spec_a: MlpSpec, spec_b: MlpSpec, fixed_dim=2, fixed_value=0.5, grid_n=50):
    """
    Outputs of two networks of three inputs on a ``grid_n x grid_n`` sweep of the free inputs over
    ``[-1, 1]``, with input `fixed_dim` (0-based) held at `fixed_value`.

    :return: frame with columns ``x1, x2, yA, yB``; for several outputs ``yA``/``yB`` become
        ``yA1, yA2, ...`` and ``yB1, yB2, ...``.
    """
    if (spec_a.input_dim, spec_a.output_dim) != (spec_b.input_dim, spec_b.output_dim):
        raise DimensionError("Both networks must have the same input and output dimensions.")
    if spec_a.input_dim != 3:
        raise DimensionError("Surfaces are exported for networks with exactly three inputs.")
    if not 0 <= fixed_dim < spec_a.input_dim:
        raise DimensionError(f"Fixed input {fixed_dim} is not within [0, {spec_a.input_dim - 1}].")
    if grid_n < 2:
        raise ValueError(f"The grid needs at least two points per axis, got {grid_n}.")
    axis = np.linspace(-1.0, 1.0, grid_n)
    first, second = np.meshgrid(axis, axis, indexing="ij")
    free = [dim for dim in range(3) if dim != fixed_dim]
    inputs = np.empty((grid_n * grid_n, 3))
    inputs[:, fixed_dim] = fixed_value
    inputs[:, free[0]] = first.ravel()
    inputs[:, free[1]] = second.ravel()
    y_a, y_b = mlp_forward(spec_a, inputs), mlp_forward(spec_b, inputs)
    frame = pd.DataFrame({"x1": inputs[:, free[0]], "x2": inputs[:, free[1]]})
    if spec_a.output_dim == 1:
        frame["yA"], frame["yB"] = y_a[:, 0], y_b[:, 0]
    else:
        for k in range(spec_a.output_dim):
            frame[f"yA{k + 1}"] = y_a[:, k]
        for k in range(spec_a.output_dim):
            frame[f"yB{k + 1}"] = y_b[:, k]
    return frame
