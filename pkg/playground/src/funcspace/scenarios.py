"""
This module contains the training and search loops.

A scenario owns one loop: :meth:`Scenario.step` advances it by one unit of work and
:meth:`Scenario.run` drives it to the end. Progress is reported through the ``pre_run``
and ``post_*`` methods, which trigger callbacks (see :mod:`funcspace.callbacks`).

"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from . import diffcore
from .callbacks import apply_callbacks, introduce_callbacks
from .objectives import SearchObjective, loss_from_kind
from .optimizers import ProjectedGradientOptimizer, TorchOptimizer

logger = logging.getLogger("funcspace.scenarios")


class TrainingDivergedError(ArithmeticError):
    """The training loss became non-finite; parameters were rolled back to the last finished epoch."""

    def __init__(self, epoch, batch, checkpoint=None, cause=None):
        self.epoch = epoch
        self.batch = batch
        self.checkpoint = checkpoint
        message = f"Training diverged at epoch {epoch}, batch {batch}"
        if cause is not None:
            message += f" ({cause})"
        if checkpoint is not None:
            message += f"; last good checkpoint: {checkpoint}"
        super().__init__(message + ".")


class Scenario(ABC):
    def __init__(self):
        pass

    @abstractmethod
    def run(self):
        pass

    @abstractmethod
    def step(self):
        pass


def batched_loss(model, objective, matrices, depths, inputs, targets, batch_size):
    """Sum of `objective` over consecutive batches, evaluated without gradients."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(depths), batch_size):
            stop = min(start + batch_size, len(depths))
            errors = model(matrices[start:stop], depths[start:stop], inputs, targets[start:stop])
            total += float(objective(errors))
    return total


@introduce_callbacks()
class AutoencoderTrainingScenario(Scenario):
    """
    Minibatch training of a :class:`funcspace.models.MultiScaleAutoencoder` on a corpus.

    Every epoch visits the corpus in an order drawn from ``(config.seed, epoch)``.
    After every finished epoch the embedding statistics are recomputed, then the weights are cached
    and the checkpoint (if any) is written, so every checkpoint can seed a search. A non-finite loss
    rolls the weights back and raises :class:`TrainingDivergedError`.
    """

    def __init__(self, model, corpus, config, optimizer=None, checkpoint_writer: Optional[Callable] = None):
        """
        :param model: autoencoder to train in place.
        :param corpus: :class:`funcspace.genlab.Corpus` of training networks.
        :param config: :class:`funcspace.funcae.TrainConfig`.
        :param optimizer: defaults to a :class:`TorchOptimizer` built from the config.
        :param checkpoint_writer: called with the model after every epoch, returns the checkpoint location.
        """
        if len(corpus) == 0:
            raise ValueError("Cannot train on an empty corpus.")
        self.model = model
        self.corpus = corpus
        self.config = config
        self.objective = loss_from_kind(config.loss)
        self.optimizer = optimizer or TorchOptimizer(
            {"lr": config.lr}, model, opt_method=config.optimizer
        )
        self.checkpoint_writer = checkpoint_writer
        self.last_checkpoint = None
        self.matrices, self.depths = model.matrices(corpus.specs)
        self.matrices = np.stack(self.matrices) if _same_shape(self.matrices) else self.matrices
        self.targets = corpus.targets
        self.inputs = corpus.inputs
        self.epoch = 0
        self.history: List[dict] = []

    @property
    def batches(self):
        return math.ceil(len(self.corpus) / self.config.batch_size)

    def _take(self, index):
        if isinstance(self.matrices, np.ndarray):
            return self.matrices[index]
        return [self.matrices[k] for k in index]

    def evaluate(self):
        """Mean loss per network at the current parameters."""
        order = np.arange(len(self.corpus))
        return (
            batched_loss(
                self.model,
                self.objective,
                self._take(order),
                self.depths,
                self.inputs,
                self.targets,
                self.config.batch_size,
            )
            / len(self.corpus)
        )

    def run(self):
        self.pre_run()
        self.model.cache_weights()
        if self.config.evaluate_initial:
            self.post_epoch(self.evaluate())
        for _ in range(self.config.epochs):
            self.step()
        return self.history

    def step(self):
        self.epoch += 1
        permutation = np.random.default_rng([self.config.seed, self.epoch]).permutation(
            len(self.corpus)
        )
        total = 0.0
        for batch, start in enumerate(range(0, len(permutation), self.config.batch_size), start=1):
            index = permutation[start : start + self.config.batch_size]
            matrices, depths, targets = self._take(index), self.depths[index], self.targets[index]
            try:
                loss = self.optimizer.optimize(
                    lambda: self.objective(self.model(matrices, depths, self.inputs, targets))
                )
                if not all(bool(torch.isfinite(p).all()) for p in self.model.parameters()):
                    raise diffcore.NonFiniteError(-1, "update", "The update produced non-finite parameters.")
            except diffcore.NonFiniteError as error:
                self.model.restore_weights()
                logger.error(
                    "Non-finite loss at epoch %d, batch %d; parameters rolled back.",
                    self.epoch,
                    batch,
                )
                raise TrainingDivergedError(
                    self.epoch, batch, self.last_checkpoint, cause=error
                ) from error
            total += loss
            self.post_batch(batch, loss / len(index))
        self.model.set_statistics(*self.embedding_statistics())
        self.model.cache_weights()
        if self.checkpoint_writer is not None:
            self.last_checkpoint = self.checkpoint_writer(self.model)
        return self.post_epoch(total / len(self.corpus))

    @apply_callbacks
    def pre_run(self):
        return dict(epochs=self.config.epochs, networks=len(self.corpus))

    @apply_callbacks
    def post_batch(self, batch, loss):
        return dict(epoch=self.epoch, batch=batch, batches=self.batches, loss=loss)

    @apply_callbacks
    def post_epoch(self, loss):
        row = dict(epoch=self.epoch, loss=loss, batches=self.batches if self.epoch else 0)
        self.history.append(row)
        return row

    def embedding_statistics(self):
        """Per-dimension mean and standard deviation of the embeddings of the whole corpus."""
        return embedding_statistics(
            self.model, self._take(np.arange(len(self.corpus))), self.depths, self.config.batch_size
        )


def _same_shape(matrices):
    return len({m.shape for m in matrices}) == 1


def embedding_statistics(model, matrices, depths, batch_size=256):
    chunks = []
    with torch.no_grad():
        for start in range(0, len(depths), batch_size):
            stop = min(start + batch_size, len(depths))
            chunks.append(model.embed(matrices[start:stop], depths[start:stop]))
    embeddings = torch.cat(chunks, dim=0)
    return embeddings.mean(dim=0), embeddings.std(dim=0, unbiased=False)


@dataclass
class SearchState:
    """Current point of one embedding search with its loss histories."""

    z: torch.Tensor
    t: float = 0.0
    iteration: int = 0
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[Tuple[int, float]] = field(default_factory=list)
    diverged: bool = False


@introduce_callbacks()
class EmbeddingSearchScenario(Scenario):
    """
    Gradient descent in the embedding space for one decoder and one starting point.

    Each step draws a minibatch from the train split (consecutive slices of a shuffled order,
    reshuffled every pass), differentiates the search loss in ``(z, t)`` in a single backward
    pass and updates both. The validation loss is recorded every ``config.eval_every`` iterations.
    The search diverges on a non-finite loss or gradient, or once an entry of ``z`` leaves
    ``[-config.z_bound, config.z_bound]``. It then stops, is flagged as diverged and restores
    the point with the lowest validation loss seen so far.
    """

    def __init__(self, model, decoder, restart, dataset, config, z0, rng: np.random.Generator):
        self.model = model
        self.decoder = decoder
        self.restart = restart
        self.config = config
        self.rng = rng
        self.objective = SearchObjective(model, decoder, config.alpha, config.softcount)
        self.optimizer = ProjectedGradientOptimizer(
            z0, 0.0, config.lr_z, config.lr_t, opt_method=config.optimizer
        )
        self.x_train, self.y_train = dataset.train
        self.x_val, self.y_val = dataset.val
        if len(self.x_train) == 0:
            raise ValueError("The train split is empty.")
        self.state = SearchState(z=self.optimizer.z.detach().clone())
        self.best = None
        self.__order = np.empty(0, dtype=int)
        self.__cursor = 0

    @property
    def minibatch(self):
        size = self.config.minibatch
        return len(self.x_train) if not size or size >= len(self.x_train) else size

    def next_batch(self):
        if self.__cursor >= len(self.__order):
            self.__order = self.rng.permutation(len(self.x_train))
            self.__cursor = 0
        index = self.__order[self.__cursor : self.__cursor + self.minibatch]
        self.__cursor += self.minibatch
        return self.x_train[index], self.y_train[index]

    def validation_loss(self):
        if len(self.x_val) == 0:
            return math.nan
        with torch.no_grad():
            return float(
                self.objective(self.optimizer.z, self.optimizer.t, self.x_val, self.y_val)
            )

    def record_validation(self):
        value = self.validation_loss()
        self.state.val_loss.append((self.state.iteration, value))
        if self.best is None or (math.isfinite(value) and value < self.best[0]):
            self.best = (value, *self.optimizer.state)

    def run(self):
        self.record_validation()
        for _ in range(self.config.iterations):
            try:
                self.step()
            except diffcore.NonFiniteError as error:
                self.state.diverged = True
                _, z, t = self.best
                self.optimizer.load(z, t)
                logger.warning(
                    "Search with decoder D%d, restart %d diverged at iteration %d (%s); "
                    "reverted to the best point so far.",
                    self.decoder,
                    self.restart,
                    self.state.iteration + 1,
                    error,
                )
                break
            if self.config.eval_every and self.state.iteration % self.config.eval_every == 0:
                self.record_validation()
        self.state.z, self.state.t = self.optimizer.state
        return self.state

    def step(self):
        x, y = self.next_batch()
        loss, tape = diffcore.forward(
            lambda z, t: self.objective(z, t, x, y), self.optimizer.z, self.optimizer.t
        )
        grad_z, grad_t = diffcore.backward(tape)
        if not (bool(torch.isfinite(grad_z).all()) and bool(torch.isfinite(grad_t).all())):
            raise diffcore.NonFiniteError(-1, "gradient", "The search gradient is non-finite.")
        self.optimizer.optimize(grad_z, grad_t)
        self.check_embedding()
        self.state.iteration += 1
        self.state.train_loss.append(float(loss.detach()))
        return self.post_iteration(self.state.iteration, self.state.train_loss[-1])

    def check_embedding(self):
        """Raise :class:`diffcore.NonFiniteError` once ``z`` is non-finite or leaves ``[-z_bound, z_bound]``."""
        z = self.optimizer.z.detach()
        if not bool(torch.isfinite(z).all()):
            raise diffcore.NonFiniteError(-1, "update", "The update produced a non-finite embedding.")
        size = float(z.abs().max())
        if size > self.config.z_bound:
            raise diffcore.NonFiniteError(
                -1, "update", f"The embedding ran away (max |z| = {size:.3g} > {self.config.z_bound:.3g})."
            )

    @apply_callbacks
    def post_iteration(self, iteration, loss):
        return dict(iteration=iteration, loss=loss, t=float(self.optimizer.t.detach()))
