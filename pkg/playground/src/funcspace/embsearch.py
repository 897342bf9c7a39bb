"""
This module contains the search for an optimal MLP in the embedding space of a trained autoencoder.

For every decoder (and every restart) an embedding ``z`` is sampled from the stored embedding
statistics and refined by gradient descent on the loss of the decoded network on a dataset,
optionally with a sparsity penalty driven by a learnable threshold ``t``. The decoded network is then
hard-thresholded and pruned with the final ``t``.

Searches are independent of each other and run on a `joblib` thread pool.

"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed

from . import diffcore
from .callbacks import apply_callbacks, introduce_callbacks
from .genlab import FunctionalDataset
from .netrep import MlpSpec, from_matrix, mlp_forward, non_zero_count, prune
from .objectives import SearchObjective, mpe
from .scenarios import EmbeddingSearchScenario, Scenario, SearchState
from .utilities import resolve_threads

logger = logging.getLogger("funcspace.embsearch")

SOFTCOUNT_MODES = ("per_element", "aggregate")


class MissingStatisticsError(ValueError):
    pass


class SearchDivergedError(ArithmeticError):
    def __init__(self, decoder, iteration, cause):
        self.decoder = decoder
        self.iteration = iteration
        super().__init__(
            f"Search loss of decoder D{decoder} is non-finite at iteration {iteration}: {cause}"
        )


@dataclass
class SearchConfig:
    iterations: int = 5000
    lr_z: float = 1e-2
    lr_t: float = 1e-3
    alpha: float = 0.0
    minibatch: int = 256
    decoders: Optional[List[int]] = None
    restarts: int = 1
    seed: int = 0
    softcount: str = "per_element"
    optimizer: str = "sgd"
    eps: float = 1e-8
    z_bound: float = 1e6
    log_every: int = 500
    eval_every: int = 100
    threads: Optional[int] = None

    def validate(self, l_max=None):
        if self.iterations < 1:
            raise ValueError(f"Iteration count must be at least 1, got {self.iterations}.")
        if self.lr_z < 0 or self.lr_t < 0:
            raise ValueError("Learning rates must be nonnegative.")
        if self.alpha < 0:
            raise ValueError(f"Sparsity weight must be nonnegative, got {self.alpha}.")
        if self.minibatch < 0:
            raise ValueError("Minibatch size must be nonnegative (0 selects the full train split).")
        if self.restarts < 1:
            raise ValueError(f"At least one restart is required, got {self.restarts}.")
        if self.softcount not in SOFTCOUNT_MODES:
            raise ValueError(f"Unknown soft count mode '{self.softcount}'. Use one of {SOFTCOUNT_MODES}.")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"Unknown update rule '{self.optimizer}'. Use 'sgd' or 'adam'.")
        if self.eps <= 0:
            raise ValueError("eps must be positive.")
        if not self.z_bound > 0:
            raise ValueError(f"Embedding bound must be positive, got {self.z_bound}.")
        if l_max is not None and self.decoders is not None:
            bad = [i for i in self.decoders if not 1 <= i <= l_max]
            if bad or not self.decoders:
                raise ValueError(f"Decoders must be a non-empty subset of 1..{l_max}, got {self.decoders}.")
        return self

    def decoder_list(self, l_max):
        return sorted(set(self.decoders)) if self.decoders else list(range(1, l_max + 1))


@dataclass
class DecoderResult:
    decoder: int
    spec: MlpSpec
    mpe: float
    nonzero: int
    t: float
    restart: int
    val_mpe: float
    z: np.ndarray
    train_loss: List[float] = field(default_factory=list)
    val_loss: List = field(default_factory=list)
    diverged: bool = False

    @property
    def summary(self):
        return f"{100.0 * self.mpe:.2f} ({self.nonzero})"


@dataclass
class SearchResult:
    decoders: List[DecoderResult]
    baseline_mpe: float = math.nan

    def __iter__(self):
        return iter(self.decoders)

    def __getitem__(self, decoder) -> DecoderResult:
        for result in self.decoders:
            if result.decoder == decoder:
                return result
        raise KeyError(decoder)

    @property
    def best(self) -> DecoderResult:
        return min(self.decoders, key=lambda result: (result.mpe, result.decoder))

    def to_frame(self) -> pd.DataFrame:
        """One row per decoder; ``summary`` reads ``"<MPE %> (<non-zero count>)"``."""
        return pd.DataFrame(
            [
                dict(
                    decoder=f"D{result.decoder}",
                    mpe=result.mpe,
                    nonzero=result.nonzero,
                    t=result.t,
                    diverged=result.diverged,
                    summary=result.summary,
                )
                for result in self.decoders
            ],
            columns=["decoder", "mpe", "nonzero", "t", "diverged", "summary"],
        )

    def losses(self) -> pd.DataFrame:
        """Train-loss histories in long form: ``decoder, iteration, loss``."""
        rows = [
            (f"D{result.decoder}", iteration, loss)
            for result in self.decoders
            for iteration, loss in enumerate(result.train_loss, start=1)
        ]
        return pd.DataFrame(rows, columns=["decoder", "iteration", "loss"])


@dataclass
class TradeoffCurve:
    """Sparsity against accuracy: one ``(alpha, nonzero, mpe)`` row per searched weight."""

    points: pd.DataFrame
    dataset: str = ""
    decoder: Optional[int] = None

    def __post_init__(self):
        self.points = pd.DataFrame(self.points, columns=["alpha", "nonzero", "mpe"])
        alphas = self.points["alpha"].to_numpy()
        if np.any(np.diff(alphas) <= 0):
            raise ValueError(f"Sparsity weights must be strictly increasing, got {list(alphas)}.")

    def __len__(self):
        return len(self.points)


def knee_point(curve: TradeoffCurve, rel_tolerance=0.1):
    """
    The sparsest point whose MPE stays within `rel_tolerance` of the best MPE on the curve,
    i.e. where adding weights stops paying off.

    :return: the selected row as a `pandas` series.
    """
    points = curve.points
    if points.empty:
        raise ValueError("The curve has no points.")
    limit = points["mpe"].min() * (1.0 + rel_tolerance)
    within = points[points["mpe"] <= limit]
    return within.sort_values(["nonzero", "mpe", "alpha"]).iloc[0]


def sample_embedding(params, rng: np.random.Generator) -> np.ndarray:
    """``mean + std * N(0, I)`` drawn from the embedding statistics stored in `params`."""
    if not params.has_statistics:
        raise MissingStatisticsError(
            "The autoencoder carries no embedding statistics. Train it with train_autoencoder first."
        )
    mean = params.embedding_mean.detach().numpy()
    std = params.embedding_std.detach().numpy()
    return mean + std * rng.standard_normal(params.d_z)


def search_loss(z, t, decoder, x, y, alpha, params, softcount="per_element", iteration=None):
    """
    Squared error of decoder `decoder` at `z` on ``(x, y)`` plus the sparsity penalty.

    Differentiable in `z` and `t` when called inside :func:`funcspace.diffcore.forward`.

    :raises SearchDivergedError: when the loss is non-finite.
    """
    objective = SearchObjective(params, decoder, alpha, softcount)
    try:
        loss = objective(diffcore.as_tensor(z), diffcore.as_tensor(t), x, y)
    except diffcore.NonFiniteError as error:
        raise SearchDivergedError(decoder, iteration, error) from error
    if not bool(torch.isfinite(loss)):
        raise SearchDivergedError(decoder, iteration, "non-finite loss")
    return loss


def decoded_spec(params, decoder, z) -> MlpSpec:
    """Hard-thresholded network decoded from `z` by decoder `decoder`."""
    with torch.no_grad():
        values = params.decode(diffcore.as_tensor(z).reshape(1, -1), depths=[decoder])[decoder]
    return from_matrix(values[0], params.meta(decoder))


def _search_one(params, dataset, cfg, decoder, restart, callbacks):
    rng = np.random.default_rng([cfg.seed, decoder, restart])
    z0 = sample_embedding(params, rng)
    kwargs = {} if callbacks is None else {"callbacks": callbacks}
    scenario = EmbeddingSearchScenario(params, decoder, restart, dataset, cfg, z0, rng, **kwargs)
    state: SearchState = scenario.run()
    spec = prune(decoded_spec(params, decoder, state.z), state.t)
    x_val, y_val = dataset.val
    val_mpe = mpe(mlp_forward(spec, x_val), y_val, cfg.eps) if len(x_val) else math.inf
    return restart, spec, val_mpe, state


def search_optimal(params, dataset: FunctionalDataset, cfg: SearchConfig, callbacks=None) -> SearchResult:
    """
    Search every selected decoder, keep the restart with the lowest validation MPE and
    report its test MPE and non-zero count.

    Each ``(decoder, restart)`` pair draws from a generator seeded with ``(seed, decoder, restart)``,
    so the result does not depend on the thread count. The autoencoder parameters are frozen
    while the searches run and get their ``requires_grad`` flags back afterwards.
    """
    cfg.validate(params.l_max)
    if dataset.splits is None:
        raise ValueError("The dataset has no train/val/test splits.")
    if dataset.input_dim != params.architecture.input_dim or dataset.output_dim != params.architecture.output_dim:
        raise ValueError(
            f"Dataset dimensions ({dataset.input_dim}, {dataset.output_dim}) do not match the autoencoder "
            f"({params.architecture.input_dim}, {params.architecture.output_dim})."
        )
    if not params.has_statistics:
        raise MissingStatisticsError("The autoencoder carries no embedding statistics.")
    decoders = cfg.decoder_list(params.l_max)
    jobs = [(decoder, restart) for decoder in decoders for restart in range(cfg.restarts)]
    logger.info(
        "Searching %d decoders x %d restarts for %d iterations (alpha=%g).",
        len(decoders),
        cfg.restarts,
        cfg.iterations,
        cfg.alpha,
    )
    with params.frozen():
        outcomes = Parallel(n_jobs=min(resolve_threads(cfg.threads), len(jobs)), backend="threading")(
            delayed(_search_one)(params, dataset, cfg, decoder, restart, callbacks)
            for decoder, restart in jobs
        )
    x_test, y_test = dataset.test
    results = []
    for decoder in decoders:
        candidates = [outcome for (d, _), outcome in zip(jobs, outcomes) if d == decoder]
        restart, spec, val_mpe, state = min(candidates, key=lambda item: (item[2], item[0]))
        results.append(
            DecoderResult(
                decoder=decoder,
                spec=spec,
                mpe=mpe(mlp_forward(spec, x_test), y_test, cfg.eps),
                nonzero=non_zero_count(spec),
                t=state.t,
                restart=restart,
                val_mpe=val_mpe,
                z=state.z.numpy(),
                train_loss=state.train_loss,
                val_loss=state.val_loss,
                diverged=state.diverged,
            )
        )
    return SearchResult(results, baseline_mpe=constant_baseline_mpe(dataset, cfg.eps))


def constant_baseline_mpe(dataset: FunctionalDataset, eps=1e-8):
    """Test MPE of predicting the per-output median of the train split everywhere."""
    _, y_train = dataset.train
    _, y_test = dataset.test
    prediction = np.broadcast_to(np.median(y_train, axis=0), y_test.shape)
    return mpe(prediction, y_test, eps)


@introduce_callbacks()
class TradeoffScenario(Scenario):
    """One search per sparsity weight, all sharing the seed of the base config."""

    def __init__(self, params, dataset, decoder, alphas: Sequence[float], config: SearchConfig, dataset_name=""):
        alphas = [float(alpha) for alpha in alphas]
        if not alphas:
            raise ValueError("At least one sparsity weight is required.")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError(f"Sparsity weights must be strictly increasing, got {alphas}.")
        self.params = params
        self.dataset = dataset
        self.decoder = decoder
        self.alphas = alphas
        self.config = config
        self.dataset_name = dataset_name
        self.results: Dict[float, DecoderResult] = {}
        self.__pending = list(alphas)

    def run(self):
        self.pre_run()
        while self.__pending:
            self.step()
        return TradeoffCurve(
            pd.DataFrame(
                [
                    dict(alpha=alpha, nonzero=result.nonzero, mpe=result.mpe)
                    for alpha, result in self.results.items()
                ]
            ),
            dataset=self.dataset_name,
            decoder=self.decoder,
        )

    def step(self):
        alpha = self.__pending.pop(0)
        config = replace(self.config, alpha=alpha, decoders=[self.decoder])
        result = search_optimal(self.params, self.dataset, config)[self.decoder]
        self.results[alpha] = result
        return self.post_point(alpha, result)

    @apply_callbacks
    def pre_run(self):
        return dict(decoder=self.decoder, alphas=list(self.__pending))

    @apply_callbacks
    def post_point(self, alpha, result):
        return dict(alpha=alpha, nonzero=result.nonzero, mpe=result.mpe)


def tradeoff_scan(params, dataset, decoder, alphas, cfg: SearchConfig, dataset_name="", callbacks=None) -> TradeoffCurve:
    """Sparsity/accuracy curve of one decoder over increasing sparsity weights."""
    kwargs = {} if callbacks is None else {"callbacks": callbacks}
    return TradeoffScenario(params, dataset, decoder, alphas, cfg, dataset_name, **kwargs).run()
