"""
This module contains random generation of sparse MLPs and the datasets built from them.

Generation of one network:

1. choose the depth uniformly from ``1..l_max`` and each hidden size uniformly from the configured range,
2. fix one random path from every input to an output,
3. pick a removal fraction and keep ``max(round((1 - fraction) * links), fixed links)`` links,
   the fixed ones included,
4. draw non-zero uniform weights for the kept links.

Every generated network therefore connects each input to some output.

"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .netrep import ActivationKind, MlpSpec, mlp_forward
from .utilities import round_half_up

logger = logging.getLogger("funcspace.genlab")


class InfeasibleConfigError(ValueError):
    pass


class CorpusSinkError(OSError):
    """Raised when the corpus sink fails; `written` is the number of networks already delivered."""

    def __init__(self, written, cause):
        self.written = written
        super().__init__(f"Corpus sink failed after {written} networks: {cause}")


@dataclass
class GenConfig:
    activation: str = "sigmoid"
    input_dim: int = 3
    output_dim: int = 1
    n_max: int = 7
    l_max: int = 4
    hidden_min: int = 3
    hidden_max: int = 7
    removal_fractions: List[float] = field(default_factory=lambda: [0.5, 0.7, 0.8, 0.9])
    weight_range: Optional[float] = None
    seed: int = 0

    @property
    def kind(self):
        return ActivationKind.parse(self.activation)

    @property
    def weight_bound(self):
        if self.weight_range is not None:
            return float(self.weight_range)
        return 10.0 if self.kind is ActivationKind.SIGMOID else 3.0

    def validate(self):
        try:
            self.kind
        except ValueError as error:
            raise InfeasibleConfigError(str(error)) from None
        if self.input_dim < 1 or self.output_dim < 1:
            raise InfeasibleConfigError("Input and output dimensions must be positive.")
        if max(self.input_dim, self.output_dim) > self.n_max:
            raise InfeasibleConfigError(
                f"Input and output dimensions must not exceed n_max={self.n_max}."
            )
        if self.l_max < 1:
            raise InfeasibleConfigError(f"l_max must be positive, got {self.l_max}.")
        if not 1 <= self.hidden_min <= self.hidden_max <= self.n_max:
            raise InfeasibleConfigError(
                f"Hidden size range [{self.hidden_min}, {self.hidden_max}] is not within [1, {self.n_max}]."
            )
        if not self.removal_fractions:
            raise InfeasibleConfigError("At least one removal fraction is required.")
        if any(not 0.0 <= f < 1.0 for f in self.removal_fractions):
            raise InfeasibleConfigError(
                f"Removal fractions must lie in [0, 1), got {list(self.removal_fractions)}."
            )
        if self.weight_bound <= 0:
            raise InfeasibleConfigError("Weight range must be positive.")
        return self


def _fixed_paths(sizes, rng):
    """One random path per input; paths may share hidden neurons."""
    fixed = set()
    for a in range(sizes[0]):
        source = a
        for k in range(len(sizes) - 1):
            target = int(rng.integers(sizes[k + 1]))
            fixed.add((k, source, target))
            source = target
    return fixed


def _draw_weights(count, bound, rng):
    values = rng.uniform(-bound, bound, size=count)
    while np.any(values == 0.0):
        zeros = values == 0.0
        values[zeros] = rng.uniform(-bound, bound, size=int(zeros.sum()))
    return values


def _assemble(cfg, sizes, fixed, kept_total, rng):
    links = [
        (k, a, b)
        for k in range(len(sizes) - 1)
        for a in range(sizes[k])
        for b in range(sizes[k + 1])
    ]
    free = [link for link in links if link not in fixed]
    extra = kept_total - len(fixed)
    chosen = [free[index] for index in sorted(rng.choice(len(free), size=extra, replace=False))] if extra > 0 else []
    kept = sorted(fixed) + chosen
    values = _draw_weights(len(kept), cfg.weight_bound, rng)
    weights = [np.zeros((sizes[k], sizes[k + 1])) for k in range(len(sizes) - 1)]
    for (k, a, b), value in zip(kept, values):
        weights[k][a, b] = value
    return MlpSpec(
        activation=cfg.kind,
        input_dim=cfg.input_dim,
        output_dim=cfg.output_dim,
        hidden_sizes=sizes[1:-1],
        weights=weights,
        masks=[np.ones(size, bool) for size in sizes[1:-1]],
    )


def random_mlp(cfg: GenConfig, rng: np.random.Generator, depth: Optional[int] = None) -> MlpSpec:
    """
    Draw one connected sparse MLP.

    :param depth: force the number of hidden layers instead of drawing it from ``1..l_max``.
    """
    cfg.validate()
    if depth is None:
        depth = int(rng.integers(1, cfg.l_max + 1))
    elif not 1 <= depth <= cfg.l_max:
        raise InfeasibleConfigError(f"Depth {depth} is not within [1, {cfg.l_max}].")
    hidden = rng.integers(cfg.hidden_min, cfg.hidden_max + 1, size=depth)
    sizes = (cfg.input_dim, *(int(h) for h in hidden), cfg.output_dim)
    fixed = _fixed_paths(sizes, rng)
    fraction = float(rng.choice(np.asarray(cfg.removal_fractions, dtype=np.float64)))
    total = sum(sizes[k] * sizes[k + 1] for k in range(len(sizes) - 1))
    kept_total = max(round_half_up((1.0 - fraction) * total), len(fixed))
    return _assemble(cfg, sizes, fixed, kept_total, rng)


def random_mlp_with_count(
    cfg: GenConfig, hidden_sizes: Sequence[int], nonzero: int, rng: np.random.Generator
) -> MlpSpec:
    """Connected MLP with a fixed architecture and exactly `nonzero` non-zero weights."""
    cfg.validate()
    sizes = (cfg.input_dim, *(int(h) for h in hidden_sizes), cfg.output_dim)
    if not hidden_sizes or any(h < 1 or h > cfg.n_max for h in sizes[1:-1]):
        raise InfeasibleConfigError(
            f"Hidden sizes {tuple(hidden_sizes)} are not within [1, {cfg.n_max}]."
        )
    total = sum(sizes[k] * sizes[k + 1] for k in range(len(sizes) - 1))
    fixed = _fixed_paths(sizes, rng)
    if not len(fixed) <= nonzero <= total:
        raise InfeasibleConfigError(
            f"Cannot place {nonzero} weights: the fixed paths need {len(fixed)} and the topology holds {total}."
        )
    return _assemble(cfg, sizes, fixed, nonzero, rng)


def grid_inputs(dims=3, per_dim=10, lo=-1.0, hi=1.0) -> np.ndarray:
    """Cartesian grid of `per_dim` equally spaced values per dimension, endpoints included, in row-major order."""
    if per_dim < 2:
        raise ValueError(f"A grid needs at least two values per dimension, got {per_dim}.")
    axis = np.linspace(lo, hi, per_dim)
    mesh = np.meshgrid(*([axis] * dims), indexing="ij")
    return np.stack([coordinate.ravel() for coordinate in mesh], axis=1)


@dataclass
class FunctionalDataset:
    inputs: np.ndarray
    outputs: np.ndarray
    splits: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.outputs = np.asarray(self.outputs, dtype=np.float64)
        if self.outputs.ndim == 1:
            self.outputs = self.outputs[:, None]
        if len(self.inputs) != len(self.outputs):
            raise ValueError(
                f"Row count mismatch: {len(self.inputs)} inputs, {len(self.outputs)} outputs."
            )
        if self.splits is not None:
            self.splits = tuple(int(s) for s in self.splits)
            if len(self.splits) != 3 or sum(self.splits) != len(self):
                raise ValueError(
                    f"Split sizes {self.splits} do not sum to the row count {len(self)}."
                )

    def __len__(self):
        return len(self.inputs)

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    @property
    def output_dim(self):
        return self.outputs.shape[1]

    def part(self, index):
        if self.splits is None:
            raise ValueError("This dataset has no train/val/test splits.")
        start = sum(self.splits[:index])
        stop = start + self.splits[index]
        return self.inputs[start:stop], self.outputs[start:stop]

    @property
    def train(self):
        return self.part(0)

    @property
    def val(self):
        return self.part(1)

    @property
    def test(self):
        return self.part(2)


def make_functional_dataset(spec: MlpSpec, inputs) -> FunctionalDataset:
    inputs = np.asarray(inputs, dtype=np.float64)
    return FunctionalDataset(inputs=inputs, outputs=mlp_forward(spec, inputs))


def split_sizes(n, ratio=(5, 3, 2)):
    total = sum(ratio)
    train = n * ratio[0] // total
    val = n * ratio[1] // total
    return train, val, n - train - val


def make_search_dataset(
    spec: MlpSpec, n=100000, ratio=(5, 3, 2), rng: Optional[np.random.Generator] = None
) -> FunctionalDataset:
    """Uniform inputs in ``[-1, 1]^i`` labelled by `spec`; rows ordered train, val, test."""
    if n <= 0:
        raise ValueError(f"Row count must be positive, got {n}.")
    rng = np.random.default_rng() if rng is None else rng
    inputs = rng.uniform(-1.0, 1.0, size=(n, spec.input_dim))
    return FunctionalDataset(
        inputs=inputs, outputs=mlp_forward(spec, inputs), splits=split_sizes(n, ratio)
    )


class Corpus:
    """Networks sharing one input grid; targets are evaluated lazily and cached."""

    def __init__(self, specs: Sequence[MlpSpec], inputs: np.ndarray):
        self.specs = list(specs)
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.__targets = None

    def __len__(self):
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    @property
    def targets(self):
        """Array of shape ``(M, N, o)`` with every network evaluated on the grid."""
        if self.__targets is None:
            self.__targets = np.stack([mlp_forward(spec, self.inputs) for spec in self.specs])
        return self.__targets

    @property
    def depths(self):
        return np.array([spec.depth for spec in self.specs])

    def dataset(self, index) -> FunctionalDataset:
        return FunctionalDataset(inputs=self.inputs, outputs=self.targets[index])

    def by_depth(self):
        groups = {}
        for spec in self.specs:
            groups.setdefault(spec.depth, []).append(spec)
        return groups


def _network_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def iter_corpus(
    cfg: GenConfig, count, threads=1, chunk=256, depth=None, inputs=None
) -> Iterator[Tuple[MlpSpec, FunctionalDataset]]:
    """
    Stream `count` independent networks with their datasets on one shared grid.

    Network ``k`` is drawn from a generator seeded with ``(cfg.seed, k)``,
    so the stream does not depend on `threads`.
    """
    if count <= 0:
        raise ValueError(f"Corpus size must be positive, got {count}.")
    cfg.validate()
    grid = grid_inputs(dims=cfg.input_dim) if inputs is None else np.asarray(inputs)
    with Parallel(n_jobs=threads, backend="threading") as parallel:
        for start in range(0, count, chunk):
            stop = min(start + chunk, count)
            specs = parallel(
                delayed(random_mlp)(cfg, _network_rng(cfg.seed, index), depth)
                for index in range(start, stop)
            )
            for spec in specs:
                yield spec, make_functional_dataset(spec, grid)


def gen_corpus(
    cfg: GenConfig,
    count,
    sink: Callable[[int, MlpSpec, FunctionalDataset], None],
    threads=1,
    depth=None,
) -> int:
    """
    Feed `count` generated networks to `sink` in order.

    :return: number of networks delivered.
    :raises CorpusSinkError: when the sink fails; carries the partial count.
    """
    written = 0
    for index, (spec, dataset) in enumerate(
        iter_corpus(cfg, count, threads=threads, depth=depth)
    ):
        try:
            sink(index, spec, dataset)
        except OSError as error:
            raise CorpusSinkError(written, error) from error
        written += 1
    logger.info("Generated %d %s-based networks.", written, cfg.kind.value)
    return written


def generate_corpus(cfg: GenConfig, count, threads=1, depth=None) -> Corpus:
    specs = []
    gen_corpus(cfg, count, lambda index, spec, dataset: specs.append(spec), threads, depth)
    return Corpus(specs, grid_inputs(dims=cfg.input_dim))


def weight_support_ok(spec: MlpSpec, cfg: GenConfig) -> bool:
    bound = cfg.weight_bound
    return all(np.all(np.abs(weight) <= bound) for weight in spec.weights)
