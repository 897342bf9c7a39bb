"""
This module contains the domain model of sparse multilayer perceptrons (MLPs).

An MLP is described by :class:`MlpSpec`: bias-free weight matrices between consecutive layers and,
for each hidden layer, an activity mask over the layer's neuron slots.
The module also contains

- forward evaluation under the activation conventions of :class:`ActivationKind`,
- the padded matrix codec (:func:`to_matrix` / :func:`from_matrix`) with appended mask columns,
- masking, pruning and counting of exactly-zero weights,
- a reachability view of a network as a `networkx` graph.

Hard specs hold NumPy arrays and boolean masks. Soft specs, produced by differentiable decoding,
hold Torch tensors with continuous gates in [0, 1].

"""

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import torch

from . import diffcore
from .utilities import rc

ArrayLike = Union[np.ndarray, torch.Tensor]


class LayoutError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class ActivationKind(str, Enum):
    """
    Activation family of an MLP.

    Sigmoid-based networks use a linear output activation,
    leaky-ReLU-based and linear-based networks use a sigmoid output activation.
    """

    SIGMOID = "sigmoid"
    LEAKY_RELU = "leaky_relu"
    LINEAR = "linear"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        normalized = str(value).strip().lower().replace("-", "_")
        aliases = {"leakyrelu": "leaky_relu", "relu": "leaky_relu"}
        normalized = aliases.get(normalized, normalized)
        try:
            return cls(normalized)
        except ValueError:
            raise ValueError(
                f"Unknown activation kind '{value}'. Expected one of {[kind.value for kind in cls]}."
            ) from None

    @property
    def hidden_activation(self):
        return self.value

    @property
    def output_activation(self):
        return "linear" if self is ActivationKind.SIGMOID else "sigmoid"


def activate(x, name, negative_slope=diffcore.DEFAULT_NEGATIVE_SLOPE):
    if name == "sigmoid":
        return rc.sigmoid(x)
    elif name == "leaky_relu":
        return rc.leaky_relu(x, negative_slope)
    elif name == "linear":
        return x
    raise ValueError(f"Unknown activation '{name}'.")


@dataclass(frozen=True, eq=False)
class MlpSpec:
    """
    One sparse MLP.

    ``weights[k]`` has shape ``size(layer k) x size(layer k + 1)``; entry ``(a, b)`` is the weight from
    neuron ``a`` of layer ``k`` to neuron ``b`` of layer ``k + 1``.
    ``masks[j]`` has one entry per slot of hidden layer ``j``.
    """

    activation: ActivationKind
    input_dim: int
    output_dim: int
    hidden_sizes: Tuple[int, ...]
    weights: Tuple[ArrayLike, ...]
    masks: Tuple[ArrayLike, ...]
    soft: bool = False

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.soft:
            object.__setattr__(self, "weights", tuple(self.weights))
            object.__setattr__(self, "masks", tuple(self.masks))
        else:
            object.__setattr__(
                self,
                "weights",
                tuple(np.asarray(w, dtype=np.float64) for w in self.weights),
            )
            object.__setattr__(
                self, "masks", tuple(np.asarray(m).astype(bool) for m in self.masks)
            )
        self.validate()

    @property
    def depth(self):
        return len(self.hidden_sizes)

    @property
    def layer_sizes(self):
        return (self.input_dim, *self.hidden_sizes, self.output_dim)

    @property
    def is_soft(self):
        return self.soft

    def validate(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise DimensionError("Input and output dimensions must be positive.")
        if self.depth < 1:
            raise LayoutError("An MLP needs at least one hidden layer.")
        if any(h < 1 for h in self.hidden_sizes):
            raise LayoutError(f"Hidden sizes must be positive, got {self.hidden_sizes}.")
        if len(self.weights) != self.depth + 1:
            raise LayoutError(
                f"Expected {self.depth + 1} weight matrices, got {len(self.weights)}."
            )
        if len(self.masks) != self.depth:
            raise LayoutError(f"Expected {self.depth} masks, got {len(self.masks)}.")
        sizes = self.layer_sizes
        for k, weight in enumerate(self.weights):
            if tuple(weight.shape) != (sizes[k], sizes[k + 1]):
                raise DimensionError(
                    f"Weight {k} has shape {tuple(weight.shape)}, expected {(sizes[k], sizes[k + 1])}."
                )
        for j, mask in enumerate(self.masks):
            if tuple(mask.shape) != (self.hidden_sizes[j],):
                raise DimensionError(
                    f"Mask {j} has shape {tuple(mask.shape)}, expected {(self.hidden_sizes[j],)}."
                )

    def gates(self):
        """Activity of every layer, inputs and outputs included, as floats."""
        if self.soft:
            inner = list(self.masks)
            ones = lambda size: torch.ones(size, dtype=diffcore.DTYPE)
        else:
            inner = [mask.astype(np.float64) for mask in self.masks]
            ones = lambda size: np.ones(size)
        return [ones(self.input_dim), *inner, ones(self.output_dim)]

    def to_numpy(self):
        if not self.soft:
            return self
        return MlpSpec(
            activation=self.activation,
            input_dim=self.input_dim,
            output_dim=self.output_dim,
            hidden_sizes=self.hidden_sizes,
            weights=[rc.to_np(w) for w in self.weights],
            masks=[rc.to_np(m) > 0.5 for m in self.masks],
        )

    def __eq__(self, other):
        if not isinstance(other, MlpSpec):
            return NotImplemented
        if self.soft or other.soft:
            return self is other
        return (
            self.activation == other.activation
            and self.input_dim == other.input_dim
            and self.output_dim == other.output_dim
            and self.hidden_sizes == other.hidden_sizes
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.masks, other.masks))
        )

    __hash__ = None


@dataclass(frozen=True)
class MatrixMeta:
    activation: ActivationKind
    input_dim: int
    output_dim: int
    depth: int
    n_max: int

    @property
    def columns(self):
        return matrix_columns(self.depth, self.n_max)


@dataclass(frozen=True, eq=False)
class MlpMatrix:
    """Padded 2-D encoding: ``n_max`` rows, ``depth + 1`` weight blocks, then ``depth`` mask columns."""

    values: ArrayLike
    meta: MatrixMeta


def matrix_columns(depth, n_max):
    return (depth + 1) * n_max + depth


def spec_meta(spec: MlpSpec, n_max: int) -> MatrixMeta:
    return MatrixMeta(
        activation=spec.activation,
        input_dim=spec.input_dim,
        output_dim=spec.output_dim,
        depth=spec.depth,
        n_max=n_max,
    )


def mlp_forward(spec: MlpSpec, x, raw_output=False, negative_slope=diffcore.DEFAULT_NEGATIVE_SLOPE):
    """
    Evaluate an MLP on one input vector or on a batch of input rows.

    :param spec: the network; soft specs are evaluated with Torch and stay differentiable.
    :param x: array of shape ``(i,)`` or ``(N, i)``.
    :param raw_output: return the output layer's pre-activation instead of its activation.
    :return: array of shape ``(o,)`` or ``(N, o)``.
    """
    shape = tuple(x.shape) if hasattr(x, "shape") else np.shape(x)
    if len(shape) not in (1, 2) or shape[-1] != spec.input_dim:
        raise DimensionError(
            f"Expected inputs of width {spec.input_dim}, got shape {shape}."
        )
    if not isinstance(x, torch.Tensor):
        x = np.asarray(x, dtype=np.float64)
    gates = spec.gates()
    hidden = x
    for k, weight in enumerate(spec.weights):
        pre = rc.matmul(hidden, weight)
        if k < spec.depth:
            hidden = rc.mul(
                activate(pre, spec.activation.hidden_activation, negative_slope),
                gates[k + 1],
            )
        elif raw_output:
            return pre
        else:
            return activate(pre, spec.activation.output_activation, negative_slope)


def to_matrix(spec: MlpSpec, l_max: int, n_max: int) -> MlpMatrix:
    """Encode a hard spec into its padded matrix; block ``k`` occupies columns ``[k n_max, (k+1) n_max)``."""
    if spec.soft:
        spec = spec.to_numpy()
    if spec.depth > l_max:
        raise LayoutError(f"Depth {spec.depth} exceeds l_max={l_max}.")
    oversized = [size for size in spec.layer_sizes if size > n_max]
    if oversized:
        raise LayoutError(
            f"Layer sizes {spec.layer_sizes} exceed n_max={n_max}."
        )
    meta = spec_meta(spec, n_max)
    values = np.zeros((n_max, meta.columns))
    for k, weight in enumerate(spec.weights):
        rows, cols = weight.shape
        values[:rows, k * n_max : k * n_max + cols] = weight
    offset = (spec.depth + 1) * n_max
    for j, mask in enumerate(spec.masks):
        values[: mask.shape[0], offset + j] = mask.astype(np.float64)
    return MlpMatrix(values=values, meta=meta)


def _check_layout(values, meta: MatrixMeta):
    shape = tuple(values.shape)
    if len(shape) != 2 or shape != (meta.n_max, meta.columns):
        raise LayoutError(
            f"Matrix of shape {shape} does not match layout {(meta.n_max, meta.columns)} "
            f"for depth {meta.depth}."
        )
    if max(meta.input_dim, meta.output_dim) > meta.n_max:
        raise LayoutError("Input and output dimensions must not exceed n_max.")


def from_matrix(m, meta: Optional[MatrixMeta] = None, soft=False) -> MlpSpec:
    """
    Decode a padded matrix whose mask columns already went through a sigmoid.

    With ``soft=False`` a neuron is active iff its mask value is strictly greater than 0.5
    and the result is canonicalized by :func:`apply_mask`.
    With ``soft=True`` weights and mask values are kept as differentiable tensors and the masks act
    as multiplicative gates.
    """
    if isinstance(m, MlpMatrix):
        meta = meta or m.meta
        m = m.values
    if meta is None:
        raise LayoutError("Matrix metadata is required to decode a raw matrix.")
    _check_layout(m, meta)
    n, depth = meta.n_max, meta.depth
    sizes = (meta.input_dim, *([n] * depth), meta.output_dim)
    offset = (depth + 1) * n

    if soft:
        m = diffcore.as_tensor(m)
        weights = [
            diffcore.narrow(diffcore.narrow(m, 0, 0, sizes[k]), 1, k * n, sizes[k + 1])
            for k in range(depth + 1)
        ]
        masks = [
            diffcore.reshape(diffcore.narrow(m, 1, offset + j, 1), (n,))
            for j in range(depth)
        ]
        return MlpSpec(
            activation=meta.activation,
            input_dim=meta.input_dim,
            output_dim=meta.output_dim,
            hidden_sizes=[n] * depth,
            weights=weights,
            masks=masks,
            soft=True,
        )

    m = rc.to_np(m)
    weights = [
        m[: sizes[k], k * n : k * n + sizes[k + 1]].copy() for k in range(depth + 1)
    ]
    masks = [m[:, offset + j] > 0.5 for j in range(depth)]
    return apply_mask(
        MlpSpec(
            activation=meta.activation,
            input_dim=meta.input_dim,
            output_dim=meta.output_dim,
            hidden_sizes=[n] * depth,
            weights=weights,
            masks=masks,
        )
    )


def apply_mask(spec: MlpSpec) -> MlpSpec:
    """
    Zero every weight adjacent to an inactive neuron and drop trailing inactive slots.

    Each hidden layer keeps its slots up to the last active one (at least one slot),
    which gives every hard spec a canonical form. The operation is idempotent.
    Soft specs are returned unchanged: their gates act at evaluation time.
    """
    if spec.soft:
        return spec
    active = [np.ones(spec.input_dim, bool), *spec.masks, np.ones(spec.output_dim, bool)]
    weights = [
        np.where(active[k][:, None] & active[k + 1][None, :], weight, 0.0)
        for k, weight in enumerate(spec.weights)
    ]
    masks = list(spec.masks)
    hidden_sizes = list(spec.hidden_sizes)
    for j, mask in enumerate(spec.masks):
        on = np.flatnonzero(mask)
        keep = int(on[-1]) + 1 if on.size else 1
        masks[j] = mask[:keep]
        hidden_sizes[j] = keep
        weights[j] = weights[j][:, :keep]
        weights[j + 1] = weights[j + 1][:keep, :]
    return replace(spec, hidden_sizes=hidden_sizes, weights=weights, masks=masks)


def effective_weights(spec: MlpSpec):
    """Weights scaled by the gates of both adjacent neurons; equal to the masked weights for hard specs."""
    gates = spec.gates()
    return [
        rc.mul(weight, rc.outer_gate(gates[k], gates[k + 1]))
        for k, weight in enumerate(spec.weights)
    ]


def non_zero_count(spec: MlpSpec) -> int:
    if spec.soft:
        spec = spec.to_numpy()
    return int(sum(np.count_nonzero(weight) for weight in spec.weights))


def prune(spec: MlpSpec, t: float) -> MlpSpec:
    """Set every weight with ``|w| < t`` to exactly zero, then apply the masks."""
    if t < 0:
        raise ValueError(f"Pruning threshold must be nonnegative, got {t}.")
    if spec.soft:
        spec = spec.to_numpy()
    weights = [np.where(np.abs(weight) < t, 0.0, weight) for weight in spec.weights]
    return apply_mask(replace(spec, weights=weights))


def matrix_forward(
    values,
    meta: MatrixMeta,
    x,
    hard=False,
    negative_slope=diffcore.DEFAULT_NEGATIVE_SLOPE,
):
    """
    Evaluate decoded networks straight from their (batched) padded matrices.

    Equivalent to ``mlp_forward(from_matrix(values, meta, soft=not hard), x)`` for every matrix of
    the batch, but evaluated in one pass of Torch primitives.

    :param values: tensor of shape ``(n_max, cols)`` or ``(B, n_max, cols)``.
    :param x: inputs of shape ``(N, i)``.
    :return: tensor of shape ``(N, o)`` or ``(B, N, o)``.
    """
    values = diffcore.as_tensor(values)
    batched = values.dim() == 3
    if not batched:
        values = diffcore.reshape(values, (1, *values.shape))
    _check_layout(values[0], meta)
    x = diffcore.as_tensor(x)
    if x.dim() != 2 or x.shape[1] != meta.input_dim:
        raise DimensionError(
            f"Expected inputs of shape (N, {meta.input_dim}), got {tuple(x.shape)}."
        )
    n, depth = meta.n_max, meta.depth
    sizes = (meta.input_dim, *([n] * depth), meta.output_dim)
    offset = (depth + 1) * n
    hidden = x
    for k in range(depth + 1):
        weight = diffcore.narrow(
            diffcore.narrow(values, 1, 0, sizes[k]), 2, k * n, sizes[k + 1]
        )
        pre = diffcore.matmul(hidden, weight)
        if k < depth:
            gate = diffcore.transpose(diffcore.narrow(values, 2, offset + k, 1), 1, 2)
            if hard:
                gate = (gate.detach() > 0.5).to(diffcore.DTYPE)
            hidden = diffcore.mul(
                activate(pre, meta.activation.hidden_activation, negative_slope), gate
            )
        else:
            hidden = activate(pre, meta.activation.output_activation, negative_slope)
    if not batched:
        hidden = diffcore.reshape(hidden, tuple(hidden.shape[1:]))
    return hidden


def connectivity_graph(spec: MlpSpec) -> nx.DiGraph:
    """Directed graph over active neurons with one edge per non-zero weight."""
    if spec.soft:
        spec = spec.to_numpy()
    active = [np.ones(spec.input_dim, bool), *spec.masks, np.ones(spec.output_dim, bool)]
    graph = nx.DiGraph()
    for k, size in enumerate(spec.layer_sizes):
        graph.add_nodes_from((k, a) for a in range(size) if active[k][a])
    for k, weight in enumerate(spec.weights):
        rows, cols = np.nonzero(weight)
        graph.add_edges_from(
            ((k, int(a)), (k + 1, int(b)))
            for a, b in zip(rows, cols)
            if active[k][a] and active[k + 1][b]
        )
    return graph


def disconnected_inputs(spec: MlpSpec):
    """Indices of inputs from which no output is reachable through non-zero weights."""
    graph = connectivity_graph(spec)
    last = spec.depth + 1
    outputs = {(last, b) for b in range(spec.output_dim)}
    return [
        a
        for a in range(spec.input_dim)
        if not outputs & nx.descendants(graph, (0, a))
    ]


def is_input_connected(spec: MlpSpec) -> bool:
    return not disconnected_inputs(spec)
