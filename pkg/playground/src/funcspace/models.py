"""
This module contains the Torch models of the multi-scale autoencoder.

Parameters are held by ordinary `torch.nn` layers, while every computation goes through the
recorded primitives of :mod:`funcspace.diffcore`.

Layout of :class:`MultiScaleAutoencoder`:

- one convolutional encoder per depth ``1..l_max`` reading the padded MLP matrix as a one-channel image,
- an encoder trunk of 4 dense layers mapping the concatenated encoder segments to the embedding,
- a decoder trunk of 4 dense layers expanding the embedding,
- one transposed-convolution decoder per depth, fed by its own slice of the expanded vector.

"""

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import List, Sequence

import numpy as np
import torch
from torch import nn

from . import diffcore
from .netrep import MatrixMeta, MlpSpec, ActivationKind, matrix_columns, matrix_forward, to_matrix

logger = logging.getLogger("funcspace.models")


@dataclass
class ArchitectureConfig:
    activation: str = "sigmoid"
    input_dim: int = 3
    output_dim: int = 1
    n_max: int = 7
    l_max: int = 4
    d_z: int = 64
    conv_channels: List[int] = field(default_factory=lambda: [8, 16, 32, 32, 32, 32, 32])
    kernel_size: int = 3
    trunk_widths: List[int] = field(default_factory=lambda: [256, 128, 128])
    negative_slope: float = diffcore.DEFAULT_NEGATIVE_SLOPE
    init_seed: int = 0

    def validate(self):
        if self.kernel_size % 2 == 0:
            raise ValueError("Kernel size must be odd to preserve the matrix shape.")
        if len(self.trunk_widths) != 3:
            raise ValueError("Each trunk has 4 dense layers, i.e. 3 intermediate widths.")
        if min(self.d_z, self.n_max, self.l_max, *self.conv_channels) < 1:
            raise ValueError("Dimensions and channel counts must be positive.")
        if max(self.input_dim, self.output_dim) > self.n_max:
            raise ValueError("Input and output dimensions must not exceed n_max.")
        return self

    def as_dict(self):
        return asdict(self)


class ModelNN(nn.Module):
    """
    Base of the Torch models, with a one-slot weight cache.

    :meth:`cache_weights` snapshots the current state (parameters and buffers) and
    :meth:`restore_weights` loads the snapshot back, e.g. after an update produced
    non-finite weights.
    """

    def cache_weights(self):
        self._weights_snapshot = {
            name: value.detach().clone() for name, value in self.state_dict().items()
        }

    def restore_weights(self):
        snapshot = getattr(self, "_weights_snapshot", None)
        if snapshot is None:
            raise RuntimeError(f"{type(self).__name__} has no cached weights to restore.")
        with torch.no_grad():
            self.load_state_dict(snapshot)

    def freeze(self):
        for variable in self.parameters():
            variable.requires_grad_(False)
        return self

    @contextmanager
    def frozen(self):
        """Freeze the parameters for the duration of the block, then restore their ``requires_grad`` flags."""
        flags = [variable.requires_grad for variable in self.parameters()]
        self.freeze()
        try:
            yield self
        finally:
            for variable, flag in zip(self.parameters(), flags):
                variable.requires_grad_(flag)


class DenseStack(nn.Module):
    """Dense layers with leaky-ReLU between them and a linear last layer."""

    def __init__(self, widths: Sequence[int], negative_slope):
        super().__init__()
        self.negative_slope = negative_slope
        self.layers = nn.ModuleList(
            [nn.Linear(fan_in, fan_out) for fan_in, fan_out in zip(widths[:-1], widths[1:])]
        )

    def forward(self, x):
        for index, layer in enumerate(self.layers):
            x = diffcore.add(
                diffcore.matmul(x, diffcore.transpose(layer.weight, 0, 1)), layer.bias
            )
            if index < len(self.layers) - 1:
                x = diffcore.leaky_relu(x, self.negative_slope)
        return x


class ConvStack(nn.Module):
    """Same-padded stride-1 convolutions, or transposed convolutions when `transposed` is set."""

    def __init__(self, channels: Sequence[int], kernel_size, negative_slope, transposed=False):
        super().__init__()
        self.negative_slope = negative_slope
        self.padding = kernel_size // 2
        self.transposed = transposed
        layer = nn.ConvTranspose2d if transposed else nn.Conv2d
        self.layers = nn.ModuleList(
            [
                layer(fan_in, fan_out, kernel_size, padding=self.padding)
                for fan_in, fan_out in zip(channels[:-1], channels[1:])
            ]
        )

    def forward(self, x):
        convolve = diffcore.conv_transpose2d if self.transposed else diffcore.conv2d
        for index, layer in enumerate(self.layers):
            x = convolve(x, layer.weight, layer.bias, padding=self.padding)
            if index < len(self.layers) - 1:
                x = diffcore.leaky_relu(x, self.negative_slope)
        return x


class MultiScaleAutoencoder(ModelNN):
    """
    Encoder/decoder ensemble sharing one embedding space.

    The encoders act as a multiplexer: a network of depth ``l`` is processed by encoder ``l`` only and
    every other encoder contributes a segment of zeros. The decoder side acts as a switch: the
    expanded embedding is split into one slice per decoder, sized by what that decoder consumes.
    """

    def __init__(self, architecture: ArchitectureConfig):
        super().__init__()
        self.architecture = architecture.validate()
        self.activation = ActivationKind.parse(architecture.activation)
        channels = [1, *architecture.conv_channels]
        widths = list(architecture.trunk_widths)
        total = sum(self.segment_widths)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(architecture.init_seed)
            self.encoders = nn.ModuleList(
                [
                    ConvStack(channels, architecture.kernel_size, architecture.negative_slope)
                    for _ in range(architecture.l_max)
                ]
            )
            self.encoder_trunk = DenseStack(
                [total, *widths, architecture.d_z], architecture.negative_slope
            )
            self.decoder_trunk = DenseStack(
                [architecture.d_z, *reversed(widths), total], architecture.negative_slope
            )
            self.decoders = nn.ModuleList(
                [
                    ConvStack(
                        list(reversed(channels)),
                        architecture.kernel_size,
                        architecture.negative_slope,
                        transposed=True,
                    )
                    for _ in range(architecture.l_max)
                ]
            )
        self.register_buffer(
            "embedding_mean", torch.full((architecture.d_z,), math.nan, dtype=torch.float64)
        )
        self.register_buffer(
            "embedding_std", torch.full((architecture.d_z,), math.nan, dtype=torch.float64)
        )
        self.double()

    @property
    def d_z(self):
        return self.architecture.d_z

    @property
    def l_max(self):
        return self.architecture.l_max

    @property
    def n_max(self):
        return self.architecture.n_max

    @property
    def segment_widths(self):
        channels = self.architecture.conv_channels[-1]
        return [
            channels * self.n_max * matrix_columns(depth, self.n_max)
            for depth in range(1, self.l_max + 1)
        ]

    def meta(self, depth) -> MatrixMeta:
        return MatrixMeta(
            activation=self.activation,
            input_dim=self.architecture.input_dim,
            output_dim=self.architecture.output_dim,
            depth=depth,
            n_max=self.n_max,
        )

    @property
    def has_statistics(self):
        return bool(torch.isfinite(self.embedding_mean).all() and torch.isfinite(self.embedding_std).all())

    def set_statistics(self, mean, std):
        with torch.no_grad():
            self.embedding_mean.copy_(diffcore.as_tensor(mean))
            self.embedding_std.copy_(diffcore.as_tensor(std))

    def matrices(self, specs: Sequence[MlpSpec]):
        """Padded matrices and depths of `specs`, ready for :meth:`segments`."""
        for spec in specs:
            if spec.activation is not self.activation:
                raise ValueError(
                    f"A {spec.activation.value}-based network cannot be encoded by a "
                    f"{self.activation.value}-based autoencoder."
                )
        return (
            [to_matrix(spec, self.l_max, self.n_max).values for spec in specs],
            np.array([spec.depth for spec in specs], dtype=int),
        )

    def segments(self, matrices, depths):
        """
        Concatenated encoder outputs, one row per network, in input order.

        :param matrices: sequence of padded matrices, each of shape ``(n_max, cols(depth))``.
        :param depths: depth of each matrix.
        """
        depths = np.asarray(depths, dtype=int)
        if depths.size == 0:
            raise ValueError("Nothing to encode.")
        if depths.min() < 1 or depths.max() > self.l_max:
            raise ValueError(f"Depths must lie in [1, {self.l_max}], got {sorted(set(depths))}.")
        order = np.argsort(depths, kind="stable")
        widths = self.segment_widths
        blocks = []
        for depth in np.unique(depths):
            members = order[depths[order] == depth]
            images = diffcore.as_tensor(np.stack([matrices[k] for k in members]))[:, None]
            features = diffcore.reshape(
                self.encoders[depth - 1](images), (len(members), widths[depth - 1])
            )
            row = [
                features
                if other == depth
                else torch.zeros((len(members), widths[other - 1]), dtype=diffcore.DTYPE)
                for other in range(1, self.l_max + 1)
            ]
            blocks.append(diffcore.concat(row, dim=1))
        stacked = diffcore.concat(blocks, dim=0)
        return diffcore.take(stacked, np.argsort(order), dim=0)

    def embed(self, matrices, depths):
        return self.encoder_trunk(self.segments(matrices, depths))

    def decode(self, z, depths=None):
        """
        Decoded padded matrices for a batch of embeddings.

        The last ``depth`` columns of each matrix are passed through a sigmoid.

        :param z: tensor of shape ``(B, d_z)``.
        :param depths: decoders to run, all by default.
        :return: dict mapping depth to a tensor of shape ``(B, n_max, cols(depth))``.
        """
        depths = range(1, self.l_max + 1) if depths is None else depths
        batch = z.shape[0]
        channels = self.architecture.conv_channels[-1]
        expanded = self.decoder_trunk(z)
        slices = diffcore.split(expanded, self.segment_widths, dim=1)
        decoded = {}
        for depth in depths:
            columns = matrix_columns(depth, self.n_max)
            image = diffcore.reshape(slices[depth - 1], (batch, channels, self.n_max, columns))
            raw = diffcore.reshape(
                self.decoders[depth - 1](image), (batch, self.n_max, columns)
            )
            weight_columns = (depth + 1) * self.n_max
            decoded[depth] = diffcore.concat(
                [
                    diffcore.narrow(raw, 2, 0, weight_columns),
                    diffcore.sigmoid(diffcore.narrow(raw, 2, weight_columns, depth)),
                ],
                dim=2,
            )
        return decoded

    def forward(self, matrices, depths, inputs, targets, soft=True):
        """
        Squared reconstruction errors of every network under every decoder.

        :param inputs: shared input grid of shape ``(N, i)``.
        :param targets: outputs of the input networks on the grid, shape ``(B, N, o)``.
        :return: tensor of shape ``(B, l_max)`` whose entry ``(s, i)`` is
            ``sum_x (N_s(x) - [D_i(E(N_s))](x))^2``.
        """
        targets = diffcore.as_tensor(targets)
        batch = targets.shape[0]
        decoded = self.decode(self.embed(matrices, depths))
        columns = []
        for depth, values in decoded.items():
            predictions = matrix_forward(
                values,
                self.meta(depth),
                inputs,
                hard=not soft,
                negative_slope=self.architecture.negative_slope,
            )
            residual = diffcore.reshape(diffcore.sub(predictions, targets), (batch, -1))
            error = diffcore.reduce_sum(diffcore.square(residual), dim=1)
            columns.append(diffcore.reshape(error, (batch, 1)))
        return diffcore.concat(columns, dim=1)


AutoencoderParams = MultiScaleAutoencoder
