"""
Auxiliary tools.

The central piece is :data:`rc`, a handler whose methods dispatch on the types of their arguments:
NumPy arrays are processed by NumPy/SciPy, Torch tensors are routed through the recorded
primitives of :mod:`funcspace.diffcore`, so the same network code evaluates hard specs in NumPy and
differentiable soft specs in Torch.

"""

import functools
import os
import random
import types
from enum import IntEnum
from typing import Optional

import numpy as np
import torch
from scipy.special import expit

from . import diffcore


class RCType(IntEnum):
    """Backend of a computation. Mixed arguments resolve to the higher value, so Torch wins."""

    TORCH = 2
    NUMPY = 1


TORCH = RCType.TORCH
NUMPY = RCType.NUMPY


def type_inference(*args, **kwargs) -> RCType:
    values = (*args, *kwargs.values())
    return TORCH if any(isinstance(value, torch.Tensor) for value in values) else NUMPY


def _infer_rc_type(method):
    @functools.wraps(method)
    def dispatched(self, *args, rc_type=None, **kwargs):
        if rc_type is None:
            rc_type = type_inference(*args, **kwargs)
        return method(self, *args, rc_type=rc_type, **kwargs)

    return dispatched


class TypeInferenceMeta(type):
    """Wraps every plain method of the class body so that ``rc_type`` is inferred when omitted."""

    def __new__(mcs, name, bases, namespace):
        for key, value in list(namespace.items()):
            if isinstance(value, types.FunctionType) and key != "__init__":
                namespace[key] = _infer_rc_type(value)
        return super().__new__(mcs, name, bases, namespace)


class RCTypeHandler(metaclass=TypeInferenceMeta):

    TORCH = RCType.TORCH
    NUMPY = RCType.NUMPY

    def to_np(self, x, rc_type: RCType = NUMPY):
        if rc_type == TORCH:
            return x.detach().cpu().numpy()
        return np.asarray(x, dtype=np.float64)

    def sigmoid(self, x, rc_type: RCType = NUMPY):
        if rc_type == NUMPY:
            return expit(x)
        elif rc_type == TORCH:
            return diffcore.sigmoid(x)

    def leaky_relu(
        self, x, negative_slope=diffcore.DEFAULT_NEGATIVE_SLOPE, rc_type: RCType = NUMPY
    ):
        if rc_type == NUMPY:
            return np.where(x >= 0, x, negative_slope * x)
        elif rc_type == TORCH:
            return diffcore.leaky_relu(x, negative_slope)

    def matmul(self, A, B, rc_type: RCType = NUMPY):
        if rc_type == NUMPY:
            return np.matmul(A, B)
        elif rc_type == TORCH:
            return diffcore.matmul(diffcore.as_tensor(A), diffcore.as_tensor(B))

    def add(self, a, b, rc_type: RCType = NUMPY):
        if rc_type == NUMPY:
            return np.add(a, b)
        elif rc_type == TORCH:
            return diffcore.add(diffcore.as_tensor(a), diffcore.as_tensor(b))

    def sub(self, a, b, rc_type: RCType = NUMPY):
        if rc_type == NUMPY:
            return np.subtract(a, b)
        elif rc_type == TORCH:
            return diffcore.sub(diffcore.as_tensor(a), diffcore.as_tensor(b))

    def scale(self, x, factor, rc_type: RCType = NUMPY):
        if rc_type == NUMPY:
            return np.multiply(x, factor)
        elif rc_type == TORCH:
            return diffcore.scale(x, float(factor))

    def mul(self, a, b, rc_type: RCType = NUMPY):
        if rc_type == NUMPY:
            return np.multiply(a, b)
        elif rc_type == TORCH:
            return diffcore.mul(diffcore.as_tensor(a), diffcore.as_tensor(b))

    def abs(self, x, rc_type: RCType = NUMPY):
        if rc_type == NUMPY:
            return np.abs(x)
        elif rc_type == TORCH:
            return diffcore.absolute(x)

    def sum(self, x, rc_type: RCType = NUMPY):
        if rc_type == NUMPY:
            return np.sum(x)
        elif rc_type == TORCH:
            return diffcore.reduce_sum(x)

    def concatenate(self, argin, rc_type: RCType = NUMPY):
        rc_type = type_inference(*argin)
        if rc_type == NUMPY:
            return np.concatenate([np.ravel(item) for item in argin])
        elif rc_type == TORCH:
            return diffcore.concat(
                [diffcore.reshape(diffcore.as_tensor(item), (-1,)) for item in argin]
            )

    def outer_gate(self, row_gate, column_gate, rc_type: RCType = NUMPY):
        """Matrix whose entry (a, b) is ``row_gate[a] * column_gate[b]``."""
        if rc_type == NUMPY:
            return np.outer(row_gate, column_gate)
        elif rc_type == TORCH:
            return diffcore.matmul(
                diffcore.reshape(diffcore.as_tensor(row_gate), (-1, 1)),
                diffcore.reshape(diffcore.as_tensor(column_gate), (1, -1)),
            )


rc = RCTypeHandler()


def seed_everything(seed: int):
    """Seed the global generators of `random`, NumPy and Torch."""
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    random.seed(seed)


def resolve_threads(threads: Optional[int] = None) -> int:
    """
    Number of worker threads: explicit value, else ``FUNCSPACE_THREADS``, else the core count.
    """
    if threads is None:
        threads = os.environ.get("FUNCSPACE_THREADS") or os.cpu_count() or 1
    threads = int(threads)
    if threads < 1:
        raise ValueError(f"Thread count must be positive, got {threads}.")
    return threads


def round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5 + 1e-9))
