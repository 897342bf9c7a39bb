"""
This module contains the reverse-mode differentiation kernel every trainable part of the package runs on.

All values are dense 64-bit torch tensors. Primitives are thin wrappers around torch operations;
while a :class:`Tape` is active in the current context each primitive call is appended to it as a
:class:`TapeNode`, checked for finiteness and later differentiated by :func:`backward`.
Outside of a tape the primitives simply compute.

Typical use:
::

    loss, tape = diffcore.forward(lambda z: diffcore.reduce_sum(diffcore.square(z)), z0)
    (grad_z,) = diffcore.backward(tape)

Tapes live in a context variable, so every thread owns its own active tape.

"""

import contextvars
import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger("funcspace.diffcore")

DTYPE = torch.float64
DEFAULT_NEGATIVE_SLOPE = 0.01

_ACTIVE_TAPE = contextvars.ContextVar("funcspace_active_tape", default=None)


class NonFiniteError(ArithmeticError):
    """Raised when a recorded node produces NaN or infinity."""

    def __init__(self, node_id, op, message=None):
        self.node_id = node_id
        self.op = op
        super().__init__(
            message or f"Non-finite value produced at node {node_id} ({op})."
        )


class ShapeMismatchError(ValueError):
    def __init__(self, node_id, op, expected, found):
        self.node_id = node_id
        self.op = op
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(
            f"Seed of shape {self.found} does not match node {node_id} ({op}) of shape {self.expected}."
        )


@dataclass(frozen=True)
class TapeNode:
    node_id: int
    op: str
    input_ids: Tuple[int, ...]
    shape: Tuple[int, ...]


class Tape:
    """
    Ordered record of the primitive operations evaluated by one closure.

    Node ids are assigned in evaluation order, hence the record is topologically sorted.
    A tape is owned by the thread that built it and must not be shared.
    """

    def __init__(self, closure=None, check_finite=True):
        self.closure = closure
        self.check_finite = check_finite
        self.nodes: List[TapeNode] = []
        self.inputs: List[torch.Tensor] = []
        self.output: Optional[torch.Tensor] = None
        self.__ids = {}
        self.__values = []
        self.__token = None

    def __enter__(self):
        self.__token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        _ACTIVE_TAPE.reset(self.__token)
        self.__token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def node_id_of(self, tensor):
        return self.__ids.get(id(tensor), -1)

    def __append(self, op, input_ids, tensor):
        node = TapeNode(
            node_id=len(self.nodes),
            op=op,
            input_ids=tuple(input_ids),
            shape=tuple(tensor.shape),
        )
        self.nodes.append(node)
        self.__ids[id(tensor)] = node.node_id
        self.__values.append(tensor)
        return node

    def __ensure(self, tensor):
        node_id = self.node_id_of(tensor)
        if node_id < 0:
            node_id = self.__append(
                "param" if tensor.requires_grad else "const", (), tensor
            ).node_id
        return node_id

    def register_input(self, tensor):
        node = self.__append("input", (), tensor)
        if not bool(torch.isfinite(tensor).all()):
            raise NonFiniteError(node.node_id, "input", "Inputs must be finite.")
        self.inputs.append(tensor)
        return tensor

    def record(self, op, operands, output):
        input_ids = [self.__ensure(operand) for operand in operands]
        node = self.__append(op, input_ids, output)
        if self.check_finite and not bool(torch.isfinite(output).all()):
            raise NonFiniteError(node.node_id, op)
        return output

    def set_output(self, output):
        if not isinstance(output, torch.Tensor):
            raise TypeError(
                f"A differentiable closure must return a tensor, got {type(output).__name__}."
            )
        if self.node_id_of(output) < 0:
            self.record("output", [], output)
        self.output = output

    @property
    def output_node(self):
        return self.nodes[self.node_id_of(self.output)]

    def replay(self):
        """
        Re-evaluate the recorded closure on the recorded input values.

        :return: a fresh output tensor, bit-identical to :attr:`output` on CPU.
        """
        if self.closure is None:
            raise ValueError("This tape has no closure to replay.")
        with torch.no_grad(), Tape(check_finite=self.check_finite):
            return self.closure(*[tensor.detach().clone() for tensor in self.inputs])


def active_tape():
    return _ACTIVE_TAPE.get()


def _flatten_tensors(args):
    for arg in args:
        if isinstance(arg, torch.Tensor):
            yield arg
        elif isinstance(arg, (list, tuple)):
            yield from _flatten_tensors(arg)


def primitive(op_name):
    """
    Mark a function as a recorded primitive named `op_name`.

    Tensor arguments, including tensors inside list arguments, become the node's inputs.
    """

    def decorator(function):
        @functools.wraps(function)
        def wrapper(*args, **kwargs):
            output = function(*args, **kwargs)
            tape = _ACTIVE_TAPE.get()
            if tape is not None:
                tape.record(op_name, list(_flatten_tensors(args)), output)
            return output

        wrapper.op_name = op_name
        return wrapper

    return decorator


def as_tensor(value):
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


@primitive("add")
def add(a, b):
    return torch.add(a, b)


@primitive("sub")
def sub(a, b):
    return torch.sub(a, b)


@primitive("neg")
def neg(a):
    return torch.neg(a)


@primitive("mul")
def mul(a, b):
    return torch.mul(a, b)


@primitive("scale")
def scale(a, factor: float):
    return a * factor


@primitive("matmul")
def matmul(a, b):
    return torch.matmul(a, b)


@primitive("conv2d")
def conv2d(x, weight, bias=None, padding=0):
    return F.conv2d(x, weight, bias, padding=padding)


@primitive("conv_transpose2d")
def conv_transpose2d(x, weight, bias=None, padding=0):
    return F.conv_transpose2d(x, weight, bias, padding=padding)


@primitive("sigmoid")
def sigmoid(x):
    return torch.sigmoid(x)


@primitive("leaky_relu")
def leaky_relu(x, negative_slope=DEFAULT_NEGATIVE_SLOPE):
    return F.leaky_relu(x, negative_slope=negative_slope)


@primitive("abs")
def absolute(x):
    return torch.abs(x)


@primitive("sum")
def reduce_sum(x, dim=None, keepdim=False):
    if dim is None:
        return torch.sum(x)
    return torch.sum(x, dim=dim, keepdim=keepdim)


@primitive("min")
def min_select(x, dim=-1):
    """
    Minimum along `dim`, differentiated through the selected element only.

    Ties resolve to the lowest index.
    """
    index = torch.argmin(x, dim=dim, keepdim=True)
    return torch.gather(x, dim, index).squeeze(dim)


@primitive("power")
def power(base, exponent):
    return torch.pow(base, exponent)


@primitive("reshape")
def reshape(x, shape):
    return torch.reshape(x, tuple(shape))


@primitive("concat")
def concat(tensors: Sequence[torch.Tensor], dim=0):
    return torch.cat(list(tensors), dim=dim)


@primitive("narrow")
def narrow(x, dim, start, length):
    return torch.narrow(x, dim, start, length)


@primitive("take")
def take(x, index, dim=0):
    return torch.index_select(x, dim, torch.as_tensor(index, dtype=torch.long))


@primitive("transpose")
def transpose(x, dim0=-2, dim1=-1):
    return torch.transpose(x, dim0, dim1)


def square(x):
    return mul(x, x)


def split(x, sizes: Sequence[int], dim=0):
    pieces = []
    start = 0
    for size in sizes:
        pieces.append(narrow(x, dim, start, size))
        start += size
    if start != x.shape[dim]:
        raise ValueError(
            f"Split sizes {tuple(sizes)} do not cover extent {x.shape[dim]} along dim {dim}."
        )
    return pieces


def _as_leaf(value):
    if (
        isinstance(value, torch.Tensor)
        and value.dtype == DTYPE
        and value.requires_grad
        and value.is_leaf
    ):
        return value
    return as_tensor(value).detach().clone().requires_grad_(True)


def forward(closure: Callable, *inputs, check_finite=True):
    """
    Evaluate `closure` on `inputs` while recording a tape.

    Inputs that already are 64-bit leaf tensors requiring gradients (model parameters, say)
    are used as they are; everything else is copied into a fresh leaf.

    :param closure: function of the inputs built from the primitives of this module.
    :param inputs: tensors or array-likes.
    :param check_finite: raise :class:`NonFiniteError` at the first non-finite node.
    :return: ``(output, tape)``
    """
    tape = Tape(closure, check_finite=check_finite)
    leaves = [tape.register_input(_as_leaf(value)) for value in inputs]
    with tape:
        output = closure(*leaves)
        tape.set_output(output)
    return output, tape


def backward(tape: Tape, seed=None, retain_graph=False):
    """
    Gradients of ``<seed, output>`` with respect to every input of `tape`.

    Inputs the output does not depend on receive zero gradients.
    """
    output = tape.output
    if output is None:
        raise ValueError("The tape holds no output. Build it with forward().")
    seed = torch.ones_like(output) if seed is None else as_tensor(seed)
    if tuple(seed.shape) != tuple(output.shape):
        node = tape.output_node
        raise ShapeMismatchError(node.node_id, node.op, output.shape, seed.shape)
    gradients = torch.autograd.grad(
        output,
        tape.inputs,
        grad_outputs=seed,
        retain_graph=retain_graph,
        allow_unused=True,
    )
    return [
        torch.zeros_like(tensor) if gradient is None else gradient
        for gradient, tensor in zip(gradients, tape.inputs)
    ]


def value_and_grad(closure, *inputs, check_finite=True):
    output, tape = forward(closure, *inputs, check_finite=check_finite)
    return output, backward(tape)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    passed: bool
    analytic: List[float] = field(default_factory=list)
    numeric: List[float] = field(default_factory=list)

    def __bool__(self):
        return self.passed


def finite_diff_check(
    function,
    point,
    step=1e-5,
    tolerance=1e-4,
    floor=1e-6,
    components=None,
):
    """
    Compare :func:`backward` against central differences.

    The relative error of a component is ``|a - n| / max(|a|, |n|, floor)``.
    Non-scalar outputs are checked through their sum.

    :param function: closure built from primitives.
    :param point: array-like, or a tuple of array-likes for functions of several inputs.
    :param components: optional sequence of ``(input_index, flat_index)`` pairs to check;
        all components are checked by default.
    :return: :class:`FiniteDiffReport`
    """
    if step <= 0:
        raise ValueError("Finite-difference step must be positive.")
    points = point if isinstance(point, tuple) else (point,)
    points = [as_tensor(value).detach().clone() for value in points]

    output, tape = forward(function, *points, check_finite=False)
    analytic = backward(tape, torch.ones_like(output))

    if components is None:
        components = [
            (k, j) for k, value in enumerate(points) for j in range(value.numel())
        ]

    def evaluate(shifted):
        with torch.no_grad():
            return float(torch.sum(function(*shifted)))

    report = FiniteDiffReport(max_rel_error=0.0, passed=True)
    for k, j in components:
        plus = [value.clone() for value in points]
        minus = [value.clone() for value in points]
        plus[k].view(-1)[j] += step
        minus[k].view(-1)[j] -= step
        numeric = (evaluate(plus) - evaluate(minus)) / (2 * step)
        exact = float(analytic[k].reshape(-1)[j])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        report.analytic.append(exact)
        report.numeric.append(numeric)
        report.max_rel_error = max(report.max_rel_error, error)
    report.passed = report.max_rel_error <= tolerance
    if not report.passed:
        logger.debug(
            "Finite-difference check failed: max relative error %.3e > %.1e",
            report.max_rel_error,
            tolerance,
        )
    return report
