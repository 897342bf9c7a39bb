"""
Update rules.

- :class:`TorchOptimizer` updates the parameters of a model against an objective evaluated on a tape.
- :class:`ProjectedGradientOptimizer` performs the coupled updates of an embedding ``z`` and a
  threshold ``t`` with separate learning rates, projecting ``t`` onto ``t >= 0`` after each step.

"""

import functools
import logging
import time
from abc import ABC, abstractmethod

import torch

from . import diffcore

logger = logging.getLogger("funcspace.optimizers")

OPT_METHODS = {"adam": torch.optim.Adam, "sgd": torch.optim.SGD}


def resolve_method(opt_method):
    if opt_method is None:
        return torch.optim.Adam
    if isinstance(opt_method, str):
        try:
            return OPT_METHODS[opt_method.lower()]
        except KeyError:
            raise ValueError(
                f"Unknown update rule '{opt_method}'. Use one of {sorted(OPT_METHODS)}."
            ) from None
    return opt_method


class Optimizer(ABC):
    """Common interface of the update rules: an ``engine`` name and :meth:`optimize`."""

    @property
    @abstractmethod
    def engine(self):
        pass

    @abstractmethod
    def optimize(self, *args, **kwargs):
        pass

    @staticmethod
    def verbose(opt_func):
        """Time every call and log the duration at debug level when ``self.verbose`` is set."""

        @functools.wraps(opt_func)
        def timed(self, *args, **kwargs):
            started = time.perf_counter()
            result = opt_func(self, *args, **kwargs)
            if self.verbose:
                logger.debug("%s step took %.4f s", type(self).__name__, time.perf_counter() - started)
            return result

        return timed


class TorchOptimizer(Optimizer):
    """
    A ``torch.optim`` update rule over the trainable parameters of a model.

    Gradients are not taken with ``loss.backward()`` but with :func:`funcspace.diffcore.backward`
    on the tape that recorded the objective, so that every non-finite intermediate raises
    :class:`funcspace.diffcore.NonFiniteError` before any parameter is touched.
    """

    engine = "Torch"

    def __init__(
        self, opt_options, model, iterations=1, opt_method=None, verbose=False
    ):
        """
        :param opt_options: keyword arguments of the torch optimizer, ``lr`` in particular.
        :param model: module whose parameters with ``requires_grad`` are updated.
        :param iterations: update steps per call of :meth:`optimize`.
        :param opt_method: torch optimizer class, or ``"adam"`` (default) or ``"sgd"``.
        :param verbose: log the duration of every call.
        """
        self.opt_method = resolve_method(opt_method)
        self.opt_options = dict(opt_options)
        self.iterations = iterations
        self.verbose = verbose
        self.loss_history = []
        self.model = model
        self.parameters = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = self.opt_method(self.parameters, **self.opt_options)

    @Optimizer.verbose
    def optimize(self, objective):
        """
        Perform :attr:`iterations` update steps.

        :param objective: closure without arguments that evaluates the loss with diffcore primitives.
        :return: loss value before the last step.
        """
        loss = None
        for _ in range(self.iterations):
            self.optimizer.zero_grad()
            output, tape = diffcore.forward(lambda *_: objective(), *self.parameters)
            gradients = diffcore.backward(tape)
            for parameter, gradient in zip(self.parameters, gradients):
                parameter.grad = gradient
            self.optimizer.step()
            loss = float(output.detach())
            self.loss_history.append(loss)
        return loss


class ProjectedGradientOptimizer(Optimizer):
    """
    First-order updates of ``(z, t)``:
    ``z <- z - lr_z * dL/dz`` and ``t <- max(0, t - lr_t * dS/dt)``.

    The gradients are supplied by the caller; the projection keeps ``t`` nonnegative after every step.
    """

    engine = "Torch"

    def __init__(self, z, t, lr_z, lr_t, opt_method="sgd", lower_bound=0.0, verbose=False):
        if lr_z < 0 or lr_t < 0:
            raise ValueError("Learning rates must be nonnegative.")
        self.z = diffcore.as_tensor(z).detach().clone().requires_grad_(True)
        self.t = diffcore.as_tensor(t).detach().clone().reshape(()).requires_grad_(True)
        self.lower_bound = lower_bound
        self.verbose = verbose
        self.opt_method = resolve_method(opt_method)
        self.optimizer = self.opt_method(
            [{"params": [self.z], "lr": lr_z}, {"params": [self.t], "lr": lr_t}]
        )
        self.project()

    def project(self):
        with torch.no_grad():
            self.t.clamp_(min=self.lower_bound)

    @property
    def state(self):
        return self.z.detach().clone(), float(self.t.detach())

    def load(self, z, t):
        with torch.no_grad():
            self.z.copy_(diffcore.as_tensor(z))
            self.t.fill_(float(t))
        self.project()

    @Optimizer.verbose
    def optimize(self, grad_z, grad_t):
        self.z.grad = diffcore.as_tensor(grad_z).reshape(self.z.shape)
        self.t.grad = diffcore.as_tensor(grad_t).reshape(())
        self.optimizer.step()
        self.project()
        return self.state
