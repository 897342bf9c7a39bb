"""
Event callbacks of the training and search loops.

A class opts in with the ``@introduce_callbacks()`` class decorator, which adds a ``callbacks``
keyword to its constructor. Each of its methods decorated with ``@apply_callbacks`` then hands
its return value to every callback as ``callback(obj=..., method=..., output=...)``.
Any callable with that signature works, a lambda included.

Instances built without ``callbacks=`` fall back to the package-wide list, which
:func:`set_default_callbacks` replaces:
::

    funcspace.callbacks.set_default_callbacks([TrainingLossCallback(logger)])

"""

import functools
import logging
import time
from abc import ABC, abstractmethod
from pathlib import Path

import pandas as pd

import funcspace

_package_callbacks = None


def default_callbacks():
    """The package-wide callbacks, created on first use."""
    global _package_callbacks
    if _package_callbacks is None:
        log = logging.getLogger("funcspace")
        _package_callbacks = [
            TrainingLossCallback(log),
            BatchLossCallback(log, log_level="debug"),
            SearchProgressCallback(log),
            TradeoffCallback(log),
        ]
    return _package_callbacks


def set_default_callbacks(callbacks):
    global _package_callbacks
    _package_callbacks = None if callbacks is None else list(callbacks)


def apply_callbacks(method):
    """Notify the callbacks of ``self`` with whatever ``method`` returned."""

    @functools.wraps(method)
    def notifying(self, *args, **kwargs):
        output = method(self, *args, **kwargs)
        for callback in self.callbacks if self.callbacks is not None else default_callbacks():
            callback(obj=self, method=method.__name__, output=output)
        return output

    return notifying


class introduce_callbacks:
    """
    Class decorator adding a ``callbacks`` constructor keyword and attribute.

    :param default_callbacks: value used when the keyword is omitted. ``None`` means the
        package-wide callbacks, resolved at notification time.
    """

    def __init__(self, default_callbacks=None):
        self.default_callbacks = default_callbacks

    def __call__(self, cls):
        fallback = self.default_callbacks
        original_init = cls.__init__

        @functools.wraps(original_init)
        def __init__(obj, *args, callbacks=fallback, **kwargs):
            original_init(obj, *args, **kwargs)
            obj.callbacks = callbacks

        cls.__init__ = __init__
        return cls


class Callback(ABC):
    """
    Base of the logging callbacks.

    Subclasses pick their events in :meth:`is_target_event` and act in :meth:`perform`.
    A positive ``cooldown`` (seconds) drops events arriving sooner than that after the last
    performed one. Exceptions raised by a callback are logged and swallowed.
    """

    cooldown = None

    def __init__(self, logger: logging.Logger, log_level="info"):
        self.logger = logger
        self.log = getattr(logger, log_level)
        self.last_trigger = None

    @abstractmethod
    def is_target_event(self, obj, method, output):
        pass

    @abstractmethod
    def perform(self, obj, method, output):
        pass

    def ready(self, now):
        return not self.cooldown or self.last_trigger is None or now - self.last_trigger > self.cooldown

    def trigger_cooldown(self, now):
        self.last_trigger = now

    def __call__(self, obj, method, output):
        now = time.monotonic()
        if not self.ready(now):
            return
        try:
            if self.is_target_event(obj, method, output):
                self.perform(obj, method, output)
                self.trigger_cooldown(now)
        except Exception:
            self.logger.exception("Callback %s failed.", type(self).__name__)


class HistoricalCallback(Callback, ABC):
    """
    Callback that also records what it saw, one row per event.

    The rows start afresh on the ``pre_run`` event of every object the callback :meth:`tracks`,
    so a package-wide instance only ever holds the latest run.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.rows = []

    def tracks(self, obj):
        return False

    def __call__(self, obj, method, output):
        if method == "pre_run" and self.tracks(obj):
            self.clear_recent_data()
        super().__call__(obj, method, output)

    def add_datum(self, datum: dict):
        self.rows.append(dict(datum))

    def clear_recent_data(self):
        self.rows = []

    @property
    def data(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def dump_data(self, path):
        if self.rows:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self.data.to_csv(path, index=False)

    def dump_and_clear_data(self, path):
        self.dump_data(path)
        self.clear_recent_data()


def method_callback(method_name, class_name=None, log_level="debug"):
    """
    Build a callback class logging the outputs of ``method_name``.

    :param class_name: class (or its name) to restrict to; any class when omitted.
    """
    if class_name is not None and not isinstance(class_name, str):
        class_name = class_name.__name__

    class MethodCallback(Callback):
        def __init__(self, logger, log_level=log_level):
            super().__init__(logger, log_level=log_level)

        def is_target_event(self, obj, method, output):
            return method == method_name and class_name in (None, type(obj).__name__)

        def perform(self, obj, method, output):
            self.log(f"{type(obj).__name__}.{method} returned {output}")

    MethodCallback.__name__ = MethodCallback.__qualname__ = f"{method_name}Callback"
    return MethodCallback


class TrainingLossCallback(HistoricalCallback):
    """Logs and stores the mean loss of every autoencoder training epoch."""

    def tracks(self, obj):
        return isinstance(obj, funcspace.scenarios.AutoencoderTrainingScenario)

    def is_target_event(self, obj, method, output):
        return self.tracks(obj) and method == "post_epoch"

    def perform(self, obj, method, output):
        self.log(
            f"Epoch {output['epoch']}/{obj.config.epochs}: "
            f"mean loss {output['loss']:.6g} over {output['batches']} batches"
        )
        self.add_datum(output)


class BatchLossCallback(Callback):
    cooldown = 5.0

    def is_target_event(self, obj, method, output):
        return (
            isinstance(obj, funcspace.scenarios.AutoencoderTrainingScenario)
            and method == "post_batch"
        )

    def perform(self, obj, method, output):
        self.log(
            f"Epoch {output['epoch']}, batch {output['batch']}/{output['batches']}: loss {output['loss']:.6g}"
        )


class SearchProgressCallback(Callback):
    """Logs an embedding search every ``log_every`` iterations of its config."""

    def is_target_event(self, obj, method, output):
        if not (
            isinstance(obj, funcspace.scenarios.EmbeddingSearchScenario)
            and method == "post_iteration"
        ):
            return False
        every = getattr(obj.config, "log_every", 0)
        return bool(every) and (
            output["iteration"] % every == 0 or output["iteration"] == obj.config.iterations
        )

    def perform(self, obj, method, output):
        self.log(
            f"Decoder D{obj.decoder}, restart {obj.restart}, iteration "
            f"{output['iteration']}/{obj.config.iterations}: loss {output['loss']:.6g}, t {output['t']:.4g}"
        )


class TradeoffCallback(HistoricalCallback):
    def tracks(self, obj):
        return isinstance(obj, funcspace.embsearch.TradeoffScenario)

    def is_target_event(self, obj, method, output):
        return self.tracks(obj) and method == "post_point"

    def perform(self, obj, method, output):
        self.log(
            f"alpha={output['alpha']:.4g}: non-zero count {output['nonzero']}, MPE {output['mpe']:.4g}"
        )
        self.add_datum(output)
