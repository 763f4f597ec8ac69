"""Exception types shared across the simulator."""

from __future__ import annotations


class ConfigurationError(ValueError):
    """Invalid configuration: bad dimensions, out-of-range hyperparameters, schema violations."""


class EmptyTrainSplit(ConfigurationError):
    """A client was asked to train but holds no training rows."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the run cannot continue."""


class DataFormatError(RuntimeError):
    """An on-disk run artifact is malformed; names the offending file."""


class RoundAbort(RuntimeError):
    """A training round failed; carries the round and client that caused it."""

    def __init__(self, round_index: int, client_id: int | None, cause: BaseException):
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause
        where = f"round {round_index}"
        if client_id is not None:
            where += f", client {client_id}"
        super().__init__(f"aborted at {where}: {cause}")
