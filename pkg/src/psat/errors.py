"""Shared exception types.

Invalid arguments and malformed inputs raise ValidationError or a subclass
of it; failures that occur mid-run (I/O, diverging training, leaked splits)
raise RuntimeFailure subclasses. The command-line layer maps the former to
exit code 2 and the latter to exit code 3.
"""

from __future__ import annotations


class PsatError(Exception):
    """Base class for all package errors."""


class ValidationError(PsatError, ValueError):
    """An argument or input value violates a documented precondition."""


class StrategyCodeError(ValidationError):
    """A strategy code string does not parse; message names the bad position."""


class ConfigError(ValidationError):
    """A config file or config value is malformed."""


class RuntimeFailure(PsatError, RuntimeError):
    """An operation failed while running despite valid inputs."""


class FormatError(RuntimeFailure):
    """A serialized file has a bad magic, version, or structure."""


class GenerationError(RuntimeFailure):
    """Phantom generation produced a degenerate subject."""


class CheckpointError(RuntimeFailure):
    """A checkpoint is unreadable or inconsistent with its config."""


class SplitLeakError(RuntimeFailure):
    """An evaluation set overlaps the training set."""


class TrainingError(RuntimeFailure):
    """Training produced non-finite values or an otherwise broken state."""
