"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class PatchDistillError(Exception):
    exit_code = 1


class ConfigError(PatchDistillError, ValueError):
    """Invalid configuration. Holds every offending field, not just the first."""

    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class GeometryError(ConfigError):
    """Image dimensions do not tile exactly into the configured patch size."""


class DataError(PatchDistillError):
    exit_code = 3


class CheckpointError(DataError):
    pass


class TrainingError(PatchDistillError):
    exit_code = 4


class ContractError(PatchDistillError, ValueError):
    """A caller broke a documented precondition."""
