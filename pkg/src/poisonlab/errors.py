"""Exception types shared across the package."""


class PoisonLabError(Exception):
    """Base class for all poisonlab errors."""


class ConfigError(PoisonLabError):
    """A parameter or configuration value is invalid."""


class BadSpec(ConfigError):
    """A synthetic-dataset specification is degenerate."""


class BadK(ConfigError):
    """Invalid partition count for an ensemble."""


class MalformedRecord(PoisonLabError):
    """A JSONL record is missing keys or carries an unknown label."""

    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmptyDataset(PoisonLabError):
    """An operation received a dataset with no examples."""


class EmptyText(PoisonLabError):
    """An example tokenizes to zero tokens."""


class DegenerateDataset(PoisonLabError):
    """Training data contains fewer than two classes."""


class InsufficientSource(PoisonLabError):
    """Not enough source examples to fill a poisoning budget."""


class NoCandidates(PoisonLabError):
    """No visited token position has any substitution candidates."""


class CorruptModel(PoisonLabError):
    """A model file is truncated or structurally invalid."""


class VersionMismatch(PoisonLabError):
    """A model file uses an unsupported format version."""


class NoPoisons(PoisonLabError):
    """The dataset carries no poison-tagged examples."""


class NoNonTargetExamples(PoisonLabError):
    """The test set has no examples outside the target class."""


class ExternalFailure(PoisonLabError):
    """An external subprocess exited with a nonzero status."""

    def __init__(self, exit_code, detail=""):
        msg = f"external command failed with exit code {exit_code}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.exit_code = exit_code
