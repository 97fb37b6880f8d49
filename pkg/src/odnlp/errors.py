"""Exception hierarchy shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class IngestError(ToolkitError):
    """Raw input file could not be read or parsed."""


class ValidationError(ToolkitError):
    """Input data violates a contract (duplicate ids, bad labels, shapes)."""


class TableParseError(ToolkitError):
    """A vector table or lexicon file is malformed."""


class ConfigurationError(ToolkitError):
    """A run or model configuration is invalid or incomplete."""


class SplitError(ToolkitError):
    """A dataset split cannot be produced as requested."""


class TrainingError(ToolkitError):
    """Model training failed (degenerate labels, unloadable weights)."""


class FoldError(TrainingError):
    """Cross-validation folds cannot satisfy the per-fold class minimums."""


class ClientError(ToolkitError):
    """Text-generation client transport failure after retries."""


class StageError(ToolkitError):
    """An experiment stage failed; the run manifest records the partial state."""


# Errors that indicate bad input data rather than a failed computation.
DATA_ERRORS = (IngestError, ValidationError, TableParseError, SplitError)
