"""Exception hierarchy shared across the package.

Three broad families matter to callers (and to the CLI's exit codes):
``ConfigError`` for bad configuration or usage, ``DataError`` for malformed
or inconsistent inputs, and ``NumericError`` for numerical failures.
"""


class GapCorefError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GapCorefError, ValueError):
    """Invalid configuration value or unusable combination of options."""


class DataError(GapCorefError, ValueError):
    """Malformed input data or inconsistent data passed between stages."""


class NumericError(GapCorefError, ArithmeticError):
    """Numerical failure (non-finite loss, shape mismatch in updates)."""


# --- dataset parsing -------------------------------------------------------

class MalformedRow(DataError):
    """A TSV data row has the wrong column count or an unparseable field."""


class OffsetMismatch(DataError):
    """A stated surface form is not found at its stated character offset."""


class BothCorefTrue(DataError):
    """A record claims the pronoun corefers with both candidates."""


class UnknownPronoun(DataError):
    """Pronoun surface form outside the fixed gendered-pronoun sets."""


class TooFewRecords(DataError):
    """Some gender bucket has fewer records than the requested fold count."""


# --- vocabulary / tokenization ---------------------------------------------

class DuplicateToken(DataError):
    """The vocabulary file lists the same token twice."""


class MissingSpecialToken(DataError):
    """The vocabulary file lacks one of the required special tokens."""


class NoOverlap(DataError):
    """A character span overlaps no tokenized piece."""


class FirstSegmentTooLong(DataError):
    """The first segment alone exceeds the sequence-length budget."""


# --- encoder ----------------------------------------------------------------

class SequenceTooLong(DataError):
    """Encoded input is longer than the encoder's position table."""


class BadRange(ConfigError):
    """Layer-freezing range falls outside the encoder's layers."""


class CorruptHeader(DataError):
    """External-embedding file has a bad magic string or header."""


class DimensionMismatch(DataError):
    """Stored embedding width disagrees with the file header."""


class MissingExample(DataError, KeyError):
    """Requested example id absent from the embedding provider."""


# --- pipelines ---------------------------------------------------------------

class PronounNotFound(DataError):
    """Pronoun offset does not fall inside any whitespace-separated word."""


class AnswerTruncated(DataError):
    """Gold answer span lies beyond the sequence truncation boundary."""


class EmptySpan(DataError):
    """A token span is empty or inverted."""


class DegenerateLabels(DataError):
    """Fewer than two distinct labels in a calibration training set."""


# --- training / metrics -------------------------------------------------------

class ShapeMismatch(NumericError):
    """Gradient and parameter shapes disagree."""


class CoverageMismatch(DataError):
    """Prediction mappings do not cover the identical id set."""


class EmptyGenderSubset(DataError):
    """A gender subset needed for disaggregated metrics is empty."""
