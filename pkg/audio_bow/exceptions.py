"""Error categories shared by every module.

Each module defines its own error class derived from one of these categories;
the command line maps the category to its exit code.
"""


class AudioBowError(Exception):
    """Root of all errors raised by the package."""

    exit_code = 1


class ValidationFailure(AudioBowError):
    """Invalid input, configuration or data shape."""

    exit_code = 2


class MissingArtifactError(AudioBowError):
    """An upstream artifact is absent or fails verification."""

    exit_code = 3


class DivergenceError(AudioBowError):
    """Training produced non-finite losses or gradients."""

    exit_code = 4
