"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CouncilError(Exception):
    """Base class for every error raised by councilsim."""


class ConfigError(CouncilError):
    """Invalid or incomplete configuration."""


class PreconditionError(CouncilError, ValueError):
    """An operation was called with inputs violating its contract."""


class ProviderError(CouncilError):
    """A generation backend failed after exhausting retries."""


class ProtocolError(ProviderError):
    """A generation backend answered with a payload we cannot interpret."""


class RankingParseError(CouncilError):
    """Evaluator output did not contain a valid ranking block."""


class EvaluationError(CouncilError):
    """An evaluator never produced a parseable ranking."""

    def __init__(self, role: str, raw_text: str, attempts: int, reason: str):
        super().__init__(f"evaluator {role!r} unparseable after {attempts} attempts: {reason}")
        self.role = role
        self.raw_text = raw_text
        self.attempts = attempts
        self.reason = reason


class JudgeError(CouncilError):
    """A coherence judge never produced a usable score."""

    def __init__(self, role: str, raw_text: str, attempts: int, reason: str):
        super().__init__(f"judge failed for {role!r} after {attempts} attempts: {reason}")
        self.role = role
        self.raw_text = raw_text
        self.attempts = attempts
        self.reason = reason


class UndefinedMetricError(CouncilError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero total weight)."""


class DegenerateTestError(CouncilError, ValueError):
    """A statistic is undefined because the data carry no variation."""


class StoreError(CouncilError):
    """Run store could not be read or written."""


class RunAborted(CouncilError):
    """A deliberation stopped part-way; ``transcript`` holds what was produced."""

    def __init__(self, message: str, transcript=None, cause: BaseException | None = None):
        super().__init__(message)
        self.transcript = transcript
        self.cause = cause
