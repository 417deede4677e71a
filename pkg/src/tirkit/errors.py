"""Exception hierarchy shared across the pipeline.

Errors split into three families: validation errors (bad data or config,
CLI exit code 2), upstream-service errors (endpoint, sandbox, trainer,
CLI exit code 3), and plain ValueError-style misuse of pure functions.
"""


class TirkitError(Exception):
    """Base class for all package errors."""


class ValidationError(TirkitError):
    """Input data, schema, or config violates a stated contract."""


class UpstreamError(TirkitError):
    """An external service (endpoint, sandbox, trainer hook) failed."""


# --- core types ---

class MalformedTags(ValidationError):
    def __init__(self, position: int, message: str = ""):
        self.position = position
        super().__init__(f"malformed tags at char {position}: {message}" if message
                         else f"malformed tags at char {position}")


# --- entropy ---

class InvalidDistribution(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class EmptyStep(ValidationError):
    pass


class NoGeneratedTokens(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


# --- inference gateway ---

class EndpointUnavailable(UpstreamError):
    pass


class ProtocolError(UpstreamError):
    pass


class GatewayTimeout(UpstreamError):
    pass


class PrefixMismatch(ValidationError):
    pass


class PortInUse(UpstreamError):
    pass


class ScenarioParseError(ValidationError):
    pass


# --- toolbox ---

class BudgetExhausted(TirkitError):
    """Raised when a tool call would exceed its per-episode budget."""

    def __init__(self, tool: str):
        self.tool = tool
        super().__init__(f"tool budget exhausted for {tool!r}")


class SandboxUnavailable(UpstreamError):
    pass


class EmptyCorpus(ValidationError):
    pass


class RemoteSearchError(UpstreamError):
    pass


# --- sampler ---

class NoEligibleSteps(ValidationError):
    pass


class EpisodeOverflow(TirkitError):
    def __init__(self, max_total_tokens: int):
        self.max_total_tokens = max_total_tokens
        super().__init__(f"episode exceeded {max_total_tokens} generated tokens")


class RolloutBatchFailed(UpstreamError):
    """Too few rollouts of a batch completed to accept the pool."""


# --- curator ---

class MissingGold(ValidationError):
    pass


class NoLabeledTrajectories(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


# --- metrics ---

class EmptyResults(ValidationError):
    pass


class CoverageMismatch(ValidationError):
    pass


class JudgeUnavailable(UpstreamError):
    pass


# --- pipeline ---

class ConfigError(ValidationError):
    pass


class MissingInput(ValidationError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing input: {path}")


class TrainerHookFailed(UpstreamError):
    def __init__(self, exit_code: int, detail: str = ""):
        self.exit_code = exit_code
        super().__init__(f"trainer hook failed with exit code {exit_code}"
                         + (f": {detail}" if detail else ""))


class RunDirLocked(TirkitError):
    pass
