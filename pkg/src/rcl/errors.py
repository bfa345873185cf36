"""Exception hierarchy shared across the package."""


class RCLError(Exception):
    """Base class for all errors raised by rcl."""


class RecordParseError(RCLError):
    """A single input record could not be decoded."""

    def __init__(self, index: int, message: str):
        super().__init__(f"record {index}: {message}")
        self.index = index
        self.message = message


class MalformedTraceError(RCLError):
    pass


class SpanNotFoundError(RCLError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return Exception.__str__(self)


class BaselineUnavailableError(RCLError):
    pass


class InsufficientHistoryError(RCLError):
    pass


class PreconditionError(RCLError, ValueError):
    pass


class NotAbnormalError(RCLError):
    """The request's entry span is within its latency baseline."""


class SpecError(RCLError, ValueError):
    """Simulator or configuration spec is invalid."""


class LLMError(RCLError):
    pass


class LLMTransportError(LLMError):
    pass


class MalformedToolCallError(LLMError):
    pass


class BudgetExceededError(LLMError):
    pass


class PromptRenderError(LLMError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)
