"""Exception hierarchy shared across the package."""


class ToolRLError(Exception):
    """Base class for every error raised by toolrl."""


class InvalidToken(ToolRLError, ValueError):
    pass


class ProtocolViolation(ToolRLError):
    pass


class LayoutError(ToolRLError, ValueError):
    pass


class EncodingError(ToolRLError, ValueError):
    pass


class RegistryError(ToolRLError, ValueError):
    pass


class GenerationError(ToolRLError):
    pass


class DimensionError(ToolRLError, ValueError):
    pass


class NumericalError(ToolRLError, ArithmeticError):
    pass


class EmptyMaskError(ToolRLError, ValueError):
    pass


class EmptyBatchError(ToolRLError, ValueError):
    pass


class GroupSizeError(ToolRLError, ValueError):
    pass


class ConfigError(ToolRLError, ValueError):
    pass


class ParseError(ToolRLError):
    """A malformed tool-call span.

    Raised by :func:`toolrl.tool_protocol.extract_tool_calls`, but the
    environment treats it as data: it is caught, recorded, and scored by the
    format term of the outcome reward instead of ending the episode.
    """

    EMPTY_SPAN = "empty_span"
    UNMATCHED = "unmatched_marker"
    UNKNOWN_TOOL = "unknown_tool"
    ARITY = "arity"

    def __init__(self, kind, span=(), detail=""):
        self.kind = kind
        self.span = tuple(span)
        self.detail = detail
        super().__init__(f"{kind}: {detail}" if detail else kind)
