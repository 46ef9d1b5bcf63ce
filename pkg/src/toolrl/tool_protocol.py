"""Tool metadata and the token-level tool-call codec.

A call is written in the token stream as::

    TOOL_OPEN <tool-name> <arg> ... TOOL_CLOSE

and a tool's raw result comes back to the agent as::

    OBS_OPEN (<subject> <relation> <object>)* OBS_CLOSE
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import EncodingError, ParseError, RegistryError
from .token_mdp import Vocabulary

SEMANTIC_TYPES = ("entity", "relation", "free_token")


@dataclass(frozen=True)
class ToolParam:
    name: str
    semantic_type: str = "free_token"
    required: bool = True
    description: str = ""

    def __post_init__(self):
        if self.semantic_type not in SEMANTIC_TYPES:
            raise RegistryError(f"unknown semantic type {self.semantic_type!r}")


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "parameters", tuple(self.parameters))
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise RegistryError(f"duplicate parameter names in tool {self.name!r}")

    @property
    def min_args(self) -> int:
        return sum(p.required for p in self.parameters)

    @property
    def max_args(self) -> int:
        return len(self.parameters)

    def json_schema(self) -> dict:
        props = {}
        for p in self.parameters:
            prop = {"type": "string", "semantic_type": p.semantic_type}
            if p.description:
                prop["description"] = p.description
            props[p.name] = prop
        return {
            "type": "object",
            "properties": props,
            "required": [p.name for p in self.parameters if p.required],
        }

    def to_dict(self) -> dict:
        return {"name": self.name, "description": self.description, "parameters": self.json_schema()}

    @classmethod
    def from_dict(cls, d: dict) -> "ToolSpec":
        schema = d.get("parameters") or {}
        if schema.get("type", "object") != "object":
            raise RegistryError(f"tool {d.get('name')!r}: parameters must be an object schema")
        required = set(schema.get("required", ()))
        props = schema.get("properties", {})
        unknown = required - set(props)
        if unknown:
            raise RegistryError(f"tool {d.get('name')!r}: required names not declared: {sorted(unknown)}")
        params = tuple(
            ToolParam(
                name,
                prop.get("semantic_type", "free_token"),
                name in required,
                prop.get("description", ""),
            )
            for name, prop in props.items()
        )
        return cls(d["name"], d.get("description", ""), params)


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "arguments", tuple(self.arguments))


@dataclass(frozen=True)
class ToolResult:
    payload: tuple = ()
    success: bool = True
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "payload", tuple(tuple(f) for f in self.payload))
        if not self.success and self.payload:
            raise ValueError("a failed tool result carries no payload")

    @classmethod
    def failure(cls, note: str = "") -> "ToolResult":
        return cls((), False, note)


class BaseTool(abc.ABC):
    """An atomic capability the agent can invoke.

    Subclasses provide ``spec`` and implement :meth:`execute`, which returns
    the raw outcome of the action and nothing more. Interpreting the outcome
    (feedback tokens, rewards, termination) is the environment's job.
    """

    spec: ToolSpec

    @property
    def name(self) -> str:
        return self.spec.name

    @abc.abstractmethod
    def execute(self, arguments: Sequence[str]) -> ToolResult:
        ...


class ToolRegistry:
    """Read-only name -> tool mapping, bound to a vocabulary."""

    def __init__(self, tools: Iterable, vocab: Vocabulary):
        self.vocab = vocab
        self._tools = {}
        self._specs = {}
        for tool in tools:
            spec = tool.spec if isinstance(tool, BaseTool) else tool
            if spec.name in self._specs:
                raise RegistryError(f"duplicate tool name {spec.name!r}")
            if spec.name not in vocab:
                raise RegistryError(f"tool name {spec.name!r} is not a vocabulary symbol")
            self._specs[spec.name] = spec
            if isinstance(tool, BaseTool):
                self._tools[spec.name] = tool
        if not self._specs:
            raise RegistryError("registry is empty")

    @property
    def specs(self) -> list[ToolSpec]:
        return list(self._specs.values())

    def __contains__(self, name):
        return name in self._specs

    def spec(self, name: str) -> ToolSpec:
        return self._specs[name]

    def tool(self, name: str) -> BaseTool:
        return self._tools[name]

    def execute(self, call: ToolCall) -> ToolResult:
        tool = self._tools.get(call.tool_name)
        if tool is None:
            return ToolResult.failure(f"no executor bound for {call.tool_name!r}")
        return tool.execute(call.arguments)


def detect_tool_call_trigger(stream: Sequence[int], vocab: Vocabulary):
    """Index of the first TOOL_CLOSE closing an open call, or None."""
    open_seen = False
    for i, tok in enumerate(stream):
        if tok == vocab.TOOL_OPEN:
            open_seen = True
        elif tok == vocab.TOOL_CLOSE:
            if open_seen:
                return i
    return None


def wrap_tool_call(call: ToolCall, vocab: Vocabulary) -> list[int]:
    return [vocab.TOOL_OPEN, vocab.index(call.tool_name), *vocab.encode(call.arguments), vocab.TOOL_CLOSE]


def _parse_span(inner, registry, span):
    vocab = registry.vocab
    if not inner:
        raise ParseError(ParseError.EMPTY_SPAN, span, "no tool name between markers")
    name = vocab.symbols[inner[0]]
    if name not in registry:
        raise ParseError(ParseError.UNKNOWN_TOOL, span, f"{name!r} is not a registered tool")
    spec = registry.spec(name)
    args = inner[1:]
    if any(t in vocab.control_tokens for t in args):
        raise ParseError(ParseError.ARITY, span, "control token inside argument list")
    if not spec.min_args <= len(args) <= spec.max_args:
        raise ParseError(
            ParseError.ARITY,
            span,
            f"{name} takes {spec.min_args}..{spec.max_args} arguments, got {len(args)}",
        )
    return ToolCall(name, tuple(vocab.symbols[t] for t in args))


def extract_tool_calls(segment: Sequence[int], registry: ToolRegistry) -> list[ToolCall]:
    """Parse every ``TOOL_OPEN ... TOOL_CLOSE`` span of one agent turn.

    Raises
    ------
    ParseError
        On the first malformed span: unmatched/nested markers, an empty span,
        an unregistered tool name, or an argument count outside the tool's
        parameter arity.
    """
    vocab = registry.vocab
    segment = [int(t) for t in segment]
    calls = []
    start = None
    for i, tok in enumerate(segment):
        if tok == vocab.TOOL_OPEN:
            if start is not None:
                raise ParseError(ParseError.UNMATCHED, segment[start:i + 1], "nested TOOL_OPEN")
            start = i
        elif tok == vocab.TOOL_CLOSE:
            if start is None:
                raise ParseError(ParseError.UNMATCHED, segment[:i + 1], "TOOL_CLOSE without TOOL_OPEN")
            span = segment[start:i + 1]
            calls.append(_parse_span(segment[start + 1:i], registry, span))
            start = None
    if start is not None:
        raise ParseError(ParseError.UNMATCHED, segment[start:], "unterminated tool call")
    return calls


def scan_answer_spans(segment: Sequence[int], vocab: Vocabulary):
    """Well-formed ``ANS_OPEN x+ ANS_CLOSE`` contents and a malformed-marker count."""
    spans = []
    bad = 0
    start = None
    control = vocab.control_tokens
    for i, tok in enumerate(segment):
        if tok == vocab.ANS_OPEN:
            if start is not None:
                bad += 1
            start = i
        elif tok == vocab.ANS_CLOSE:
            if start is None:
                bad += 1
                continue
            inner = list(segment[start + 1:i])
            if inner and not any(t in control for t in inner):
                spans.append(inner)
            else:
                bad += 1
            start = None
    if start is not None:
        bad += 1
    return spans, bad


def format_tool_response(result: ToolResult, vocab: Vocabulary) -> list[int]:
    """OBS_OPEN, then subject/relation/object per fact, then OBS_CLOSE."""
    out = [vocab.OBS_OPEN]
    if result.success:
        for fact in result.payload:
            for symbol in fact:
                if symbol not in vocab:
                    raise EncodingError(f"fact symbol {symbol!r} is not in the vocabulary")
                out.append(vocab.index(symbol))
    out.append(vocab.OBS_CLOSE)
    return out


def render_tool_manifest(specs: Sequence[ToolSpec]) -> str:
    if not specs:
        raise RegistryError("cannot render a manifest for an empty registry")
    names = [s.name for s in specs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise RegistryError(f"duplicate tool names: {dupes}")
    blocks = []
    for spec in specs:
        blocks.append(
            f"## {spec.name}\n{spec.description}\n\nparameters:\n"
            + json.dumps(spec.json_schema(), indent=2)
        )
    return "# Tools\n\n" + "\n\n".join(blocks) + "\n"


def load_tool_specs(path) -> list[ToolSpec]:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise RegistryError("tool registry file must hold a JSON list")
    return [ToolSpec.from_dict(d) for d in data]


def save_tool_specs(specs: Sequence[ToolSpec], path) -> None:
    with open(path, "w") as fh:
        json.dump([s.to_dict() for s in specs], fh, indent=2)
        fh.write("\n")
