"""Environment wrapper that turns agent turns into feedback, rewards and termination."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ProtocolViolation
from .token_mdp import TerminationReason
from .tool_protocol import (
    ToolCall,
    ToolRegistry,
    ToolResult,
    detect_tool_call_trigger,
    extract_tool_calls,
    format_tool_response,
    scan_answer_spans,
)


@dataclass(frozen=True)
class Limits:
    max_turns: int = 4
    max_tokens_per_turn: int = 16
    max_total_tokens: int = 96

    def __post_init__(self):
        for name in ("max_turns", "max_tokens_per_turn", "max_total_tokens"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class EnvConfig:
    limits: Limits = field(default_factory=Limits)
    process_reward: bool = False
    rho: float = 0.1
    top_k: int = 5
    tool_failure_prob: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "limits" in d:
            d["limits"] = Limits(**d["limits"])
        return cls(**d)


@dataclass
class EnvState:
    instance: object
    turn_count: int = 0
    total_tokens: int = 0
    done: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


@dataclass(frozen=True)
class StepOutcome:
    feedback_tokens: tuple
    process_reward: float
    outcome_reward: float
    done: bool
    termination_reason: TerminationReason | None = None
    info: dict = field(default_factory=dict)


class ToolEnv:
    """Multi-turn tool environment for one episode.

    Parameters
    ----------
    instance
        Task instance handle, kept on the state for reward functions.
    registry : ToolRegistry
        Tools available to the agent, bound to the vocabulary.
    reward_fn : callable
        ``reward_fn(action_segments) -> float``; evaluated once when the
        episode ends, over every agent action segment so far.
    config : EnvConfig
    seed : int, optional
        Seeds the environment's random source (tool flakiness); defaults to
        ``config.seed``.
    """

    def __init__(self, instance, registry: ToolRegistry, reward_fn: Callable, config: EnvConfig = None, seed=None):
        self.config = config or EnvConfig()
        self.registry = registry
        self.vocab = registry.vocab
        self.reward_fn = reward_fn
        self.state = EnvState(instance, rng=np.random.default_rng(self.config.seed if seed is None else seed))
        self.transcript: list[list[int]] = []

    @property
    def limits(self) -> Limits:
        return self.config.limits

    @property
    def done(self) -> bool:
        return self.state.done

    def should_stop(self, agent_output: Sequence[int]):
        """``(stop, reason)``; an answer or EOS wins over the limit checks."""
        v = self.vocab
        spans, _ = scan_answer_spans(agent_output, v)
        if spans:
            return True, TerminationReason.ANSWER_EMITTED
        if v.EOS in agent_output:
            return True, TerminationReason.EOS
        if v.ANS_CLOSE in agent_output:
            return True, TerminationReason.PARSE_FAILURE
        return self._limit_stop()

    def _limit_stop(self):
        if self.state.turn_count >= self.limits.max_turns:
            return True, TerminationReason.MAX_TURNS
        if self.state.total_tokens >= self.limits.max_total_tokens:
            return True, TerminationReason.MAX_TOKENS
        return False, None

    def process_reward(self, call, result: ToolResult | None) -> float:
        if not self.config.process_reward:
            return 0.0
        if isinstance(call, ToolCall) and result is not None and result.success and len(result.payload) >= 1:
            return float(self.config.rho)
        return 0.0

    def execute(self, call: ToolCall) -> ToolResult:
        if self.config.tool_failure_prob and self.state.rng.random() < self.config.tool_failure_prob:
            return ToolResult.failure("tool unavailable")
        return self.registry.execute(call)

    def step(self, agent_output: Sequence[int]) -> StepOutcome:
        if self.state.done:
            raise ProtocolViolation("step called on a finished episode")
        agent_output = [int(t) for t in agent_output]
        if not agent_output:
            raise ProtocolViolation("agent output must be non-empty")
        st = self.state
        st.turn_count += 1
        st.total_tokens += len(agent_output)
        self.transcript.append(agent_output)
        info = {"parse_ok": True, "tool_executed": False, "calls_ignored": 0}

        feedback = []
        r_p = 0.0
        if detect_tool_call_trigger(agent_output, self.vocab) is not None:
            call = None
            result = None
            try:
                calls = extract_tool_calls(agent_output, self.registry)
            except ParseError as err:
                info["parse_ok"] = False
                info["parse_error"] = err.kind
                call = err
                feedback = format_tool_response(ToolResult.failure(str(err)), self.vocab)
            else:
                call = calls[0]
                info["calls_ignored"] = len(calls) - 1
                result = self.execute(call)
                info["tool_executed"] = True
                info["tool_success"] = result.success
                feedback = format_tool_response(result, self.vocab)
            r_p = self.process_reward(call, result)
            st.total_tokens += len(feedback)
            stop, reason = self._limit_stop()
        else:
            try:
                extract_tool_calls(agent_output, self.registry)
            except ParseError as err:
                info["parse_ok"] = False
                info["parse_error"] = err.kind
            stop, reason = self.should_stop(agent_output)

        r_f = 0.0
        if stop:
            st.done = True
            feedback = []
            r_f = float(self.reward_fn(self.transcript))
        return StepOutcome(tuple(feedback), r_p, r_f, stop, reason, info)

