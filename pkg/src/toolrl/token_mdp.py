"""Tokens, agent states, turns and trajectories of the multi-turn agent MDP.

A state is the prompt followed by completed turns (agent actions plus the
environment's feedback) and the partial, in-progress turn. Appending an
agent token is a deterministic generative transition; closing a turn with
feedback is an environmental transition.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidToken, LayoutError, ProtocolViolation

RESERVED_NAMES = (
    "TOOL_OPEN",
    "TOOL_CLOSE",
    "OBS_OPEN",
    "OBS_CLOSE",
    "ANS_OPEN",
    "ANS_CLOSE",
    "EOS",
    "PAD",
)

DEFAULT_RESERVED_SYMBOLS = {
    "TOOL_OPEN": "<tool>",
    "TOOL_CLOSE": "</tool>",
    "OBS_OPEN": "<obs>",
    "OBS_CLOSE": "</obs>",
    "ANS_OPEN": "<ans>",
    "ANS_CLOSE": "</ans>",
    "EOS": "<eos>",
    "PAD": "<pad>",
}


class TransitionKind(str, enum.Enum):
    GENERATIVE = "generative"
    ENVIRONMENTAL = "environmental"


class TerminationReason(str, enum.Enum):
    ANSWER_EMITTED = "answer_emitted"
    EOS = "eos"
    MAX_TURNS = "max_turns"
    MAX_TOKENS = "max_tokens"
    PARSE_FAILURE = "parse_failure"


class Vocabulary:
    """Ordered set of atomic token symbols with designated control tokens.

    Parameters
    ----------
    symbols : sequence of str
        Every symbol, in index order.
    reserved : mapping of str to int
        Index of each control token named in ``RESERVED_NAMES``.
    """

    def __init__(self, symbols: Sequence[str], reserved: dict[str, int]):
        symbols = tuple(symbols)
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be distinct")
        if len(symbols) < len(RESERVED_NAMES):
            raise ValueError(f"vocabulary needs at least {len(RESERVED_NAMES)} symbols")
        missing = set(RESERVED_NAMES) - set(reserved)
        if missing:
            raise ValueError(f"missing reserved tokens: {sorted(missing)}")
        idx = [reserved[name] for name in RESERVED_NAMES]
        if len(set(idx)) != len(idx):
            raise ValueError("reserved indices must be mutually distinct")
        if any(not 0 <= i < len(symbols) for i in idx):
            raise ValueError("reserved index out of range")
        self.symbols = symbols
        self.reserved = {name: int(reserved[name]) for name in RESERVED_NAMES}
        self._index = {s: i for i, s in enumerate(symbols)}
        for name, i in self.reserved.items():
            setattr(self, name, i)

    @classmethod
    def build(cls, extra_symbols: Iterable[str] = ()) -> "Vocabulary":
        """Reserved control tokens first (indices 0-7), then ``extra_symbols``."""
        symbols = [DEFAULT_RESERVED_SYMBOLS[name] for name in RESERVED_NAMES]
        symbols.extend(extra_symbols)
        return cls(symbols, {name: i for i, name in enumerate(RESERVED_NAMES)})

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self._index

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.symbols == other.symbols
            and self.reserved == other.reserved
        )

    def __hash__(self):
        return hash((self.symbols, tuple(self.reserved.items())))

    def index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise InvalidToken(f"unknown symbol {symbol!r}") from None

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.index(s) for s in symbols]

    def decode(self, tokens: Iterable[int]) -> list[str]:
        return [self.symbols[self.check(t)] for t in tokens]

    def check(self, token) -> int:
        t = int(token)
        if not 0 <= t < len(self.symbols):
            raise InvalidToken(f"token index {t} outside vocabulary of size {len(self)}")
        return t

    @property
    def control_tokens(self) -> frozenset:
        return frozenset(self.reserved.values())


@dataclass(frozen=True)
class Turn:
    action_tokens: tuple
    feedback_tokens: tuple = ()

    def __post_init__(self):
        if not self.action_tokens:
            raise ProtocolViolation("a completed turn needs at least one action token")


@dataclass(frozen=True)
class AgentState:
    prompt: tuple = ()
    completed_turns: tuple = ()
    partial: tuple = ()
    vocab_size: int | None = None


def append_action_token(state: AgentState, token: int, vocab_size: int | None = None) -> AgentState:
    """Generative transition: ``partial <- partial + [token]``."""
    size = vocab_size if vocab_size is not None else state.vocab_size
    token = int(token)
    if token < 0 or (size is not None and token >= size):
        raise InvalidToken(f"token index {token} outside vocabulary of size {size}")
    return AgentState(state.prompt, state.completed_turns, state.partial + (token,), state.vocab_size)


def append_environment_feedback(state: AgentState, feedback: Sequence[int]) -> AgentState:
    """Environmental transition: close the partial turn with ``feedback``.

    An empty ``feedback`` still closes the turn (e.g. a final answer turn).
    """
    if not state.partial:
        raise ProtocolViolation("cannot attach feedback before the turn has any action tokens")
    turn = Turn(tuple(state.partial), tuple(int(t) for t in feedback))
    return AgentState(state.prompt, state.completed_turns + (turn,), (), state.vocab_size)


def flatten(state: AgentState) -> list[int]:
    out = list(state.prompt)
    for turn in state.completed_turns:
        out.extend(turn.action_tokens)
        out.extend(turn.feedback_tokens)
    out.extend(state.partial)
    return out


@dataclass(frozen=True)
class Segment:
    """A contiguous span ``[start, stop)`` of a flat token sequence."""

    start: int
    stop: int
    kind: TransitionKind
    is_prompt: bool = False

    def __len__(self):
        return self.stop - self.start

    @property
    def is_action(self) -> bool:
        return self.kind == TransitionKind.GENERATIVE and not self.is_prompt


def state_layout(state: AgentState) -> list[Segment]:
    """Segment layout matching ``flatten(state)``."""
    layout = []
    pos = 0

    def add(n, kind, is_prompt=False):
        nonlocal pos
        if n:
            layout.append(Segment(pos, pos + n, kind, is_prompt))
            pos += n

    add(len(state.prompt), TransitionKind.ENVIRONMENTAL, True)
    for turn in state.completed_turns:
        add(len(turn.action_tokens), TransitionKind.GENERATIVE)
        add(len(turn.feedback_tokens), TransitionKind.ENVIRONMENTAL)
    add(len(state.partial), TransitionKind.GENERATIVE)
    return layout


def compute_action_mask(layout: Sequence[Segment], length: int | None = None) -> np.ndarray:
    """Per-token action mask: 1 on agent-generated segments, 0 elsewhere.

    ``layout`` must tile ``[0, length)`` exactly, in order.
    """
    pos = 0
    bits = []
    for seg in layout:
        if seg.start != pos:
            kind = "overlap" if seg.start < pos else "gap"
            raise LayoutError(f"{kind} at position {pos}: next segment starts at {seg.start}")
        if seg.stop < seg.start:
            raise LayoutError(f"segment [{seg.start}, {seg.stop}) has negative length")
        bits.extend([1 if seg.is_action else 0] * len(seg))
        pos = seg.stop
    if length is not None and pos != length:
        raise LayoutError(f"layout covers {pos} tokens, sequence has {length}")
    return np.asarray(bits, dtype=np.int8)


def _frozen(a, dtype):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Flat token sequence with parallel per-token arrays.

    ``old_logprobs`` is meaningful only where ``action_mask == 1``; values are
    recorded at every position so the advantage-mask ablation can bootstrap
    through environment tokens.
    """

    tokens: np.ndarray
    action_mask: np.ndarray
    rewards: np.ndarray
    old_logprobs: np.ndarray
    values: np.ndarray
    terminated: bool
    termination_reason: TerminationReason | None
    layout: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "tokens", _frozen(self.tokens, np.int64))
        object.__setattr__(self, "action_mask", _frozen(self.action_mask, np.int8))
        object.__setattr__(self, "rewards", _frozen(self.rewards, np.float64))
        object.__setattr__(self, "old_logprobs", _frozen(self.old_logprobs, np.float64))
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        n = len(self.tokens)
        for name in ("action_mask", "rewards", "old_logprobs", "values"):
            if len(getattr(self, name)) != n:
                raise LayoutError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if np.any(self.rewards[self.action_mask == 0] != 0):
            raise LayoutError("rewards must be zero at non-action positions")
        if self.layout:
            mask = compute_action_mask(self.layout, n)
            if not np.array_equal(mask, self.action_mask):
                raise LayoutError("action mask disagrees with segment layout")

    def __len__(self):
        return len(self.tokens)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def action_positions(self) -> np.ndarray:
        return np.flatnonzero(self.action_mask)

    def turns(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(action tokens, feedback tokens) for each turn, from the layout."""
        out = []
        for seg in self.layout:
            if seg.is_prompt:
                continue
            toks = self.tokens[seg.start:seg.stop]
            if seg.is_action:
                out.append([toks, self.tokens[:0]])
            elif out:
                out[-1][1] = toks
        return [tuple(t) for t in out]

    def to_record(self, vocab: Vocabulary) -> dict:
        return {
            "tokens": vocab.decode(self.tokens),
            "mask": self.action_mask.tolist(),
            "rewards": self.rewards.tolist(),
            "old_logprobs": self.old_logprobs.tolist(),
            "values": self.values.tolist(),
            "terminated": bool(self.terminated),
            "reason": self.termination_reason.value if self.termination_reason else None,
        }


def dump_trajectories(trajectories: Iterable[Trajectory], vocab: Vocabulary, fh) -> int:
    """Write one JSON record per line; returns the number written."""
    n = 0
    for traj in trajectories:
        fh.write(json.dumps(traj.to_record(vocab)) + "\n")
        n += 1
    return n


def load_trajectory_records(fh) -> list[dict]:
    return [json.loads(line) for line in fh if line.strip()]
