"""Synthetic multi-hop question answering over a small knowledge base.

A question ``[ASK, r_k, ..., r_1, e_0]`` asks for the entity reached by
applying relations ``r_1`` .. ``r_k`` starting from ``e_0``. The agent has a
single ``search`` tool that looks facts up by subject (and optionally
relation), returning at most ``k`` facts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import GenerationError, ParseError
from .policy import PolicyOutput
from .token_mdp import Trajectory, Vocabulary
from .tool_env import EnvConfig, ToolEnv
from .tool_protocol import (
    BaseTool,
    ToolParam,
    ToolRegistry,
    ToolResult,
    ToolSpec,
    extract_tool_calls,
    scan_answer_spans,
)

ASK = "<ask>"
SEARCH = "search"
MAX_RETRIES = 1000


@dataclass(frozen=True)
class HopQAConfig:
    hops: int = 1
    n_entities: int = 30
    n_relations: int = 8
    n_distractors: int = 4
    distractor_subject_prob: float = 0.5


def entity_symbols(n):
    return [f"e{i}" for i in range(n)]


def relation_symbols(n):
    return [f"r{i}" for i in range(n)]


@lru_cache(maxsize=None)
def make_vocab(n_entities: int, n_relations: int) -> Vocabulary:
    return Vocabulary.build([ASK, SEARCH, *entity_symbols(n_entities), *relation_symbols(n_relations)])


def vocab_for(cfg: HopQAConfig) -> Vocabulary:
    return make_vocab(cfg.n_entities, cfg.n_relations)


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str

    def __iter__(self):
        return iter((self.subject, self.relation, self.object))


class KnowledgeBase:
    """Facts in insertion order plus a (subject, relation) -> objects index."""

    def __init__(self, facts: Sequence[Fact], entities=(), relations=()):
        self.facts = tuple(Fact(*f) for f in facts)
        self.entities = frozenset(entities) or frozenset(
            s for f in self.facts for s in (f.subject, f.object)
        )
        self.relations = frozenset(relations) or frozenset(f.relation for f in self.facts)
        index = {}
        by_subject = {}
        for i, f in enumerate(self.facts):
            index.setdefault((f.subject, f.relation), []).append(f.object)
            by_subject.setdefault(f.subject, []).append(i)
        self.index = {k: tuple(v) for k, v in index.items()}
        self._by_subject = {k: tuple(v) for k, v in by_subject.items()}

    def __len__(self):
        return len(self.facts)

    def lookup(self, subject, relation=None) -> list[Fact]:
        rows = self._by_subject.get(subject, ())
        facts = [self.facts[i] for i in rows]
        if relation is not None:
            facts = [f for f in facts if f.relation == relation]
        return facts


@dataclass(frozen=True)
class Instance:
    question_tokens: tuple
    gold_answer: str
    chain: tuple
    kb: KnowledgeBase
    seed: int | None = None

    @property
    def start_entity(self) -> str:
        return self.chain[0].subject

    def to_record(self, vocab: Vocabulary) -> dict:
        return {
            "question": vocab.decode(self.question_tokens),
            "gold": self.gold_answer,
            "chain": [list(f) for f in self.chain],
            "facts": [list(f) for f in self.kb.facts],
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, rec: dict, cfg: HopQAConfig) -> "Instance":
        vocab = vocab_for(cfg)
        kb = KnowledgeBase(
            [Fact(*f) for f in rec["facts"]],
            entity_symbols(cfg.n_entities),
            relation_symbols(cfg.n_relations),
        )
        return cls(
            tuple(vocab.encode(rec["question"])),
            rec["gold"],
            tuple(Fact(*f) for f in rec["chain"]),
            kb,
            rec.get("seed"),
        )


def generate_instance(rng: np.random.Generator, cfg: HopQAConfig, seed=None) -> Instance:
    """Sample a gold chain plus collision-checked distractor facts."""
    if cfg.hops < 1:
        raise GenerationError("hops must be at least 1")
    if cfg.n_entities < cfg.hops + 1:
        raise GenerationError(f"{cfg.hops} hops need {cfg.hops + 1} distinct entities, have {cfg.n_entities}")
    if cfg.n_relations < cfg.hops:
        raise GenerationError(f"{cfg.hops} hops need {cfg.hops} distinct relations, have {cfg.n_relations}")
    ents = entity_symbols(cfg.n_entities)
    rels = relation_symbols(cfg.n_relations)
    vocab = vocab_for(cfg)

    path = [ents[i] for i in rng.choice(cfg.n_entities, size=cfg.hops + 1, replace=False)]
    path_rels = [rels[i] for i in rng.choice(cfg.n_relations, size=cfg.hops, replace=False)]
    chain = [Fact(path[k], path_rels[k], path[k + 1]) for k in range(cfg.hops)]

    # (subject, relation) pairs that must stay unique so the question has one answer
    reserved = {(f.subject, f.relation) for f in chain}
    seen = set(chain)
    distractors = []
    tries = 0
    while len(distractors) < cfg.n_distractors:
        tries += 1
        if tries > MAX_RETRIES * max(1, cfg.n_distractors):
            raise GenerationError(
                f"could not place {cfg.n_distractors} distractors without collisions"
            )
        if rng.random() < cfg.distractor_subject_prob:
            subj = path[int(rng.integers(cfg.hops + 1))]
        else:
            subj = ents[int(rng.integers(cfg.n_entities))]
        rel = rels[int(rng.integers(cfg.n_relations))]
        obj = ents[int(rng.integers(cfg.n_entities))]
        fact = Fact(subj, rel, obj)
        if obj == subj or (subj, rel) in reserved or fact in seen:
            continue
        seen.add(fact)
        distractors.append(fact)

    facts = chain + distractors
    order = rng.permutation(len(facts))
    kb = KnowledgeBase([facts[i] for i in order], ents, rels)
    question = [vocab.index(ASK), *vocab.encode(reversed(path_rels)), vocab.index(path[0])]
    return Instance(tuple(question), path[-1], tuple(chain), kb, seed)


TRAIN_NAMESPACE = 0
EVAL_NAMESPACE = 1


def derive_seed(*keys: int) -> int:
    """Stable 32-bit child seed for a tuple of non-negative integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint32)[0])


def instance_stream(seed: int, cfg: HopQAConfig, namespace: int = TRAIN_NAMESPACE):
    """Infinite deterministic stream; instance ``i`` uses ``derive_seed(namespace, seed, i)``.

    Training and evaluation draw from different namespaces so their seed
    ranges never overlap.
    """
    i = 0
    while True:
        s = derive_seed(namespace, seed, i)
        yield generate_instance(np.random.default_rng(s), cfg, seed=s)
        i += 1


def make_instances(seed: int, n: int, cfg: HopQAConfig, namespace: int = EVAL_NAMESPACE) -> list[Instance]:
    stream = instance_stream(seed, cfg, namespace)
    return [next(stream) for _ in range(n)]


def chain_walk(instance: Instance) -> str | None:
    """Follow the question's relations through the KB index; None if stuck."""
    ent = instance.start_entity
    for fact in instance.chain:
        objs = instance.kb.index.get((ent, fact.relation), ())
        if len(objs) != 1:
            return None
        ent = objs[0]
    return ent


def search_tool(kb: KnowledgeBase, args: Sequence[str], k: int = 5) -> ToolResult:
    """Facts with subject ``args[0]`` (and relation ``args[1]`` if given)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    args = list(args)
    if not 1 <= len(args) <= 2:
        return ToolResult.failure("search takes an entity and an optional relation")
    if args[0] not in kb.entities:
        return ToolResult.failure(f"{args[0]!r} is not an entity")
    if len(args) == 2 and args[1] not in kb.relations:
        return ToolResult.failure(f"{args[1]!r} is not a relation")
    hits = kb.lookup(*args)[:k]
    if not hits:
        return ToolResult.failure("no matching facts")
    return ToolResult(tuple(tuple(f) for f in hits), True)


SEARCH_SPEC = ToolSpec(
    SEARCH,
    "Look up knowledge-base facts by subject entity, optionally restricted to one relation. "
    "Returns up to five (subject, relation, object) facts in storage order.",
    (
        ToolParam("entity", "entity", True, "subject entity to look up"),
        ToolParam("relation", "relation", False, "only return facts with this relation"),
    ),
)


class SearchTool(BaseTool):
    spec = SEARCH_SPEC

    def __init__(self, kb: KnowledgeBase, k: int = 5):
        self.kb = kb
        self.k = k

    def execute(self, arguments):
        return search_tool(self.kb, arguments, self.k)


def make_registry(instance: Instance, vocab: Vocabulary, k: int = 5) -> ToolRegistry:
    return ToolRegistry([SearchTool(instance.kb, k)], vocab)


def make_env(instance: Instance, vocab: Vocabulary, config: EnvConfig = None, seed=None) -> ToolEnv:
    """Environment for one episode on ``instance`` scored by the format-gated exact-match reward."""
    cfg = config or EnvConfig()
    registry = make_registry(instance, vocab, cfg.top_k)
    return ToolEnv(
        instance,
        registry,
        lambda transcript: outcome_reward(transcript, instance.gold_answer, registry),
        cfg,
        seed,
    )


def exact_match(pred: Sequence, gold) -> int:
    return int(list(pred) == [gold])


def _action_segments(transcript) -> list[list[int]]:
    if isinstance(transcript, Trajectory):
        return [list(a) for a, _ in transcript.turns()]
    return [list(seg) for seg in transcript]


def extract_answer(transcript, vocab: Vocabulary):
    """Tokens of the first well-formed answer span, or None."""
    for seg in _action_segments(transcript):
        spans, _ = scan_answer_spans(seg, vocab)
        if spans:
            return spans[0]
    return None


def format_scores(transcript, registry: ToolRegistry) -> tuple[int, int]:
    """(answer-format bit, tool-format bit) over all agent action segments."""
    vocab = registry.vocab
    n_spans = 0
    n_bad = 0
    tools_ok = 1
    for seg in _action_segments(transcript):
        spans, bad = scan_answer_spans(seg, vocab)
        n_spans += len(spans)
        n_bad += bad
        try:
            extract_tool_calls(seg, registry)
        except ParseError:
            tools_ok = 0
    return int(n_spans == 1 and n_bad == 0), tools_ok


def outcome_reward(transcript, gold: str, registry: ToolRegistry) -> float:
    """Exact match gated by formatting.

    Returns EM when both format bits hold, otherwise ``format - 1`` where
    format is the mean of the two bits, so the range is {-1, -0.5, 0, 1}.
    """
    fmt_a, fmt_t = format_scores(transcript, registry)
    r_format = (fmt_a + fmt_t) / 2
    if r_format < 1:
        return r_format - 1.0
    pred = extract_answer(transcript, registry.vocab)
    return float(exact_match(registry.vocab.decode(pred), gold))


class GoldChainAgent:
    """Scripted agent that solves any instance by reading its own context.

    It searches ``(entity, relation)`` for each hop, reads the object out of
    the observation, and finally answers. Exposes the same call signature as
    :class:`toolrl.policy.MLPPolicy` so it can drive :func:`rollout_episode`.
    """

    def __init__(self, vocab: Vocabulary, margin: float = 100.0):
        self.vocab = vocab
        self.margin = margin
        self._ask = vocab.index(ASK)
        self._search = vocab.index(SEARCH)

    def plan(self, tokens: Sequence[int]) -> list[int]:
        v = self.vocab
        tokens = list(tokens)
        if self._ask not in tokens:
            return []
        q = tokens.index(self._ask)
        rels = []
        i = q + 1
        while i < len(tokens) and v.symbols[tokens[i]].startswith("r"):
            rels.append(tokens[i])
            i += 1
        if i >= len(tokens):
            return []
        entity = tokens[i]
        rels.reverse()
        hop = 0
        last_obs = i
        for j in range(i + 1, len(tokens)):
            if tokens[j] == v.OBS_CLOSE:
                last_obs = j
                obs_start = max(k for k in range(j) if tokens[k] == v.OBS_OPEN)
                facts = tokens[obs_start + 1:j]
                for f in range(0, len(facts) - 2, 3):
                    s, r, o = facts[f:f + 3]
                    if s == entity and hop < len(rels) and r == rels[hop]:
                        entity = o
                        hop += 1
                        break
        if hop < len(rels):
            turn = [v.TOOL_OPEN, self._search, entity, rels[hop], v.TOOL_CLOSE]
        else:
            turn = [v.ANS_OPEN, entity, v.ANS_CLOSE]
        emitted = len(tokens) - last_obs - 1
        return turn[emitted:] or [v.EOS]

    def __call__(self, tokens: Sequence[int]) -> PolicyOutput:
        logits = np.zeros(len(self.vocab))
        plan = self.plan(tokens)
        if plan:
            logits[plan[0]] = self.margin
        return PolicyOutput(logits, 0.0)


class FormatPriorAgent:
    """Stochastic agent that knows the call syntax but not the task.

    Each turn opens a search call with probability ``tool_prob`` and an
    answer span otherwise. Every argument, and the answer, is copied
    uniformly from the symbols of the right kind already in context with
    probability ``copy_prob`` and drawn uniformly from the whole range
    otherwise. It never consults the knowledge base or the relation order,
    so it stands in for a generic pretrained prior rather than a solver.
    """

    def __init__(self, vocab: Vocabulary, tool_prob: float = 0.4, copy_prob: float = 0.8, floor: float = -30.0):
        if not (0 <= tool_prob <= 1 and 0 <= copy_prob <= 1):
            raise ValueError("tool_prob and copy_prob must lie in [0, 1]")
        self.vocab = vocab
        self.tool_prob = tool_prob
        self.copy_prob = copy_prob
        self.floor = floor
        self._search = vocab.index(SEARCH)
        self._ask = vocab.index(ASK)
        self._entities = [i for i, s in enumerate(vocab.symbols) if s.startswith("e") and s[1:].isdigit()]
        self._relations = [i for i, s in enumerate(vocab.symbols) if s.startswith("r") and s[1:].isdigit()]

    def _mixture(self, pool, context):
        seen = sorted(set(context) & set(pool))
        dist = dict.fromkeys(pool, (1.0 if not seen else 1.0 - self.copy_prob) / len(pool))
        for t in seen:
            dist[t] += self.copy_prob / len(seen)
        return dist

    def distribution(self, tokens: Sequence[int]) -> dict:
        v = self.vocab
        tokens = list(tokens)
        if self._ask not in tokens:
            return {}
        last = tokens[-1]
        if last == v.TOOL_OPEN:
            return {self._search: 1.0}
        if last == self._search:
            return self._mixture(self._entities, tokens)
        if len(tokens) >= 2 and tokens[-2] == self._search:
            return self._mixture(self._relations, tokens)
        if len(tokens) >= 3 and tokens[-3] == self._search:
            return {v.TOOL_CLOSE: 1.0}
        if last == v.ANS_OPEN:
            return self._mixture(self._entities, tokens)
        if len(tokens) >= 2 and tokens[-2] == v.ANS_OPEN:
            return {v.ANS_CLOSE: 1.0}
        return {v.TOOL_OPEN: self.tool_prob, v.ANS_OPEN: 1.0 - self.tool_prob}

    def __call__(self, tokens: Sequence[int]) -> PolicyOutput:
        dist = self.distribution(tokens)
        if not dist:
            return PolicyOutput(np.zeros(len(self.vocab)), 0.0)
        logits = np.full(len(self.vocab), self.floor)
        for tok, p in dist.items():
            if p > 0:
                logits[tok] = np.log(p)
        return PolicyOutput(logits, 0.0)


def save_instances(instances: Sequence[Instance], cfg: HopQAConfig, path) -> None:
    vocab = vocab_for(cfg)
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(vocab)) + "\n")


def load_instances(path, cfg: HopQAConfig) -> list[Instance]:
    with open(path) as fh:
        return [Instance.from_record(json.loads(line), cfg) for line in fh if line.strip()]


def config_dict(cfg: HopQAConfig) -> dict:
    return asdict(cfg)
