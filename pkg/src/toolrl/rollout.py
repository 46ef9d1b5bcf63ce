"""Multi-turn generation: drive the policy token by token against a tool environment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError
from .hopqa import Instance, derive_seed, make_env
from .policy import PolicyOutput, logprob, sample_token
from .token_mdp import Segment, TransitionKind, Trajectory, Vocabulary
from .tool_env import EnvConfig, ToolEnv

Policy = Callable[[Sequence[int]], PolicyOutput]


@dataclass(frozen=True)
class RolloutRecord:
    trajectory: Trajectory
    episode_reward: float
    instance_id: object = None
    seed: int | None = None
    n_turns: int = 0
    parse_failure: bool = False
    process_rewards: tuple = field(default=())
    outcome_reward: float = 0.0


def _checked(out: PolicyOutput) -> PolicyOutput:
    if not (np.all(np.isfinite(out.logits)) and np.isfinite(out.value)):
        raise NumericalError("policy produced non-finite output")
    return out


def rollout_episode(
    policy: Policy,
    env: ToolEnv,
    prompt: Sequence[int],
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
    instance_id=None,
    seed=None,
) -> RolloutRecord:
    """Run one episode to termination and assemble its trajectory.

    A turn ends at the first of: a completed tool call, ANS_CLOSE, EOS, the
    per-turn token limit, or the total token budget. The turn is handed to
    ``env.step``; feedback tokens are spliced in with mask 0. Process rewards
    land on the turn's last token (the TOOL_CLOSE of a call) and the outcome
    reward on the final agent token.
    """
    vocab: Vocabulary = env.vocab
    limits = env.limits
    rng = rng if rng is not None else np.random.default_rng(seed)

    tokens = [int(t) for t in prompt]
    mask = [0] * len(tokens)
    old_lp = [0.0] * len(tokens)
    rewards = [0.0] * len(tokens)
    values = [_checked(policy(tokens[:i])).value for i in range(len(tokens))]
    layout = [Segment(0, len(tokens), TransitionKind.ENVIRONMENTAL, True)] if tokens else []

    turn: list[int] = []
    turn_start = len(tokens)
    n_turns = 0
    parse_failure = False
    process = []
    outcome = 0.0
    reason = None
    while True:
        out = _checked(policy(tokens))
        tok = sample_token(out.logits, temperature, rng, greedy)
        tokens.append(tok)
        mask.append(1)
        old_lp.append(logprob(out.logits, tok))
        values.append(float(out.value))
        rewards.append(0.0)
        turn.append(tok)

        boundary = (
            (tok == vocab.TOOL_CLOSE and vocab.TOOL_OPEN in turn)
            or tok == vocab.ANS_CLOSE
            or tok == vocab.EOS
            or len(turn) >= limits.max_tokens_per_turn
            or env.state.total_tokens + len(turn) >= limits.max_total_tokens
        )
        if not boundary:
            continue

        res = env.step(turn)
        n_turns += 1
        parse_failure |= not res.info.get("parse_ok", True)
        layout.append(Segment(turn_start, len(tokens), TransitionKind.GENERATIVE))
        if res.process_reward:
            rewards[-1] += res.process_reward
            process.append(res.process_reward)
        if res.done:
            rewards[-1] += res.outcome_reward
            outcome = res.outcome_reward
            reason = res.termination_reason
            break
        if res.feedback_tokens:
            start = len(tokens)
            for f in res.feedback_tokens:
                values.append(float(_checked(policy(tokens)).value))
                tokens.append(int(f))
                mask.append(0)
                old_lp.append(0.0)
                rewards.append(0.0)
            layout.append(Segment(start, len(tokens), TransitionKind.ENVIRONMENTAL))
        turn = []
        turn_start = len(tokens)

    traj = Trajectory(tokens, mask, rewards, old_lp, values, True, reason, tuple(layout))
    return RolloutRecord(
        traj,
        traj.total_reward,
        instance_id,
        seed,
        n_turns,
        parse_failure,
        tuple(process),
        outcome,
    )


def run_instance(
    policy: Policy,
    instance: Instance,
    vocab: Vocabulary,
    env_config: EnvConfig | None = None,
    temperature: float = 1.0,
    seed: int = 0,
    greedy: bool = False,
    instance_id=None,
) -> RolloutRecord:
    """One episode on a hop-QA instance; env and sampler both seeded by ``seed``."""
    env = make_env(instance, vocab, env_config, seed=seed)
    return rollout_episode(
        policy,
        env,
        instance.question_tokens,
        temperature,
        np.random.default_rng(seed),
        greedy,
        instance_id,
        seed,
    )


def rollout_group(
    policy: Policy,
    instance: Instance,
    group_size: int,
    vocab: Vocabulary,
    env_config: EnvConfig | None = None,
    temperature: float = 1.0,
    base_seed: int = 0,
    greedy: bool = False,
    instance_id=None,
) -> list[RolloutRecord]:
    """``group_size`` independent episodes on one instance.

    Episode ``i`` is seeded with ``derive_seed(base_seed, i)``.
    """
    if group_size < 1:
        raise ValueError("group_size must be at least 1")
    return [
        run_instance(
            policy,
            instance,
            vocab,
            env_config,
            temperature,
            derive_seed(base_seed, i),
            greedy,
            instance_id,
        )
        for i in range(group_size)
    ]
