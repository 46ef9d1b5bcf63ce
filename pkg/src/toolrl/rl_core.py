"""Advantage estimators and policy/critic losses over action-masked token sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyBatchError, EmptyMaskError, GroupSizeError, NumericalError

ALGORITHMS = ("ppo", "grpo", "reinforce_pp", "reinforce_pp_baseline", "rloo")
GROUP_ALGORITHMS = ("grpo", "rloo", "reinforce_pp_baseline")


@dataclass(frozen=True)
class RLConfig:
    algorithm: str = "ppo"
    gamma: float = 1.0
    lam: float = 0.95
    clip_eps: float = 0.2
    group_size: int = 8
    norm_eps: float = 1e-8
    loss_mask_enabled: bool = True
    advantage_mask_enabled: bool = True
    whiten_advantages: bool = True
    value_coef: float = 0.5
    kl_coef: float = 0.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lam must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be positive")
        if self.uses_groups and self.group_size < 2:
            raise ConfigError(f"{self.algorithm} needs group_size >= 2")

    @property
    def uses_groups(self) -> bool:
        return self.algorithm in GROUP_ALGORITHMS

    @property
    def uses_critic(self) -> bool:
        return self.algorithm == "ppo"


@dataclass(frozen=True)
class AdvantageBatch:
    advantages: np.ndarray
    returns: np.ndarray
    defined_mask: np.ndarray


def _arr(x, name):
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values in {name}")
    return a


def _gae(rewards, values, gamma, lam):
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    next_value = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv


def masked_gae(rewards, values, mask, gamma: float, lam: float, advantage_mask_enabled: bool = True):
    """GAE over the agent's action positions.

    With the advantage mask enabled the recursion runs over the condensed
    subsequence of action positions, so environment and prompt tokens never
    enter the bootstrap; results are scattered back with zeros elsewhere.
    Disabled, the same recursion runs over every position.

    Returns
    -------
    advantages, returns : ndarray
        ``returns = advantages + values`` wherever advantages are defined.
    """
    rewards = _arr(rewards, "rewards")
    values = _arr(values, "values")
    mask = np.asarray(mask).astype(bool)
    if not (len(rewards) == len(values) == len(mask)):
        raise ValueError("rewards, values and mask must have equal length")
    if not mask.any():
        raise EmptyMaskError("mask selects no action positions")
    if not advantage_mask_enabled:
        adv = _gae(rewards, values, gamma, lam)
        return adv, adv + values
    idx = np.flatnonzero(mask)
    adv = np.zeros(len(rewards))
    ret = np.zeros(len(rewards))
    a = _gae(rewards[idx], values[idx], gamma, lam)
    adv[idx] = a
    ret[idx] = a + values[idx]
    return adv, ret


def grpo_advantages(group_rewards, norm_eps: float = 1e-8) -> np.ndarray:
    r = _arr(group_rewards, "group_rewards")
    if len(r) < 2:
        raise GroupSizeError("GRPO needs at least two rollouts per group")
    if np.ptp(r) == 0:
        return np.zeros_like(r)
    centred = r - r.mean()
    return centred / (np.sqrt(np.mean(centred * centred)) + norm_eps)


def rloo_advantages(group_rewards) -> np.ndarray:
    r = _arr(group_rewards, "group_rewards")
    g = len(r)
    if g < 2:
        raise GroupSizeError("RLOO needs at least two rollouts per group")
    # (g*r_i - sum) / (g-1) == r_i - mean(others), with one rounding fewer
    return (g * r - r.sum()) / (g - 1)


def whiten(x, mask, norm_eps: float = 1e-8) -> np.ndarray:
    """``(x - mean) / (std + eps)`` with statistics over ``mask``; zeros elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    out = np.zeros_like(x)
    if mask.any():
        sel = x[mask]
        out[mask] = (sel - sel.mean()) / (sel.std() + norm_eps)
    return out


def broadcast_scalar_advantage(traj_or_mask, scalar: float, advantage_mask_enabled: bool = True) -> np.ndarray:
    mask = getattr(traj_or_mask, "action_mask", traj_or_mask)
    mask = np.asarray(mask)
    if advantage_mask_enabled:
        return np.where(mask.astype(bool), float(scalar), 0.0)
    return np.full(len(mask), float(scalar))


def _reward_to_go(rewards, gamma):
    out = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def reinforce_pp_returns(
    trajectories: Sequence,
    gamma: float,
    use_group_baseline: bool,
    group_ids: Sequence | None = None,
    advantage_mask_enabled: bool = True,
):
    """Pre-whitening reward-to-go per trajectory and the positions it covers."""
    if len(trajectories) == 0:
        raise EmptyBatchError("no trajectories")
    if group_ids is None:
        group_ids = [0] * len(trajectories)
    baselines = {}
    if use_group_baseline:
        totals = {}
        for traj, gid in zip(trajectories, group_ids):
            totals.setdefault(gid, []).append(float(np.sum(traj.rewards)))
        baselines = {gid: float(np.mean(v)) for gid, v in totals.items()}

    raw = []
    masks = []
    for traj, gid in zip(trajectories, group_ids):
        rewards = _arr(traj.rewards, "rewards").copy()
        mask = np.asarray(traj.action_mask).astype(bool)
        if use_group_baseline and mask.any():
            rewards[np.flatnonzero(mask)[-1]] -= baselines[gid]
        if advantage_mask_enabled:
            idx = np.flatnonzero(mask)
            rtg = np.zeros(len(rewards))
            rtg[idx] = _reward_to_go(rewards[idx], gamma)
        else:
            rtg = _reward_to_go(rewards, gamma)
            mask = np.ones(len(rewards), dtype=bool)
        raw.append(rtg)
        masks.append(mask)
    return raw, masks


def reinforce_pp_advantages(
    trajectories: Sequence,
    gamma: float,
    use_group_baseline: bool,
    norm_eps: float = 1e-8,
    group_ids: Sequence | None = None,
    advantage_mask_enabled: bool = True,
) -> list[np.ndarray]:
    """Discounted reward-to-go per token, whitened across the batch.

    Each trajectory needs ``rewards`` and ``action_mask``. With
    ``use_group_baseline`` the mean total reward of the trajectory's group is
    subtracted at its last action token before the reward-to-go is taken.
    """
    raw, masks = reinforce_pp_returns(trajectories, gamma, use_group_baseline, group_ids, advantage_mask_enabled)
    white = whiten(np.concatenate(raw), np.concatenate(masks), norm_eps)
    out = []
    start = 0
    for r in raw:
        out.append(white[start:start + len(r)])
        start += len(r)
    return out


def _included(mask, loss_mask_enabled):
    mask = np.asarray(mask).astype(bool)
    return mask if loss_mask_enabled else np.ones(len(mask), dtype=bool)


def actor_loss(old_logprobs, new_logprobs, advantages, mask, clip_eps: float, loss_mask_enabled: bool = True):
    """Clipped surrogate loss averaged over included tokens.

    Returns the scalar loss and ``dloss/dnew_logprob`` per token (zero at
    excluded positions).
    """
    old = np.asarray(old_logprobs, dtype=np.float64)
    new = np.asarray(new_logprobs, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if not (len(old) == len(new) == len(adv) == len(mask)):
        raise ValueError("actor_loss inputs must have equal length")
    inc = _included(mask, loss_mask_enabled)
    n = int(inc.sum())
    if n == 0:
        raise EmptyMaskError("no positions included in the actor loss")
    o, w, a = old[inc], new[inc], adv[inc]
    ratio = np.exp(w - o)
    unclipped = ratio * a
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a
    term = np.minimum(unclipped, clipped)
    loss = -float(term.sum()) / n
    if not np.isfinite(loss):
        raise NumericalError("non-finite actor loss")
    grad = np.zeros(len(new))
    grad[inc] = np.where(unclipped <= clipped, -unclipped / n, 0.0)
    return loss, grad


def critic_loss(values_new, returns, mask):
    """Mean squared error over masked positions, with its per-token gradient."""
    v = np.asarray(values_new, dtype=np.float64)
    r = np.asarray(returns, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if not (len(v) == len(r) == len(m)):
        raise ValueError("critic_loss inputs must have equal length")
    n = int(m.sum())
    if n == 0:
        raise EmptyMaskError("no positions included in the critic loss")
    diff = v[m] - r[m]
    loss = float(np.sum(diff * diff)) / n
    if not np.isfinite(loss):
        raise NumericalError("non-finite critic loss")
    grad = np.zeros(len(v))
    grad[m] = 2.0 * diff / n
    return loss, grad


def compute_advantages(trajectories: Sequence, config: RLConfig, group_ids: Sequence | None = None) -> list[AdvantageBatch]:
    """Per-token advantages for a batch, routed by ``config.algorithm``.

    Group algorithms read ``group_ids`` (one per trajectory; trajectories
    sharing an id were sampled on the same instance) and use each
    trajectory's summed reward.
    """
    if len(trajectories) == 0:
        raise EmptyBatchError("no trajectories")
    algo = config.algorithm
    adv_on = config.advantage_mask_enabled
    if group_ids is None:
        group_ids = list(range(len(trajectories))) if not config.uses_groups else [0] * len(trajectories)

    def defined(traj):
        return np.asarray(traj.action_mask).astype(bool) if adv_on else np.ones(len(traj.tokens), dtype=bool)

    if algo == "ppo":
        out = []
        for traj in trajectories:
            a, r = masked_gae(traj.rewards, traj.values, traj.action_mask, config.gamma, config.lam, adv_on)
            out.append([a, r, defined(traj)])
        if config.whiten_advantages:
            flat = np.concatenate([o[0] for o in out])
            dm = np.concatenate([o[2] for o in out])
            white = whiten(flat, dm, config.norm_eps)
            start = 0
            for o in out:
                o[0] = white[start:start + len(o[0])]
                start += len(o[0])
        return [AdvantageBatch(a, r, d) for a, r, d in out]

    if algo in ("reinforce_pp", "reinforce_pp_baseline"):
        advs = reinforce_pp_advantages(
            trajectories,
            config.gamma,
            algo == "reinforce_pp_baseline",
            config.norm_eps,
            group_ids,
            adv_on,
        )
        return [AdvantageBatch(a, np.zeros_like(a), defined(t)) for a, t in zip(advs, trajectories)]

    groups = {}
    for i, gid in enumerate(group_ids):
        groups.setdefault(gid, []).append(i)
    scalars = np.zeros(len(trajectories))
    for members in groups.values():
        totals = [float(np.sum(trajectories[i].rewards)) for i in members]
        if algo == "grpo":
            vals = grpo_advantages(totals, config.norm_eps)
        else:
            vals = rloo_advantages(totals)
        scalars[members] = vals
    out = []
    for traj, s in zip(trajectories, scalars):
        a = broadcast_scalar_advantage(traj.action_mask, s, adv_on)
        out.append(AdvantageBatch(a, np.zeros_like(a), defined(traj)))
    return out
