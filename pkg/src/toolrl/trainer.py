"""Training loop, greedy evaluation, and the mask ablation runner."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import rl_core
from .errors import ConfigError, NumericalError
from .hopqa import (
    EVAL_NAMESPACE,
    FormatPriorAgent,
    HopQAConfig,
    Instance,
    derive_seed,
    exact_match,
    extract_answer,
    instance_stream,
    make_instances,
    vocab_for,
)
from .policy import (
    MLPPolicy,
    PolicyDims,
    PolicyParams,
    backward,
    clip_by_global_norm,
    forward_batch,
    init_params,
    log_softmax,
    make_optimizer,
    save_checkpoint,
)
from .rl_core import RLConfig
from .rollout import RolloutRecord, rollout_group, run_instance
from .tool_env import EnvConfig, Limits

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "update",
    "mean_episode_reward",
    "eval_em",
    "mean_traj_length",
    "mean_turns",
    "parse_failure_rate",
    "actor_loss",
    "critic_loss",
)


@dataclass(frozen=True)
class PolicyConfig:
    window: int = 32
    d: int = 16
    h: int = 64
    separate_critic: bool = False


@dataclass(frozen=True)
class OptimConfig:
    optimizer: str = "adam"
    lr: float = 3e-3
    grad_clip: float = 1.0
    epochs: int = 2
    minibatch_size: int = 16


@dataclass(frozen=True)
class ScheduleConfig:
    updates: int = 200
    episodes_per_update: int = 64
    eval_interval: int = 25
    eval_size: int = 100
    temperature: float = 1.0


@dataclass(frozen=True)
class WarmupConfig:
    """Behaviour cloning of :class:`FormatPriorAgent` before any RL update.

    Stands in for the syntax knowledge a pretrained language model would
    bring. ``steps=0`` disables it.
    """

    steps: int = 1000
    episodes_per_step: int = 32
    lr: float = 3e-3
    tool_prob: float = 0.4
    copy_prob: float = 0.8


@dataclass(frozen=True)
class RunConfig:
    task: HopQAConfig = field(default_factory=HopQAConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    seed: int = 0
    eval_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        s = self.schedule
        for name in ("updates", "episodes_per_update", "eval_interval", "eval_size"):
            if getattr(s, name) <= 0:
                raise ConfigError(f"schedule.{name} must be positive")
        o = self.optim
        if o.epochs <= 0 or o.minibatch_size <= 0:
            raise ConfigError("optim.epochs and optim.minibatch_size must be positive")
        if self.warmup.steps < 0 or self.warmup.episodes_per_step <= 0:
            raise ConfigError("warmup.steps must be >= 0 and warmup.episodes_per_step positive")
        if o.lr < 0:
            raise ConfigError("optim.lr must be non-negative")
        if self.rl.uses_groups and s.episodes_per_update % self.rl.group_size:
            raise ConfigError("episodes_per_update must be a multiple of group_size for group algorithms")
        object.__setattr__(self, "seeds", tuple(int(x) for x in self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kw = {}
        if "task" in d:
            kw["task"] = HopQAConfig(**d.pop("task"))
        if "env" in d:
            kw["env"] = EnvConfig.from_dict(d.pop("env"))
        for name, typ in (("rl", RLConfig), ("policy", PolicyConfig), ("optim", OptimConfig), ("schedule", ScheduleConfig), ("warmup", WarmupConfig)):
            if name in d:
                kw[name] = typ(**d.pop(name))
        if "seeds" in d:
            kw["seeds"] = tuple(d.pop("seeds"))
        kw.update(d)
        return cls(**kw)

    def replace(self, **changes) -> "RunConfig":
        """Copy with nested overrides, e.g. ``replace(rl={"algorithm": "grpo"})``."""
        kw = {}
        for key, val in changes.items():
            current = getattr(self, key)
            if isinstance(val, dict) and dataclasses.is_dataclass(current):
                if key == "env" and "limits" in val and isinstance(val["limits"], dict):
                    val = dict(val, limits=dataclasses.replace(current.limits, **val["limits"]))
                val = dataclasses.replace(current, **val)
            kw[key] = val
        return dataclasses.replace(self, **kw)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


@dataclass
class MetricsRow:
    update: int
    mean_episode_reward: float
    eval_em: float | None
    mean_traj_length: float
    mean_turns: float
    parse_failure_rate: float
    actor_loss: float
    critic_loss: float | None
    wall_clock_seconds: float = 0.0

    def csv_row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.update),
            fmt(self.mean_episode_reward),
            fmt(self.eval_em),
            fmt(self.mean_traj_length),
            fmt(self.mean_turns),
            fmt(self.parse_failure_rate),
            fmt(self.actor_loss),
            fmt(self.critic_loss),
        ]


def write_metrics(rows: Sequence[MetricsRow], path) -> None:
    """``metrics.csv`` holds only deterministic columns; timings go to ``timing.csv``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())


def write_timing(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("update", "wall_clock_seconds"))
        for r in rows:
            w.writerow((r.update, f"{r.wall_clock_seconds:.3f}"))


def make_dims(cfg: RunConfig) -> PolicyDims:
    p = cfg.policy
    return PolicyDims(len(vocab_for(cfg.task)), p.window, p.d, p.h, p.separate_critic)


def eval_instances(cfg: RunConfig) -> list[Instance]:
    return make_instances(cfg.eval_seed, cfg.schedule.eval_size, cfg.task, EVAL_NAMESPACE)


# --------------------------------------------------------------------------- evaluation


def evaluate(policy, instances: Sequence[Instance], vocab, env_config: EnvConfig | None = None):
    """Greedy decoding on every instance; returns ``(mean EM, per-instance records)``."""
    if not instances:
        raise ValueError("evaluation needs at least one instance")
    records = []
    for i, inst in enumerate(instances):
        rec = run_instance(policy, inst, vocab, env_config, 1.0, seed=i, greedy=True, instance_id=i)
        pred = extract_answer(rec.trajectory, vocab)
        pred_sym = vocab.decode(pred) if pred is not None else None
        em = exact_match(pred_sym, inst.gold_answer) if pred_sym is not None else 0
        records.append(
            {
                "instance": i,
                "gold": inst.gold_answer,
                "pred": pred_sym,
                "em": em,
                "reward": rec.episode_reward,
                "turns": rec.n_turns,
                "reason": rec.trajectory.termination_reason.value,
                "length": len(rec.trajectory),
            }
        )
    return float(np.mean([r["em"] for r in records])), records


# --------------------------------------------------------------------------- batches


def _contexts(tokens: np.ndarray, window: int, pad: int) -> np.ndarray:
    padded = np.concatenate([np.full(window, pad, dtype=np.int64), tokens])
    return np.lib.stride_tricks.sliding_window_view(padded, window)[: len(tokens)]


@dataclass
class _Prepared:
    contexts: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray
    old_logprobs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    critic_mask: np.ndarray


def _logprobs_values(params: PolicyParams, contexts, tokens):
    logits, values, _ = forward_batch(params, contexts)
    lp = log_softmax(logits)[np.arange(len(tokens)), tokens]
    return lp, values


def _prepare(records: Sequence[RolloutRecord], params: PolicyParams, cfg: RunConfig, pad: int) -> list[_Prepared]:
    rl = cfg.rl
    trajs = [r.trajectory for r in records]
    group_ids = [r.instance_id for r in records]
    advs = rl_core.compute_advantages(trajs, rl, group_ids)
    out = []
    for traj, ab in zip(trajs, advs):
        ctx = _contexts(traj.tokens, params.dims.window, pad)
        # old log-probs for every position, not only actions, so the
        # loss-mask-off ablation has a behaviour-policy ratio everywhere
        old_lp, _ = _logprobs_values(params, ctx, traj.tokens)
        act = traj.action_mask.astype(bool)
        if not np.allclose(old_lp[act], traj.old_logprobs[act], atol=1e-8):
            raise NumericalError("recomputed log-probs disagree with rollout log-probs")
        out.append(
            _Prepared(ctx, traj.tokens, act, old_lp, ab.advantages, ab.returns, ab.defined_mask)
        )
    return out


def _concat(items: Sequence[_Prepared]) -> _Prepared:
    return _Prepared(*(np.concatenate([getattr(p, f.name) for p in items]) for f in dataclasses.fields(_Prepared)))


def _dump_batch(batch: _Prepared, out_dir, update):
    if not out_dir:
        return None
    path = os.path.join(out_dir, f"diverged_batch_{update}.npz")
    np.savez(path, **asdict(batch))
    return path


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list
    records: list = field(default_factory=list)
    final_eval_em: float = 0.0
    untrained_eval_em: float = 0.0


def _update_step(params, optimizer, batch: _Prepared, cfg: RunConfig):
    rl = cfg.rl
    logits, values, _ = forward_batch(params, batch.contexts)
    new_lp = log_softmax(logits)[np.arange(len(batch.tokens)), batch.tokens]
    a_loss, g_lp = rl_core.actor_loss(
        batch.old_logprobs, new_lp, batch.advantages, batch.mask, rl.clip_eps, rl.loss_mask_enabled
    )
    if rl.kl_coef:
        inc = batch.mask if rl.loss_mask_enabled else np.ones_like(batch.mask)
        n = int(inc.sum())
        a_loss += rl.kl_coef * float(np.sum((new_lp - batch.old_logprobs)[inc])) / n
        g_lp = g_lp + np.where(inc, rl.kl_coef / n, 0.0)
    c_loss = None
    g_v = np.zeros(len(batch.tokens))
    if rl.uses_critic:
        c_loss, g_v = rl_core.critic_loss(values, batch.returns, batch.critic_mask)
        g_v = rl.value_coef * g_v
    if not np.isfinite(a_loss) or (c_loss is not None and not np.isfinite(c_loss)):
        raise NumericalError("non-finite loss")
    grads = backward(params, batch.contexts, batch.tokens, g_lp, g_v)
    if not grads.all_finite():
        raise NumericalError("non-finite gradient")
    clip_by_global_norm(grads, cfg.optim.grad_clip)
    optimizer.step(params, grads)
    return a_loss, c_loss


def warm_start(params: PolicyParams, cfg: RunConfig, vocab) -> None:
    """Clone the format prior's action tokens (cross-entropy), in place."""
    w = cfg.warmup
    if w.steps == 0:
        return
    prior = FormatPriorAgent(vocab, w.tool_prob, w.copy_prob)
    stream = instance_stream(derive_seed(5, cfg.seed), cfg.task)
    optimizer = make_optimizer(cfg.optim.optimizer, w.lr)
    window = params.dims.window
    for step in range(w.steps):
        ctxs, toks, masks = [], [], []
        for j in range(w.episodes_per_step):
            rec = run_instance(prior, next(stream), vocab, cfg.env, 1.0, derive_seed(6, cfg.seed, step, j))
            t = rec.trajectory
            ctxs.append(_contexts(t.tokens, window, vocab.PAD))
            toks.append(t.tokens)
            masks.append(t.action_mask.astype(bool))
        ctx, tok, m = np.concatenate(ctxs), np.concatenate(toks), np.concatenate(masks)
        grads = backward(params, ctx, tok, -m.astype(float) / m.sum(), np.zeros(len(tok)))
        clip_by_global_norm(grads, cfg.optim.grad_clip)
        optimizer.step(params, grads)


def collect(params, cfg: RunConfig, stream, update: int, vocab) -> list[RolloutRecord]:
    rl = cfg.rl
    sched = cfg.schedule
    policy = MLPPolicy(params, vocab.PAD)
    records = []
    if rl.uses_groups:
        n_groups = sched.episodes_per_update // rl.group_size
        for g in range(n_groups):
            inst = next(stream)
            records.extend(
                rollout_group(
                    policy,
                    inst,
                    rl.group_size,
                    vocab,
                    cfg.env,
                    sched.temperature,
                    derive_seed(2, cfg.seed, update, g),
                    instance_id=(update, g),
                )
            )
    else:
        for j in range(sched.episodes_per_update):
            inst = next(stream)
            records.append(
                run_instance(
                    policy,
                    inst,
                    vocab,
                    cfg.env,
                    sched.temperature,
                    derive_seed(2, cfg.seed, update, j),
                    instance_id=(update, j),
                )
            )
    return records


def train(cfg: RunConfig, out_dir=None, instances: Sequence[Instance] | None = None,
          dump_trajectories: bool = False, progress: bool = False) -> TrainResult:
    """Collect episodes, estimate advantages, and update the policy ``updates`` times.

    Fully determined by ``cfg`` (seeds included). When ``instances`` is given
    training cycles through it instead of the generated stream.
    """
    vocab = vocab_for(cfg.task)
    params = init_params(np.random.default_rng(derive_seed(3, cfg.seed)), make_dims(cfg))
    warm_start(params, cfg, vocab)
    optimizer = make_optimizer(cfg.optim.optimizer, cfg.optim.lr)
    shuffle_rng = np.random.default_rng(derive_seed(4, cfg.seed))
    if instances is not None:
        pool = list(instances)
        stream = (pool[i % len(pool)] for i in _count())
    else:
        stream = instance_stream(cfg.seed, cfg.task)
    evals = eval_instances(cfg)
    untrained_em, _ = evaluate(MLPPolicy(params, vocab.PAD), evals, vocab, cfg.env)

    dump_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        if dump_trajectories:
            dump_fh = open(os.path.join(out_dir, "trajectories.jsonl"), "w")

    rows = []
    t0 = time.perf_counter()
    eval_em = untrained_em
    try:
        for update in range(cfg.schedule.updates):
            records = collect(params, cfg, stream, update, vocab)
            if dump_fh is not None:
                for r in records:
                    dump_fh.write(json.dumps(r.trajectory.to_record(vocab)) + "\n")
            prepared = _prepare(records, params, cfg, vocab.PAD)
            a_losses, c_losses = [], []
            mb = cfg.optim.minibatch_size
            for _ in range(cfg.optim.epochs):
                order = shuffle_rng.permutation(len(prepared))
                for start in range(0, len(order), mb):
                    batch = _concat([prepared[i] for i in order[start:start + mb]])
                    try:
                        a, c = _update_step(params, optimizer, batch, cfg)
                    except NumericalError as err:
                        path = _dump_batch(batch, out_dir, update)
                        raise NumericalError(f"update {update} diverged ({err}); batch dumped to {path}") from err
                    a_losses.append(a)
                    if c is not None:
                        c_losses.append(c)
            last = update == cfg.schedule.updates - 1
            em = None
            if (update + 1) % cfg.schedule.eval_interval == 0 or last:
                em, _ = evaluate(MLPPolicy(params, vocab.PAD), evals, vocab, cfg.env)
                eval_em = em
            row = MetricsRow(
                update,
                float(np.mean([r.episode_reward for r in records])),
                em,
                float(np.mean([len(r.trajectory) for r in records])),
                float(np.mean([r.n_turns for r in records])),
                float(np.mean([r.parse_failure for r in records])),
                float(np.mean(a_losses)),
                float(np.mean(c_losses)) if c_losses else None,
                time.perf_counter() - t0,
            )
            rows.append(row)
            if progress:
                log.info(
                    "update %d reward %.3f em %s len %.1f",
                    update, row.mean_episode_reward, em, row.mean_traj_length,
                )
    finally:
        if dump_fh is not None:
            dump_fh.close()

    if out_dir:
        write_metrics(rows, os.path.join(out_dir, "metrics.csv"))
        write_timing(rows, os.path.join(out_dir, "timing.csv"))
        save_checkpoint(params, os.path.join(out_dir, "checkpoint.npz"), cfg.seed, cfg.schedule.updates)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
    return TrainResult(params, rows, final_eval_em=eval_em, untrained_eval_em=untrained_em)


def _count():
    i = 0
    while True:
        yield i
        i += 1


# --------------------------------------------------------------------------- ablation

ABLATION_ARMS = {
    "ppo": (
        ("both_masks", True, True),
        ("advantage_mask_off", True, False),
        ("both_masks_off", False, False),
    ),
    "grpo": (
        ("loss_mask", True, True),
        ("loss_mask_off", False, False),
    ),
}

ABLATION_COLUMNS = ("algorithm", "arm", "loss_mask", "advantage_mask", "seed", "eval_em", "median_eval_em")


def ablation_arms(algorithm: str):
    if algorithm not in ABLATION_ARMS:
        raise ConfigError(f"ablation supports {sorted(ABLATION_ARMS)}, not {algorithm!r}")
    return ABLATION_ARMS[algorithm]


def _run_arm(cfg: RunConfig, seed: int):
    return train(dataclasses.replace(cfg, seed=seed)).final_eval_em


def run_ablation(cfg: RunConfig, out_dir=None, n_jobs: int = 1) -> list[dict]:
    """Train every mask arm for ``cfg.rl.algorithm`` on each of ``cfg.seeds``.

    Returns one row per (arm, seed) with the arm's median alongside.
    """
    arms = ablation_arms(cfg.rl.algorithm)
    jobs = []
    for name, loss_mask, adv_mask in arms:
        arm_cfg = cfg.replace(rl={"loss_mask_enabled": loss_mask, "advantage_mask_enabled": adv_mask})
        for seed in cfg.seeds:
            jobs.append((name, loss_mask, adv_mask, seed, arm_cfg))
    if n_jobs == 1:
        ems = [_run_arm(c, s) for *_, s, c in jobs]
    else:
        from joblib import Parallel, delayed

        ems = Parallel(n_jobs=n_jobs)(delayed(_run_arm)(c, s) for *_, s, c in jobs)
    rows = []
    for name, loss_mask, adv_mask in arms:
        arm_ems = [em for (n, *_), em in zip(jobs, ems) if n == name]
        med = float(np.median(arm_ems))
        for (n, lm, am, seed, _), em in zip(jobs, ems):
            if n == name:
                rows.append(
                    {
                        "algorithm": cfg.rl.algorithm,
                        "arm": name,
                        "loss_mask": lm,
                        "advantage_mask": am,
                        "seed": seed,
                        "eval_em": em,
                        "median_eval_em": med,
                    }
                )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, ABLATION_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows


def arm_medians(rows: Sequence[dict]) -> dict:
    return {r["arm"]: r["median_eval_em"] for r in rows}


# --------------------------------------------------------------------------- estimator


def check_instances(X) -> list[Instance]:
    if X is None:
        return None
    X = list(X)
    if not X:
        raise ValueError("expected at least one instance")
    for x in X:
        if not isinstance(x, Instance):
            raise TypeError(f"expected Instance objects, got {type(x).__name__}")
    return X


class AgentTrainer(BaseEstimator):
    """Estimator wrapper: ``fit`` trains a policy, ``predict`` answers questions.

    Parameters
    ----------
    algorithm : str
        One of ``ppo``, ``grpo``, ``rloo``, ``reinforce_pp``,
        ``reinforce_pp_baseline``.
    hops : int
        Hops per generated question.
    updates, episodes_per_update : int
        Training schedule.
    lr : float
        Learning rate.
    loss_mask, advantage_mask : bool
        Action-mask toggles for the loss and the advantage alignment.
    seed : int
        Seeds initialisation, instance stream and sampling.
    config : RunConfig, optional
        Base configuration; the explicit parameters above override it.
    """

    def __init__(
        self,
        algorithm="ppo",
        hops=1,
        updates=200,
        episodes_per_update=64,
        lr=3e-3,
        loss_mask=True,
        advantage_mask=True,
        seed=0,
        config=None,
    ):
        self.algorithm = algorithm
        self.hops = hops
        self.updates = updates
        self.episodes_per_update = episodes_per_update
        self.lr = lr
        self.loss_mask = loss_mask
        self.advantage_mask = advantage_mask
        self.seed = seed
        self.config = config

    def run_config(self) -> RunConfig:
        base = self.config or RunConfig()
        return base.replace(
            task={"hops": self.hops},
            rl={
                "algorithm": self.algorithm,
                "loss_mask_enabled": self.loss_mask,
                "advantage_mask_enabled": self.advantage_mask,
            },
            optim={"lr": self.lr},
            schedule={"updates": self.updates, "episodes_per_update": self.episodes_per_update},
            seed=self.seed,
        )

    def fit(self, X=None, y=None):
        """Train; ``X`` optionally fixes the training instances, ``y`` is ignored."""
        cfg = self.run_config()
        result = train(cfg, instances=check_instances(X))
        self.vocab_ = vocab_for(cfg.task)
        self.params_ = result.params
        self.metrics_ = result.metrics
        self.run_config_ = cfg
        return self

    @property
    def policy_(self) -> MLPPolicy:
        check_is_fitted(self, "params_")
        return MLPPolicy(self.params_, self.vocab_.PAD)

    def predict(self, X) -> list:
        """Greedy answer symbol per instance (``None`` if no well-formed answer)."""
        X = check_instances(X)
        _, recs = evaluate(self.policy_, X, self.vocab_, self.run_config_.env)
        return [r["pred"][0] if r["pred"] and len(r["pred"]) == 1 else None for r in recs]

    def score(self, X, y=None) -> float:
        """Mean exact match under greedy decoding."""
        X = check_instances(X)
        em, _ = evaluate(self.policy_, X, self.vocab_, self.run_config_.env)
        return em
