"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python3
tests/test_acceptance.py``). Criteria 8 and 9 train real policies and take
several minutes each on one CPU core.
"""

import json
import sys
import time

import numpy as np
import pytest

from toolrl.cli import main as cli_main
from toolrl.errors import ParseError
from toolrl.hopqa import (
    SEARCH_SPEC,
    GoldChainAgent,
    HopQAConfig,
    exact_match,
    extract_answer,
    make_instances,
    make_registry,
    outcome_reward,
    vocab_for,
)
from toolrl.policy import PolicyDims, backward, forward_batch, init_params, log_softmax
from toolrl.rl_core import (
    actor_loss,
    critic_loss,
    grpo_advantages,
    masked_gae,
    reinforce_pp_returns,
    rloo_advantages,
)
from toolrl.rollout import run_instance
from toolrl.token_mdp import Vocabulary
from toolrl.tool_protocol import (
    ToolCall,
    ToolParam,
    ToolRegistry,
    ToolSpec,
    extract_tool_calls,
    wrap_tool_call,
)
from toolrl.trainer import RunConfig, arm_medians, run_ablation, train


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, detail

    return emit


# ---------------------------------------------------------------- 1. GAE oracle


def _mc_oracle(rewards, values, mask, gamma):
    idx = np.flatnonzero(mask)
    out = np.zeros(len(rewards))
    g = 0.0
    for i in idx[::-1]:
        g = rewards[i] + gamma * g
        out[i] = g - values[i]
    return out


def test_criterion_1_gae_oracle(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(1000):
        gamma = (0.0, 0.5, 0.9, 1.0)[case % 4]
        n = int(rng.integers(1, 17))
        mask = rng.integers(0, 2, n)
        mask[rng.integers(n)] = 1
        rewards = rng.normal(size=n) * mask
        values = rng.normal(size=n)
        adv, _ = masked_gae(rewards, values, mask, gamma, 1.0)
        worst = max(worst, float(np.max(np.abs((adv - _mc_oracle(rewards, values, mask, gamma))[mask == 1]))))
    dt = time.perf_counter() - t0
    report(1, worst <= 1e-10 and dt < 5, f"max |GAE - MC| = {worst:.2e} over 1000 trajectories in {dt:.2f}s")


# ---------------------------------------------------------------- 2. gradients


def _objective(params, ctx, tok, dlp, dv):
    logits, values, _ = forward_batch(params, ctx)
    return float(dlp @ log_softmax(logits)[np.arange(len(tok)), tok] + dv @ values)


def _central_diff(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def _rel(a, b, floor=1e-12):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def test_criterion_2_gradients(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_policy = 0.0
    for _ in range(20):
        dims = PolicyDims(16, 4, 4, 8)
        params = init_params(rng, dims, scale=0.5)
        n = 6
        ctx = rng.integers(0, 16, (n, 4))
        tok = rng.integers(0, 16, n)
        dlp, dv = rng.normal(size=n), rng.normal(size=n)
        grads = backward(params, ctx, tok, dlp, dv)
        for name, block in params.blocks.items():
            fd = _central_diff(lambda: _objective(params, ctx, tok, dlp, dv), block, 1e-5)
            worst_policy = max(worst_policy, _rel(grads.blocks[name], fd))

    worst_loss = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 10))
        mask = rng.integers(0, 2, n)
        mask[0] = 1
        old, new, adv = rng.normal(size=n) * 0.3, rng.normal(size=n) * 0.3, rng.normal(size=n)
        if np.any(np.abs(np.abs(np.exp(new - old) - 1) - 0.2) < 1e-3):
            continue
        _, g = actor_loss(old, new, adv, mask, 0.2)
        fd = _central_diff(lambda: actor_loss(old, new, adv, mask, 0.2)[0], new, 1e-6)
        worst_loss = max(worst_loss, _rel(g, fd, 1e-4))
        v, ret = rng.normal(size=n), rng.normal(size=n)
        _, gc = critic_loss(v, ret, mask)
        fdc = _central_diff(lambda: critic_loss(v, ret, mask)[0], v, 1e-6)
        worst_loss = max(worst_loss, _rel(gc, fdc, 1e-4))
    dt = time.perf_counter() - t0
    ok = worst_policy < 1e-4 and worst_loss < 1e-6 and dt < 30
    report(2, ok, f"policy rel err {worst_policy:.1e}, loss rel err {worst_loss:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------- 3. mask exclusion


def test_criterion_3_mask_exclusion(report):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 16))
        mask = rng.integers(0, 2, n)
        mask[rng.integers(n)] = 1
        old, new, adv = (rng.normal(size=n) for _ in range(3))
        l1, g1 = actor_loss(old, new, adv, mask, 0.2)
        off = mask == 0
        for arr in (old, new, adv):
            arr[off] = rng.normal(size=off.sum()) * 50
        l2, g2 = actor_loss(old, new, adv, mask, 0.2)
        mismatches += not (l1 == l2 and np.array_equal(g1, g2))
    report(3, mismatches == 0, f"{mismatches} of 1000 cases changed under mask=0 mutation")


# ---------------------------------------------------------------- 4. estimators


class _T:
    def __init__(self, rewards, mask):
        self.rewards = np.asarray(rewards, float)
        self.action_mask = np.asarray(mask)


def test_criterion_4_estimator_oracles(report):
    rloo_ok = rloo_advantages([1, 0, 0, 1]).tolist() == [2 / 3, -2 / 3, -2 / 3, 2 / 3]
    rng = np.random.default_rng(4)
    grpo_ok = True
    for _ in range(200):
        r = rng.normal(size=8)
        grpo_ok &= abs(grpo_advantages(r, 1e-8).sum()) <= 8 * 1e-8 * np.abs(r).max()
    raw, _ = reinforce_pp_returns([_T([1.0], [1]), _T([0.0], [1])], 1.0, True, [0, 0])
    rpp_ok = [x.tolist() for x in raw] == [[0.5], [-0.5]]
    report(4, rloo_ok and grpo_ok and rpp_ok, f"rloo exact={rloo_ok}, grpo centred={grpo_ok}, reinforce++ baseline={rpp_ok}")


# ---------------------------------------------------------------- 5. codec


def test_criterion_5_codec(report):
    names = ["search", "lookup", "walk"]
    args = [f"a{i}" for i in range(6)]
    vocab = Vocabulary.build(names + args + ["ghost"])
    rng = np.random.default_rng(5)
    failures = 0
    for _ in range(10_000):
        specs = []
        for name in rng.permutation(names)[: rng.integers(1, 4)]:
            req, opt = int(rng.integers(0, 3)), int(rng.integers(0, 3))
            opt = opt or (req == 0)
            params = [ToolParam(f"p{i}", required=True) for i in range(req)]
            params += [ToolParam(f"q{i}", required=False) for i in range(opt)]
            specs.append(ToolSpec(str(name), "random", tuple(params)))
        reg = ToolRegistry(specs, vocab)
        spec = specs[rng.integers(len(specs))]
        k = int(rng.integers(spec.min_args, spec.max_args + 1))
        call = ToolCall(spec.name, tuple(rng.choice(args, k)))
        failures += extract_tool_calls(wrap_tool_call(call, vocab), reg) != [call]

    reg = ToolRegistry([SEARCH_SPEC], Vocabulary.build(["search", "ghost", "a0"]))
    v = reg.vocab
    malformed = {
        ParseError.EMPTY_SPAN: ["<tool>", "</tool>"],
        ParseError.UNKNOWN_TOOL: ["<tool>", "ghost", "a0", "</tool>"],
        ParseError.ARITY: ["<tool>", "search", "</tool>"],
        ParseError.UNMATCHED: ["<tool>", "search", "a0"],
    }
    kinds_ok = True
    for kind, symbols in malformed.items():
        try:
            extract_tool_calls(v.encode(symbols), reg)
            kinds_ok = False
        except ParseError as err:
            kinds_ok &= err.kind == kind
    report(5, failures == 0 and kinds_ok, f"{failures} round-trip failures in 10000; malformed kinds ok={kinds_ok}")


# ---------------------------------------------------------------- 6. reward table


def test_criterion_6_reward_table(report):
    cfg = HopQAConfig()
    vocab = vocab_for(cfg)
    inst = make_instances(6, 1, cfg)[0]
    reg = make_registry(inst, vocab)
    e0, r1, gold = inst.start_entity, inst.chain[0].relation, inst.gold_answer
    wrong = next(e for e in ("e0", "e1") if e != gold)
    cases = {
        1.0: [["<tool>", "search", e0, r1, "</tool>"], ["<ans>", gold, "</ans>"]],
        0.0: [["<ans>", wrong, "</ans>"]],
        -0.5: [["<tool>", "search", "</tool>"], ["<ans>", gold, "</ans>"]],
        -1.0: [["<tool>", "</tool>"], [e0]],
    }
    got = {k: outcome_reward([vocab.encode(t) for t in turns], gold, reg) for k, turns in cases.items()}
    report(6, all(k == v for k, v in got.items()), f"expected -> got {got}")


# ---------------------------------------------------------------- 7. solvability


def test_criterion_7_solvability(report):
    results = []
    for hops in (1, 2):
        cfg = HopQAConfig(hops=hops)
        vocab = vocab_for(cfg)
        agent = GoldChainAgent(vocab)
        for inst in make_instances(7, 250, cfg):
            rec = run_instance(agent, inst, vocab, greedy=True)
            pred = extract_answer(rec.trajectory, vocab)
            em = exact_match(vocab.decode(pred), inst.gold_answer) if pred else 0
            results.append((em, rec.episode_reward))
    em = np.mean([r[0] for r in results])
    reward = np.mean([r[1] for r in results])
    report(7, em == 1.0 and reward == 1.0, f"gold-chain agent on {len(results)} instances: EM {em:.3f}, reward {reward:.3f}")


# ---------------------------------------------------------------- 8. learning


@pytest.mark.slow
def test_criterion_8_learning(report):
    t0 = time.perf_counter()
    out = {}
    for algo in ("ppo", "grpo"):
        for seed in (0, 1, 2):
            res = train(RunConfig().replace(rl={"algorithm": algo}, seed=seed))
            out[(algo, seed)] = (res.untrained_eval_em, res.final_eval_em)
    dt = time.perf_counter() - t0
    ppo_ok = all(out[("ppo", s)][1] >= 0.8 for s in range(3))
    base_ok = all(v[0] <= 0.1 for v in out.values())
    grpo_ok = sum(out[("grpo", s)][1] >= 0.6 for s in range(3)) >= 2
    detail = ", ".join(f"{a}/{s}: {u:.2f}->{f:.2f}" for (a, s), (u, f) in out.items())
    report(8, ppo_ok and base_ok and grpo_ok and dt <= 900, f"{detail}; {dt:.0f}s total")


# ---------------------------------------------------------------- 9. ablation


@pytest.mark.slow
def test_criterion_9_ablation_direction(report):
    t0 = time.perf_counter()
    base = RunConfig().replace(task={"hops": 2}, schedule={"eval_interval": 200}, seeds=(0, 1, 2, 3, 4))
    ppo = arm_medians(run_ablation(base))
    grpo = arm_medians(run_ablation(base.replace(rl={"algorithm": "grpo"})))
    dt = time.perf_counter() - t0
    ok = (
        ppo["both_masks"] >= ppo["both_masks_off"]
        and ppo["both_masks"] >= ppo["advantage_mask_off"]
        and grpo["loss_mask"] >= grpo["loss_mask_off"]
    )
    report(9, ok, f"median EM ppo {json.dumps(ppo)}, grpo {json.dumps(grpo)}; {dt:.0f}s")


# ---------------------------------------------------------------- 10. determinism


def test_criterion_10_determinism(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"schedule": {"updates": 5, "episodes_per_update": 32, "eval_interval": 5, "eval_size": 20},
                               "warmup": {"steps": 20}}))
    for name in ("a", "b"):
        cli_main(["train", "--config", str(cfg), "--seed", "7", "--single-thread", "--out", str(tmp_path / name)])
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    report(10, same, "metrics.csv byte-identical across two single-threaded runs" if same else "metrics.csv differs")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
