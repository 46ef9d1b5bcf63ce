from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from toolrl.errors import ConfigError, EmptyBatchError, EmptyMaskError, GroupSizeError, NumericalError
from toolrl.rl_core import (
    RLConfig,
    actor_loss,
    broadcast_scalar_advantage,
    compute_advantages,
    critic_loss,
    grpo_advantages,
    masked_gae,
    reinforce_pp_advantages,
    reinforce_pp_returns,
    rloo_advantages,
)


def mc_oracle(rewards, values, mask, gamma):
    """Discounted reward-to-go over the action subsequence, minus value."""
    idx = [i for i, m in enumerate(mask) if m]
    out = np.zeros(len(rewards))
    for j, i in enumerate(idx):
        g = sum(gamma ** (k - j) * rewards[idx[k]] for k in range(j, len(idx)))
        out[i] = g - values[i]
    return out


def random_case(rng, n=None):
    n = n or int(rng.integers(1, 17))
    mask = rng.integers(0, 2, size=n)
    mask[rng.integers(n)] = 1
    rewards = rng.normal(size=n) * mask
    return rewards, rng.normal(size=n), mask


@pytest.mark.parametrize("gamma", [0.0, 0.5, 0.9, 1.0])
def test_gae_lambda_one_matches_monte_carlo(gamma):
    rng = np.random.default_rng(int(gamma * 10))
    for _ in range(250):
        r, v, m = random_case(rng)
        adv, ret = masked_gae(r, v, m, gamma, 1.0)
        oracle = mc_oracle(r, v, m, gamma)
        assert np.max(np.abs(adv - oracle)) < 1e-10
        np.testing.assert_allclose(ret[m == 1], adv[m == 1] + v[m == 1], atol=1e-12)
        assert np.all(adv[m == 0] == 0)


def test_gae_examples():
    adv, ret = masked_gae([0, 1], [0.5, 0.25], [1, 1], 1.0, 1.0)
    np.testing.assert_allclose(adv, [0.5, 0.75])
    np.testing.assert_allclose(ret, [1.0, 1.0])
    adv, _ = masked_gae([0, 0, 0], [0, 0, 0], [1, 1, 1], 0.9, 0.95)
    assert np.all(adv == 0)
    adv, _ = masked_gae([1, 1], [0.3, 0.4], [1, 1], 0.0, 0.95)
    np.testing.assert_allclose(adv, [0.7, 0.6])


def test_gae_condenses_over_environment_tokens():
    r, v = np.array([0.0, 0.0, 1.0]), np.array([0.2, 9.0, 0.4])
    full, _ = masked_gae(r, v, [1, 0, 1], 0.9, 0.8)
    small, _ = masked_gae(r[[0, 2]], v[[0, 2]], [1, 1], 0.9, 0.8)
    np.testing.assert_allclose(full[[0, 2]], small)
    assert full[1] == 0


def test_gae_without_advantage_mask_uses_all_positions():
    r, v = np.array([0.0, 0.0, 1.0]), np.array([0.2, 9.0, 0.4])
    adv, _ = masked_gae(r, v, [1, 0, 1], 1.0, 1.0, advantage_mask_enabled=False)
    np.testing.assert_allclose(adv, [1 - 0.2, 1 - 9.0, 1 - 0.4])


def test_gae_errors():
    with pytest.raises(EmptyMaskError):
        masked_gae([0, 0], [0, 0], [0, 0], 1.0, 1.0)
    with pytest.raises(NumericalError):
        masked_gae([np.nan], [0], [1], 1.0, 1.0)


def test_rloo_examples():
    np.testing.assert_array_equal(rloo_advantages([1, 0, 0, 1]), [2 / 3, -2 / 3, -2 / 3, 2 / 3])
    assert np.all(rloo_advantages([0.3] * 4) == 0)
    np.testing.assert_array_equal(rloo_advantages([2.0, 0.5]), [1.5, -1.5])
    with pytest.raises(GroupSizeError):
        rloo_advantages([1.0])


def test_grpo_examples():
    np.testing.assert_allclose(grpo_advantages([1, 0]), [1, -1], atol=1e-7)
    assert np.all(grpo_advantages([0.5] * 3) == 0)
    with pytest.raises(GroupSizeError):
        grpo_advantages([1.0])


@settings(max_examples=200)
@given(hnp.arrays(np.float64, st.integers(2, 12), elements=st.floats(-1, 1)), st.randoms())
def test_group_centering_and_symmetry(r, rnd):
    eps = 1e-8
    g = grpo_advantages(r, eps)
    assert abs(g.sum()) <= len(r) * eps * max(np.abs(r).max(), 1.0) + 1e-9
    assert abs(rloo_advantages(r).sum()) < 1e-9
    perm = list(range(len(r)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(grpo_advantages(r[perm], eps), g[perm], atol=1e-12)


def traj(rewards, mask):
    return SimpleNamespace(rewards=np.asarray(rewards, float), action_mask=np.asarray(mask), tokens=np.zeros(len(mask)))


def test_reinforce_pp_examples():
    out = reinforce_pp_advantages([traj([1.0], [1])], 1.0, False)
    assert out[0].tolist() == [0.0]
    raw, _ = reinforce_pp_returns([traj([1.0], [1]), traj([0.0], [1])], 1.0, True, [0, 0])
    assert [r.tolist() for r in raw] == [[0.5], [-0.5]]
    zero = reinforce_pp_advantages([traj([0, 0], [1, 1]), traj([0], [1])], 0.9, True)
    assert all(np.all(z == 0) for z in zero)
    with pytest.raises(EmptyBatchError):
        reinforce_pp_advantages([], 1.0, False)


def test_reinforce_pp_discounting_and_whitening():
    raw, _ = reinforce_pp_returns([traj([0, 0, 1], [1, 0, 1])], 0.5, False)
    np.testing.assert_allclose(raw[0], [0.5, 0, 1])
    white = reinforce_pp_advantages([traj([0, 0, 1], [1, 0, 1])], 0.5, False)[0]
    np.testing.assert_allclose(white[[0, 2]], [-1, 1], atol=1e-6)
    assert white[1] == 0


def test_actor_loss_examples():
    loss, _ = actor_loss([0, 0], [0, 0], [1, -1], [1, 1], 0.2)
    assert loss == 0
    loss, _ = actor_loss([0.0], [np.log(2)], [1.0], [1], 0.2)
    assert loss == pytest.approx(-1.2)
    with pytest.raises(EmptyMaskError):
        actor_loss([0], [0], [1], [0], 0.2)


def test_critic_loss_examples():
    assert critic_loss([1, 2], [1, 2], [1, 1])[0] == 0
    loss, grad = critic_loss([0.0], [1.0], [1])
    assert loss == 1 and grad.tolist() == [-2]
    a = critic_loss([0.0, 5.0], [1.0, 0.0], [1, 0])
    b = critic_loss([0.0, -3.0], [1.0, 7.0], [1, 0])
    assert a[0] == b[0]
    with pytest.raises(EmptyMaskError):
        critic_loss([0.0], [1.0], [0])


def fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 10))
        mask = rng.integers(0, 2, n)
        mask[0] = 1
        old, new, adv = rng.normal(size=n) * 0.3, rng.normal(size=n) * 0.3, rng.normal(size=n)
        # keep ratios away from the clip kinks, where the loss is not differentiable
        ratio = np.exp(new - old)
        if np.any(np.abs(np.abs(ratio - 1) - 0.2) < 1e-3):
            continue
        _, g = actor_loss(old, new, adv, mask, 0.2)
        num = fd(lambda x: actor_loss(old, x, adv, mask, 0.2)[0], new)
        v, ret = rng.normal(size=n), rng.normal(size=n)
        _, gc = critic_loss(v, ret, mask)
        numc = fd(lambda x: critic_loss(x, ret, mask)[0], v)
        for a, b in ((g, num), (gc, numc)):
            # absolute floor: below ~1e-4 the finite-difference round-off dominates
            denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-4)
            worst = max(worst, np.linalg.norm(a - b) / denom)
    assert worst < 1e-6


def test_clip_inactive_equals_unclipped():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = 6
        old = rng.normal(size=n)
        new = old + rng.uniform(np.log(0.81), np.log(1.19), size=n)
        adv, mask = rng.normal(size=n), np.ones(n)
        loss, _ = actor_loss(old, new, adv, mask, 0.2)
        assert loss == pytest.approx(-np.mean(np.exp(new - old) * adv), abs=1e-14)


def test_mask_exclusion_bit_exact():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        mask = rng.integers(0, 2, n)
        mask[0] = 1
        old, new, adv = (rng.normal(size=n) for _ in range(3))
        l1, g1 = actor_loss(old, new, adv, mask, 0.2)
        off = mask == 0
        old2, new2, adv2 = old.copy(), new.copy(), adv.copy()
        for a in (old2, new2, adv2):
            a[off] = rng.normal(size=off.sum()) * 100
        l2, g2 = actor_loss(old2, new2, adv2, mask, 0.2)
        assert l1 == l2 and np.array_equal(g1, g2)


def test_loss_mask_disabled_includes_everything():
    loss, grad = actor_loss([0, 0], [0, 0], [1, 3], [1, 0], 0.2, loss_mask_enabled=False)
    assert loss == -2 and np.all(grad != 0)


def test_broadcast_examples():
    assert broadcast_scalar_advantage([0, 1, 1], 0.0).tolist() == [0, 0, 0]
    assert broadcast_scalar_advantage([0, 1, 1], 2.0).tolist() == [0, 2, 2]
    assert broadcast_scalar_advantage([0, 1, 1], 2.0, False).tolist() == [2, 2, 2]


def test_config_validation():
    with pytest.raises(ConfigError):
        RLConfig(algorithm="a2c")
    with pytest.raises(ConfigError):
        RLConfig(algorithm="grpo", group_size=1)
    with pytest.raises(ConfigError):
        RLConfig(gamma=0.0)
    assert RLConfig("ppo").uses_critic and not RLConfig("grpo").uses_critic


def test_compute_advantages_routing():
    trajs = [traj([0, 0, 1.0], [1, 0, 1]), traj([0, 0, 0.0], [1, 0, 1])]
    grpo = compute_advantages(trajs, RLConfig("grpo", group_size=2), [0, 0])
    np.testing.assert_allclose(grpo[0].advantages, [1, 0, 1], atol=1e-7)
    np.testing.assert_allclose(grpo[1].advantages, [-1, 0, -1], atol=1e-7)
    rloo = compute_advantages(trajs, RLConfig("rloo", group_size=2), [0, 0])
    assert rloo[0].advantages.tolist() == [1, 0, 1]
    for t in trajs:
        t.values = np.array([0.1, 0.2, 0.3])
    ppo = compute_advantages(trajs, RLConfig("ppo", whiten_advantages=False))
    adv, _ = masked_gae(trajs[0].rewards, trajs[0].values, trajs[0].action_mask, 1.0, 0.95)
    np.testing.assert_array_equal(ppo[0].advantages, adv)
    for algo in ("reinforce_pp", "reinforce_pp_baseline"):
        out = compute_advantages(trajs, RLConfig(algo, group_size=2), [0, 0])
        assert all(np.all(o.advantages[1] == 0) for o in out)
