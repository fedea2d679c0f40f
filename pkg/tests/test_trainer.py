import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratelab.env import EnvConfig
from ratelab.policy import forward_mean, init_policy, log_prob
from ratelab.trainer import (
    Adam,
    EpisodeRecord,
    PpoConfig,
    TrainResult,
    compute_gae,
    learning_progress,
    normalize,
    select_best,
    surrogate_loss_grad,
    train,
)


def brute_force_gae(rewards, values, dones, gamma, lam, last_value):
    """Double loop straight from the definition: A_t = sum_k (gamma*lam)^k delta_{t+k}."""
    n = len(rewards)
    v_next = [values[t + 1] if t + 1 < n else last_value for t in range(n)]
    deltas = [rewards[t] + gamma * v_next[t] * (1 - dones[t]) - values[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, weight = 0.0, 1.0
        for k in range(t, n):
            total += weight * deltas[k]
            if dones[k]:
                break
            weight *= gamma * lam
        adv.append(total)
    return np.array(adv)


def test_gae_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(1, 65))
        r = rng.normal(0, 10, n)
        v = rng.normal(0, 10, n)
        d = rng.random(n) < 0.1
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        last = float(rng.normal())
        adv, ret = compute_gae(r, v, d, gamma, lam, last)
        ref = brute_force_gae(r, v, d, gamma, lam, last)
        np.testing.assert_allclose(adv, ref, atol=1e-10, rtol=0)
        np.testing.assert_allclose(ret, ref + v, atol=1e-10, rtol=0)


def test_gae_lambda_zero_is_one_step_td():
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, 0.25, 0.125])
    adv, _ = compute_gae(r, v, [0, 0, 1], 0.9, 0.0, last_value=7.0)
    np.testing.assert_allclose(adv, [1 + 0.9 * 0.25 - 0.5, 2 + 0.9 * 0.125 - 0.25, 3 - 0.125])


def test_gae_lambda_one_is_discounted_return():
    r = np.array([1.0, -2.0, 4.0])
    adv, ret = compute_gae(r, np.zeros(3), [0, 0, 0], 0.5, 1.0, last_value=8.0)
    np.testing.assert_allclose(ret, [1 - 1 + 1 + 1, -2 + 2 + 2, 4 + 4])


def test_truncation_splits_the_recursion():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=10), rng.normal(size=10)
    cut = np.zeros(10, bool)
    cut[4] = True
    boot = np.zeros(10)
    boot[4] = 3.0
    adv, _ = compute_gae(r, v, np.zeros(10), 0.9, 0.8, 1.5, cut, boot)
    # first piece behaves like a rollout ending at step 4 with value 3.0 after it
    head, _ = compute_gae(r[:5], v[:5], np.zeros(5), 0.9, 0.8, last_value=3.0)
    tail, _ = compute_gae(r[5:], v[5:], np.zeros(5), 0.9, 0.8, last_value=1.5)
    np.testing.assert_allclose(adv, np.concatenate([head, tail]), atol=1e-12)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=200))
def test_normalize(xs):
    a = np.array(xs)
    z = normalize(a)
    assert abs(z.mean()) < 1e-6
    if a.std() > 1e-3:
        assert z.std() == pytest.approx(1.0, abs=1e-6)


def test_normalize_constant_input():
    np.testing.assert_array_equal(normalize(np.full(5, 3.0)), np.zeros(5))


def test_adam_first_step_is_signed_stepsize():
    a = [np.array([1.0, -2.0, 3.0])]
    Adam(a).step(a, [np.array([0.5, -4.0, 0.0])], lr=0.1)
    np.testing.assert_allclose(a[0], [0.9, -1.9, 3.0], atol=1e-7)


@pytest.fixture
def surrogate_case():
    rng = np.random.default_rng(9)
    p = init_policy(rng, log_std=-1.0)
    p.layers[-1].weight *= 20
    obs = rng.normal(0, 80, (32, 6))
    raw = forward_mean(p, obs) + rng.normal(0, 0.3, (32, 4))
    adv = rng.normal(size=32)
    return p, obs, raw, adv


def test_ratio_one_gives_plain_policy_gradient(surrogate_case):
    p, obs, raw, adv = surrogate_case
    lp = log_prob(p, obs, raw)
    loss, _, info = surrogate_loss_grad(p, obs, raw, lp, adv, 0.2)
    assert loss == pytest.approx(-adv.mean(), abs=1e-12)
    assert info["clip_frac"] == 0.0 and abs(info["approx_kl"]) < 1e-15


def test_zero_clip_kills_gradient_after_any_move(surrogate_case):
    p, obs, raw, adv = surrogate_case
    lp_old = log_prob(p, obs, raw) + 0.05  # every ratio now differs from one
    _, grads, _ = surrogate_loss_grad(p, obs, raw, lp_old, adv, 1e-12)
    # where the clipped branch wins nothing flows; elsewhere the gradient survives
    ratio = np.exp(-0.05)
    expect_active = ratio * adv <= np.clip(ratio, 1 - 1e-12, 1 + 1e-12) * adv
    assert 0 < expect_active.sum() < 32
    _, g_all, _ = surrogate_loss_grad(p, obs[expect_active], raw[expect_active],
                                      lp_old[expect_active], adv[expect_active], 1e-12)
    for a, b in zip(grads, g_all):
        np.testing.assert_allclose(a * 32, b * expect_active.sum(), atol=1e-10)


def test_surrogate_gradient_central_differences(surrogate_case):
    p, obs, raw, adv = surrogate_case
    lp_old = log_prob(p, obs, raw) + np.random.default_rng(1).normal(0, 0.1, 32)
    _, grads, _ = surrogate_loss_grad(p, obs, raw, lp_old, adv, 0.2, bound_coef=0.5)
    rng = np.random.default_rng(3)
    h = 1e-6
    for k, arr in enumerate(p.arrays()):
        for flat in rng.choice(arr.size, size=min(4, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            up = surrogate_loss_grad(p, obs, raw, lp_old, adv, 0.2, bound_coef=0.5)[0]
            arr[idx] = old - h
            down = surrogate_loss_grad(p, obs, raw, lp_old, adv, 0.2, bound_coef=0.5)[0]
            arr[idx] = old
            fd = (up - down) / (2 * h)
            assert abs(grads[k][idx] - fd) <= 1e-3 * max(abs(fd), 1e-3), (k, idx)


def test_gradient_step_lowers_the_loss(surrogate_case):
    p, obs, raw, adv = surrogate_case
    lp = log_prob(p, obs, raw)
    before, grads, _ = surrogate_loss_grad(p, obs, raw, lp, adv, 0.2)
    for a, g in zip(p.arrays(), grads):
        a -= 1e-4 * g
    after = surrogate_loss_grad(p, obs, raw, lp, adv, 0.2)[0]
    assert after < before


def _result(seed, rewards):
    curve = [EpisodeRecord(i, r, 10, "time_limit") for i, r in enumerate(rewards)]
    return TrainResult(seed, None, None, curve, 10 * len(rewards))


def test_select_best_example():
    runs = [_result(0, [5.0]), _result(1, [9.0]), _result(2, [7.0])]
    assert select_best(runs, window=1).seed == 1


def test_select_best_order_invariant_with_ties():
    runs = [_result(3, [1.0, 4.0]), _result(1, [0.0, 4.0]), _result(2, [2.0, 2.0])]
    for perm in itertools.permutations(runs):
        assert select_best(list(perm), window=1).seed == 1


def test_select_best_empty():
    with pytest.raises(ValueError):
        select_best([])


def test_learning_progress():
    curve = _result(0, [-100.0] * 10 + [-40.0] * 10).curve
    prog = learning_progress(curve, 0.1)
    assert prog["window"] == 2
    assert prog["improvement"] == pytest.approx(0.6)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        PpoConfig(minibatch_size=0)
    with pytest.raises(ValueError):
        PpoConfig(action_repeat=0)
    cfg = PpoConfig(hidden=(8, 8), stepsize=1e-3)
    assert PpoConfig.from_dict(cfg.to_dict()) == cfg


SMALL = dict(action_repeat=1, horizon=256, minibatch_size=64, epochs=2, total_steps=512, hidden=(8, 8))


def test_training_is_bit_reproducible():
    env = EnvConfig(episode_time=0.1)
    a = train(4, env, PpoConfig(**SMALL))
    b = train(4, env, PpoConfig(**SMALL))
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        assert np.array_equal(x, y)
    assert [r.cumulative_reward for r in a.curve] == [r.cumulative_reward for r in b.curve]
    c = train(5, env, PpoConfig(**SMALL))
    assert not np.array_equal(a.params.layers[0].weight, c.params.layers[0].weight)


def test_training_records_episodes_and_steps():
    res = train(0, EnvConfig(episode_time=0.1), PpoConfig(**SMALL))
    assert res.total_steps == 512
    assert len(res.curve) == 5
    assert all(r.steps == 100 for r in res.curve)
    assert len(res.diagnostics) == 2
