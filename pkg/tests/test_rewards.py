import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tqlab.mdp import Prompt, Trajectory, Vocabulary, get_space
from tqlab.rewards import (
    PreferenceDataset,
    RewardBoundsError,
    TrajectoryReward,
    bt_nll_grad,
    bt_nll_loss,
    bt_preference_prob,
    fit_reward_bt,
    generate_bt_dataset,
    rescale_reward,
    token_reward,
    trajectory_return,
)


@pytest.mark.parametrize("prefix,token,expected", [((0, 0), 0, 0.0), ((0, 0), 2, 2 / 3), ((), 2, 0.0)])
def test_token_reward_i0(i0, prefix, token, expected):
    assert token_reward(i0.reward, i0.vocab, i0.prompts[0], prefix, token) == pytest.approx(expected, abs=1e-15)


def test_token_reward_rejects_bad_token(i0):
    with pytest.raises(ValueError):
        token_reward(i0.reward, i0.vocab, i0.prompts[0], (), 9)


def test_trajectory_return_i0(i0):
    p = i0.prompts[0]
    assert trajectory_return(i0.reward, i0.vocab, p, Trajectory((0, 0, 0, 2), True)) == pytest.approx(1.0)
    assert trajectory_return(i0.reward, i0.vocab, p, Trajectory((2,), False)) == 0.0


def test_trajectory_return_matches_direct_evaluation():
    v = Vocabulary.letters(3)
    sp = get_space(v, 3)
    prompt = Prompt("p0")
    r = TrajectoryReward.uniform_random(sp, [prompt], np.random.default_rng(0))
    vals = r.values(prompt, sp)
    for i, t in enumerate(sp.trajectories()):
        assert trajectory_return(r, v, prompt, t) == pytest.approx(vals[i], abs=1e-15)


def test_forced_value_switch(abe):
    sp = get_space(abe, 2)
    r = TrajectoryReward.counting(abe, {"A": 0.5})
    r0 = TrajectoryReward.counting(abe, {"A": 0.5})
    r0.forced_value = 0.0
    p = Prompt("p0")
    forced = sp.node_of((0, 0))
    assert r.values(p, sp)[forced] == 1.0
    assert r0.values(p, sp)[forced] == 0.0
    assert trajectory_return(r0, abe, p, Trajectory((0, 0, 2), True)) == 0.0
    assert trajectory_return(r0, abe, p, Trajectory((0, 2), False)) == 0.5


def test_reward_bounds_enforced(abe):
    sp = get_space(abe, 3)
    r = TrajectoryReward.counting(abe, {"A": 1.0}, bounds=(0.0, 1.0))
    with pytest.raises(RewardBoundsError):
        r.values(Prompt("p0"), sp)


def test_bt_preference_prob(i0):
    p = i0.prompts[0]
    assert bt_preference_prob(i0.reward, p, (0,), (0,)) == 0.5
    big = TrajectoryReward(lambda prompt, c: 1000.0 * len(c), bounds=None)
    assert bt_preference_prob(big, p, (0, 0), ()) == pytest.approx(1.0)
    unit = TrajectoryReward(lambda prompt, c: float(len(c)), bounds=None)
    assert bt_preference_prob(unit, p, (0,), ()) == pytest.approx(0.7310585786, abs=1e-10)


def _random_dataset(seed, n=200):
    v = Vocabulary.letters(2)
    sp = get_space(v, 2)
    rng = np.random.default_rng(seed)
    prompts = [Prompt("a"), Prompt("b")]
    truth = TrajectoryReward.uniform_random(sp, prompts, rng, -1.0, 1.0)
    return sp, prompts, generate_bt_dataset(truth, prompts, sp, n, rng)


def test_bt_loss_equal_rewards_is_ln2():
    sp, prompts, data = _random_dataset(0)
    params = {p.id: np.zeros(sp.size) for p in prompts}
    assert bt_nll_loss(params, data) == pytest.approx(math.log(2), abs=1e-15)


def test_bt_loss_separated_data_goes_to_zero():
    sp = get_space(Vocabulary.letters(1), 1)
    data = PreferenceDataset.from_records(sp, [("p", (0,), ())] * 5)
    params = {"p": np.array([0.0, 50.0])}
    assert bt_nll_loss(params, data) < 1e-20


def test_bt_empty_dataset():
    sp = get_space(Vocabulary.letters(1), 1)
    empty = PreferenceDataset(sp, [], [], [])
    with pytest.raises(ValueError):
        bt_nll_loss({"p": np.zeros(sp.size)}, empty)


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_bt_gradient_matches_central_differences(seed):
    sp, prompts, data = _random_dataset(seed, 60)
    rng = np.random.default_rng(seed + 1)
    params = {p.id: rng.normal(size=sp.size) for p in prompts}
    grad = bt_nll_grad(params, data)
    h = 1e-5
    for pid in params:
        for j in range(sp.size):
            up = {k: v.copy() for k, v in params.items()}
            dn = {k: v.copy() for k, v in params.items()}
            up[pid][j] += h
            dn[pid][j] -= h
            fd = (bt_nll_loss(up, data) - bt_nll_loss(dn, data)) / (2 * h)
            assert abs(fd - grad[pid][j]) <= 1e-6 * max(1.0, abs(fd)) + 1e-9


def test_fit_single_record_orders_pair():
    sp = get_space(Vocabulary.letters(1), 1)
    data = PreferenceDataset.from_records(sp, [("p", (0,), ())])
    fit = fit_reward_bt(data, steps=50, learning_rate=1.0)
    raw = fit.raw_tables["p"]
    assert raw[sp.node_of((0,))] > raw[sp.node_of(())]


def test_fit_zero_steps_is_zero_table():
    sp, prompts, data = _random_dataset(3)
    fit = fit_reward_bt(data, steps=0)
    for pid in fit.raw_tables:
        assert np.all(fit.raw_tables[pid] == 0.0)


def test_fit_records_provenance():
    sp, prompts, data = _random_dataset(4)
    fit = fit_reward_bt(data, steps=10, learning_rate=1.0, seed=7, r_max=2.0)
    assert fit.meta["kind"] == "bt_fit" and fit.meta["steps"] == 10 and fit.meta["seed"] == 7
    assert fit.bounds == (0.0, 2.0)


def test_expected_labels_recover_truth():
    v = Vocabulary.letters(2)
    sp = get_space(v, 2)
    prompts = [Prompt("p0")]
    rng = np.random.default_rng(11)
    truth = TrajectoryReward.uniform_random(sp, prompts, rng, 0.0, 2.0)
    data = generate_bt_dataset(truth, prompts, sp, 2000, rng, labels="expected")
    fit = fit_reward_bt(data, steps=2000, learning_rate=10.0)
    t = truth.values(prompts[0], sp)
    raw = fit.raw_tables["p0"]
    assert np.max(np.abs((raw - raw.mean()) - (t - t.mean()))) < 1e-6


def test_rescale_identity_when_in_range(abe):
    sp = get_space(abe, 2)
    p = Prompt("p0")
    r = TrajectoryReward.uniform_random(sp, [p], np.random.default_rng(0))
    vals = r.values(p, sp)
    out = rescale_reward(r, vals.min(), vals.max(), [p], sp)
    np.testing.assert_allclose(out.values(p, sp), vals, atol=1e-12)


def test_rescale_constant_to_midpoint(abe):
    sp = get_space(abe, 2)
    p = Prompt("p0")
    out = rescale_reward(TrajectoryReward.constant(3.0), 0.0, 1.0, [p], sp)
    assert np.all(out.values(p, sp) == 0.5)


def test_rescale_hits_endpoints(abe):
    sp = get_space(abe, 3)
    p = Prompt("p0")
    r = TrajectoryReward.uniform_random(sp, [p], np.random.default_rng(9), -5, 5)
    out = rescale_reward(r, 0.0, 1.0, [p], sp).values(p, sp)
    assert abs(out.min()) <= 1e-12 and abs(out.max() - 1.0) <= 1e-12
