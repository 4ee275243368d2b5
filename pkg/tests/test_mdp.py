import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tqlab.mdp import (
    DecodeState,
    EnumerationCapExceeded,
    HorizonError,
    Prompt,
    Trajectory,
    TrajectorySpace,
    Vocabulary,
    advance,
    enumerate_trajectories,
    force_terminate,
    get_space,
    initial_state,
    trajectory_count,
)


def test_advance_appends_token(abe):
    s = initial_state(Prompt("p"), abe, 3)
    s1 = advance(s, abe.index("A"))
    assert isinstance(s1, DecodeState)
    assert s1.partial == (0,) and s1.step == 1


def test_advance_eos_completes(abe):
    s = DecodeState(Prompt("p"), abe, 3, (0,))
    t = advance(s, abe.eos)
    assert t == Trajectory((0, abe.eos), forced_eos=False)


def test_advance_to_horizon_needs_finalization(abe):
    s = DecodeState(Prompt("p"), abe, 3, (0, 1))
    s3 = advance(s, 0)
    assert s3.partial == (0, 1, 0) and s3.at_horizon
    with pytest.raises(HorizonError):
        advance(s3, 0)


def test_advance_rejects_unknown_token(abe):
    with pytest.raises(ValueError):
        advance(initial_state(Prompt("p"), abe, 3), 7)


@pytest.mark.parametrize("partial", [(0, 0, 0), (1, 1, 1)])
def test_force_terminate(abe, partial):
    t = force_terminate(DecodeState(Prompt("p"), abe, 3, partial))
    assert t.response == partial + (abe.eos,) and t.forced_eos


def test_force_terminate_at_zero_horizon(abe):
    t = force_terminate(initial_state(Prompt("p"), abe, 0))
    assert t.response == (abe.eos,) and t.forced_eos


def test_force_terminate_before_horizon_fails(abe):
    with pytest.raises(HorizonError):
        force_terminate(DecodeState(Prompt("p"), abe, 3, (0,)))


def test_enumeration_two_tokens_horizon_one():
    v = Vocabulary.letters(1)
    ts = enumerate_trajectories(Prompt("p"), v, 1)
    assert [v.render(t.response) for t in ts] == ["EOS", "A EOS"]
    assert [t.forced_eos for t in ts] == [False, True]


def test_enumeration_three_tokens_horizon_two(abe):
    ts = enumerate_trajectories(Prompt("p"), abe, 2)
    got = [(abe.render(t.response), t.forced_eos) for t in ts]
    assert got == [("EOS", False), ("A EOS", False), ("B EOS", False), ("A A EOS", True),
                   ("A B EOS", True), ("B A EOS", True), ("B B EOS", True)]


def test_enumeration_zero_horizon(abe):
    ts = enumerate_trajectories(Prompt("p"), abe, 0)
    assert ts == [Trajectory((abe.eos,), True)]


@given(st.integers(2, 6), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_enumeration_count_formula(m, horizon):
    v = Vocabulary.letters(m - 1)
    expected = sum((m - 1) ** l for l in range(horizon)) + (m - 1) ** horizon
    assert trajectory_count(m, horizon) == expected
    ts = enumerate_trajectories(Prompt("p"), v, horizon)
    assert len(ts) == expected
    assert len(set(ts)) == expected
    for t in ts:
        assert t.response[-1] == v.eos and v.eos not in t.response[:-1]
        assert len(t.response) <= horizon + 1
        assert t.forced_eos == (len(t.response) == horizon + 1)


def test_enumeration_matches_naive_product():
    v = Vocabulary.letters(2)
    naive = set()
    for length in range(4):
        for content in itertools.product(range(2), repeat=length):
            naive.add(content)
    assert {t.content for t in enumerate_trajectories(Prompt("p"), v, 3)} == naive


def test_enumeration_cap(monkeypatch):
    monkeypatch.setenv("TQLAB_ENUM_CAP", "10")
    with pytest.raises(EnumerationCapExceeded):
        TrajectorySpace(Vocabulary.letters(3), 3)


def test_space_tree_structure(abe):
    sp = get_space(abe, 3)
    for i, c in enumerate(sp.contents):
        assert sp.node_of(c) == i
        for z in range(2):
            child = sp.children[i, z]
            if len(c) < 3:
                assert sp.contents[child] == c + (z,)
            else:
                assert child == -1
    assert sp.decision.sum() == 1 + 2 + 4


def test_vocabulary_validation():
    with pytest.raises(ValueError):
        Vocabulary.from_tokens(["A", "A", "EOS"])
    with pytest.raises(ValueError):
        Vocabulary.from_tokens(["A", "B"])
