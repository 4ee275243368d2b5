import numpy as np
import pytest

from tqlab.instances import instance_i0
from tqlab.mdp import DecodeState, Prompt, Vocabulary


@pytest.fixture
def i0():
    return instance_i0()


@pytest.fixture
def abe():
    return Vocabulary.from_tokens(["A", "B", "EOS"])


def state(problem, partial=(), prompt=None):
    prompt = prompt or problem.prompts[0]
    return DecodeState(prompt, problem.vocab, problem.horizon, tuple(partial))


def brute_conditional_mean(policy_probs, values, space, partial, z=None):
    """Reference E[values | trajectory extends partial (+ z)], by filtering the enumeration."""
    prefix = tuple(partial) + (() if z is None else (z,))
    mask = np.array([c[:len(prefix)] == prefix for c in space.contents])
    if z == space.vocab.eos:
        mask = np.array([c == tuple(partial) for c in space.contents])
    w = policy_probs * mask
    return float(np.dot(w, values) / w.sum())


@pytest.fixture
def p0():
    return Prompt("p0")
