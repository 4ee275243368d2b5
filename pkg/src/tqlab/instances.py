"""Canonical and randomized problem instances."""

from __future__ import annotations

import numpy as np

from .mdp import Prompt, Vocabulary, get_space
from .policies import TokenPolicy
from .problem import Problem
from .rewards import TrajectoryReward


def instance_i0(baseline: TrajectoryReward | None = None) -> Problem:
    """Vocab {A, B, EOS}, T=3, one empty prompt, uniform pi_sft, r = count(A)/3."""
    vocab = Vocabulary.from_tokens(["A", "B", "EOS"])
    prompt = Prompt("p0")
    reward = TrajectoryReward.counting(vocab, {"A": 1 / 3}, name="countA/3")
    if baseline is None:
        baseline = TrajectoryReward.counting(vocab, {"B": 1 / 3}, name="countB/3")
    return Problem(vocab, 3, [prompt], TokenPolicy.uniform(vocab, 3, name="uniform"), reward, baseline,
                   r_max=1.0, name="I0")


def random_problem(
    rng: np.random.Generator,
    vocab_size: int,
    horizon: int,
    concentration: float = 1.0,
    n_prompts: int = 1,
    name: str = "random",
) -> Problem:
    """Dirichlet pi_sft at every state, i.i.d. U[0, 1] target and baseline reward tables."""
    vocab = Vocabulary.letters(vocab_size - 1)
    prompts = [Prompt(f"p{i}") for i in range(n_prompts)]
    space = get_space(vocab, horizon)
    pi_sft = TokenPolicy.dirichlet(vocab, horizon, prompts, concentration, rng, name="pi_sft")
    reward = TrajectoryReward.uniform_random(space, prompts, rng, name="r")
    baseline = TrajectoryReward.uniform_random(space, prompts, rng, name="r_bl")
    return Problem(vocab, horizon, prompts, pi_sft, reward, baseline, r_max=1.0, name=name)


def random_suite(seed: int, n: int, vocab_range=(2, 6), horizon_range=(1, 5), betas=(0.1, 0.5, 1.0),
                 alphas=(0.5, 1.0, 2.0), concentration: float = 1.0):
    """``n`` seeded (problem, beta, alpha) triples; instance ``i`` depends only on (seed, i)."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        v = int(rng.integers(vocab_range[0], vocab_range[1] + 1))
        t = int(rng.integers(horizon_range[0], horizon_range[1] + 1))
        beta = float(rng.choice(betas))
        alpha = float(rng.choice(alphas))
        out.append((random_problem(rng, v, t, concentration, name=f"rand{i}"), beta, alpha))
    return out
