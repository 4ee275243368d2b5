"""Exact and Monte-Carlo action values: Q^pi, Q*, V*, V^rho."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import DecodeState, Prompt, TrajectorySpace
from .policies import TokenPolicy, TrajectoryPolicy
from .rewards import TrajectoryReward

EXACT = "exact-dp"


@dataclass(frozen=True)
class ScoreTable:
    """Values on (node, candidate token) pairs for one prompt; NaN where undefined."""

    prompt: Prompt
    space: TrajectorySpace
    values: np.ndarray
    provenance: str = EXACT

    def get(self, state: DecodeState, token: int) -> float:
        v = self.values[self.space.node_of(state.partial), token]
        if np.isnan(v):
            raise ValueError(f"score undefined at {(state.partial, token)!r}")
        return float(v)

    def rows(self):
        """(partial, token, value) for every defined entry, shortlex order."""
        sp = self.space
        for i in np.nonzero(sp.decision)[0]:
            for z in range(sp.vocab.size):
                v = self.values[i, z]
                if not np.isnan(v):
                    yield sp.contents[i], z, float(v)


def q_pi_table(policy: TokenPolicy, reward: TrajectoryReward, prompt: Prompt) -> ScoreTable:
    """Backward induction over the prefix tree."""
    sp = policy.space
    r = reward.values(prompt, sp)
    table = policy.log_table(prompt)
    v = np.where(sp.forced, r, np.nan)
    q = np.full((sp.size, sp.vocab.size), np.nan)
    eos = sp.vocab.eos
    for length in range(sp.horizon - 1, -1, -1):
        nodes = np.nonzero(sp.lengths == length)[0]
        kids = sp.children[nodes]
        qn = np.where(kids >= 0, v[np.maximum(kids, 0)], np.nan)
        qn[:, eos] = r[nodes]
        q[nodes] = qn
        p = np.exp(table[nodes])  # NaN rows (policy undefined) surface as NaN values
        with np.errstate(invalid="ignore"):
            v[nodes] = np.sum(np.where(p == 0, 0.0, p * qn), axis=1)
    return ScoreTable(prompt, sp, q, EXACT)


def q_pi_exact(policy: TokenPolicy, reward: TrajectoryReward, state: DecodeState, token: int) -> float:
    return q_pi_table(policy, reward, state.prompt).get(state, token)


def q_star_table(reward: TrajectoryReward, prompt: Prompt, space: TrajectorySpace) -> ScoreTable:
    """Best completion reward: deterministic transitions turn max_pi into a max over suffixes."""
    r = reward.values(prompt, space)
    best = space.subtree_max(r)
    q = np.full((space.size, space.vocab.size), np.nan)
    has = space.children >= 0
    q[has] = best[space.children[has]]
    q[space.decision, space.vocab.eos] = r[space.decision]
    return ScoreTable(prompt, space, q, EXACT)


def q_star_exact(reward: TrajectoryReward, state: DecodeState, token: int, space: TrajectorySpace | None = None) -> float:
    from .mdp import get_space

    space = space or get_space(state.vocab, state.horizon)
    return q_star_table(reward, state.prompt, space).get(state, token)


def rollout_nodes(prob_table: np.ndarray, space: TrajectorySpace, start: int, n: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Terminal node ids of ``n`` rollouts from node ``start`` (vectorized inverse-CDF)."""
    cur = np.full(n, start, dtype=np.int64)
    done = ~space.decision[cur]
    eos = space.vocab.eos
    while not done.all():
        live = np.nonzero(~done)[0]
        p = prob_table[cur[live]]
        cdf = np.cumsum(p, axis=1)
        u = rng.random(len(live)) * cdf[:, -1]
        tok = np.minimum((cdf <= u[:, None]).sum(axis=1), p.shape[1] - 1)
        stop = tok == eos
        done[live[stop]] = True
        go = live[~stop]
        cur[go] = space.children[cur[go], tok[~stop]]
        done[go] = ~space.decision[cur[go]]
    return cur


def q_mc(policy: TokenPolicy, reward: TrajectoryReward, state: DecodeState, token: int, n: int,
         rng: np.random.Generator) -> tuple[float, float]:
    """Mean of ``n`` rollout returns from (state, token) and its standard error."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sp = policy.space
    r = reward.values(state.prompt, sp)
    node = sp.node_of(state.partial)
    if token == sp.vocab.eos:
        return float(r[node]), 0.0
    child = sp.children[node, token]
    probs = np.exp(policy.log_table(state.prompt))
    ends = rollout_nodes(probs, sp, child, n, rng)
    return mean_and_se(r[ends])


def mean_and_se(vals: np.ndarray) -> tuple[float, float]:
    if np.all(vals == vals[0]):
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def v_star(reward: TrajectoryReward, prompt: Prompt, space: TrajectorySpace) -> float:
    return float(np.max(reward.values(prompt, space)))


def v_of(rho: TrajectoryPolicy, reward: TrajectoryReward) -> float:
    return float(np.dot(rho.probs, reward.values(rho.prompt, rho.space)))
