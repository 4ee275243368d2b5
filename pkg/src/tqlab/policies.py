"""Token-level conditionals, trajectory-level distributions and conversions."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .mdp import DecodeState, Prompt, Trajectory, TrajectorySpace, Vocabulary, get_space

NORM_TOL = 1e-9


class UnreachablePrefixError(ValueError):
    """Conditional requested on a prefix that carries zero probability mass."""


def _log(p) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=float))


def _check_vector(p: np.ndarray, where) -> None:
    if p.ndim != 1 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"invalid probability vector at {where}: {p}")
    if abs(p.sum() - 1.0) > NORM_TOL:
        raise ValueError(f"probability vector at {where} sums to {p.sum()!r}")


class TokenPolicy:
    """pi(. | prompt, partial) over the vocabulary.

    Either tabular (one node x token log-probability matrix per prompt id, rows
    of unreachable or horizon nodes are NaN) or a ``rule(prompt, partial) ->
    probability vector``.  Immutable after construction.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        horizon: int,
        tables: dict[str, np.ndarray] | None = None,
        rule: Callable[[Prompt, tuple[int, ...]], np.ndarray] | None = None,
        name: str = "",
    ):
        if (tables is None) == (rule is None):
            raise ValueError("give exactly one of tables or rule")
        self.vocab = vocab
        self.horizon = horizon
        self.space = get_space(vocab, horizon)
        self.rule = rule
        self.name = name
        self._tables = {}
        for pid, table in (tables or {}).items():
            table = np.array(table, dtype=float)
            table.setflags(write=False)
            self._tables[pid] = table

    # --- constructors -------------------------------------------------
    @classmethod
    def uniform(cls, vocab: Vocabulary, horizon: int, name: str = "uniform") -> "TokenPolicy":
        vec = np.full(vocab.size, 1.0 / vocab.size)
        return cls(vocab, horizon, rule=lambda prompt, partial: vec, name=name)

    @classmethod
    def from_mapping(cls, vocab, horizon, mapping, prompts, name: str = "") -> "TokenPolicy":
        """``mapping[(prompt_id, partial)] -> probability vector``."""
        space = get_space(vocab, horizon)
        tables = {}
        for prompt in prompts:
            table = np.full((space.size, vocab.size), np.nan)
            for i in np.nonzero(space.decision)[0]:
                key = (prompt.id, space.contents[i])
                if key in mapping:
                    p = np.asarray(mapping[key], dtype=float)
                    _check_vector(p, key)
                    table[i] = _log(p)
            tables[prompt.id] = table
        return cls(vocab, horizon, tables=tables, name=name)

    @classmethod
    def dirichlet(cls, vocab, horizon, prompts, concentration: float, rng: np.random.Generator,
                  name: str = "dirichlet") -> "TokenPolicy":
        """Independent Dirichlet draw at every decision state, in shortlex order."""
        space = get_space(vocab, horizon)
        tables = {}
        for prompt in prompts:
            table = np.full((space.size, vocab.size), np.nan)
            dec = np.nonzero(space.decision)[0]
            draws = rng.dirichlet(np.full(vocab.size, concentration), size=len(dec))
            # guard against exact zeros from extreme concentrations
            draws = np.maximum(draws, 1e-300)
            draws /= draws.sum(axis=1, keepdims=True)
            table[dec] = np.log(draws)
            tables[prompt.id] = table
        return cls(vocab, horizon, tables=tables, name=name)

    @classmethod
    def from_log_table(cls, vocab, horizon, prompt_id: str, table: np.ndarray, name: str = ""):
        return cls(vocab, horizon, tables={prompt_id: table}, name=name)

    # --- access -------------------------------------------------------
    def _row(self, prompt: Prompt, partial: tuple[int, ...]) -> np.ndarray:
        if len(partial) >= self.horizon:
            raise ValueError(f"no decision at horizon state {partial!r}")
        if self.rule is not None:
            p = np.asarray(self.rule(prompt, tuple(partial)), dtype=float)
            _check_vector(p, (prompt.id, partial))
            return _log(p)
        try:
            table = self._tables[prompt.id]
        except KeyError:
            raise ValueError(f"policy {self.name!r} has no table for prompt {prompt.id!r}") from None
        row = table[self.space.node_of(partial)]
        if np.isnan(row).any():
            raise UnreachablePrefixError(f"policy {self.name!r} undefined at {(prompt.id, partial)!r}")
        return row

    def log_probs(self, state: DecodeState) -> np.ndarray:
        return self._row(state.prompt, state.partial)

    def probs(self, state: DecodeState) -> np.ndarray:
        return np.exp(self.log_probs(state))

    def log_table(self, prompt: Prompt) -> np.ndarray:
        """Node x token log-probabilities for every decision node of ``prompt``."""
        if self.rule is None:
            try:
                return self._tables[prompt.id]
            except KeyError:
                raise ValueError(f"policy {self.name!r} has no table for prompt {prompt.id!r}") from None
        table = np.full((self.space.size, self.vocab.size), np.nan)
        for i in np.nonzero(self.space.decision)[0]:
            table[i] = self._row(prompt, self.space.contents[i])
        return table

    def to_dict(self, prompts) -> dict:
        out = {}
        for prompt in prompts:
            table = self.log_table(prompt)
            rows = {}
            for i in np.nonzero(self.space.decision)[0]:
                if not np.isnan(table[i]).any():
                    rows[self.vocab.render(self.space.contents[i])] = np.exp(table[i]).tolist()
            out[prompt.id] = rows
        return {"name": self.name, "tokens": list(self.vocab.tokens), "horizon": self.horizon, "tables": out}


@dataclass(frozen=True)
class TrajectoryPolicy:
    """rho(. | prompt) stored as log-probabilities over the space's trajectories."""

    prompt: Prompt
    space: TrajectorySpace
    logp: np.ndarray
    name: str = ""

    def __post_init__(self):
        logp = np.array(self.logp, dtype=float)
        if logp.shape != (self.space.size,):
            raise ValueError("logp must have one entry per trajectory")
        if np.any(np.isnan(logp)) or np.any(logp == np.inf):
            raise ValueError("logp must be finite or -inf")
        total = np.exp(logp).sum()
        if abs(total - 1.0) > NORM_TOL:
            raise ValueError(f"trajectory policy sums to {total!r}")
        logp.setflags(write=False)
        object.__setattr__(self, "logp", logp)

    @classmethod
    def from_unnormalized(cls, prompt, space, log_weights, name: str = "") -> tuple["TrajectoryPolicy", float]:
        """Normalize in log-space; returns the policy and log of the normalizer."""
        log_weights = np.asarray(log_weights, dtype=float)
        m = np.max(log_weights)
        log_z = m + np.log(np.exp(log_weights - m).sum())
        return cls(prompt, space, log_weights - log_z, name), float(log_z)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)

    def prob(self, traj: Trajectory) -> float:
        return float(np.exp(self.logp[self.space.traj_index(traj)]))

    @cached_property
    def subtree_logmass(self) -> np.ndarray:
        """log of the probability that a response starts with each node's content."""
        return self.space.subtree_logsumexp(self.logp)

    def conditional_mean(self, values: np.ndarray) -> np.ndarray:
        """E[values | response extends node], per node; NaN on zero-mass nodes."""
        lm = self.subtree_logmass
        sp = self.space
        ok = np.isfinite(lm)
        w = np.exp(self.logp[sp.pair_traj] - np.where(ok, lm, 0.0)[sp.pair_node])
        out = np.zeros(sp.size)
        np.add.at(out, sp.pair_node, w * np.asarray(values, dtype=float)[sp.pair_traj])
        out[~ok] = np.nan
        return out

    def candidate_mean(self, values: np.ndarray) -> np.ndarray:
        """E[values | response extends [node, z]] as a node x token table.

        The EOS column is the value of the node's own trajectory; rows of
        horizon nodes and entries with zero conditioning mass are NaN.
        """
        sp = self.space
        node_mean = self.conditional_mean(values)
        out = np.full((sp.size, sp.vocab.size), np.nan)
        has = sp.children >= 0
        out[has] = node_mean[sp.children[has]]
        dec = sp.decision
        out[dec, sp.vocab.eos] = np.where(np.isfinite(self.logp[dec]), np.asarray(values, float)[dec], np.nan)
        return out

    def as_dict(self) -> dict[str, float]:
        vocab = self.space.vocab
        return {vocab.render(self.space.trajectory(i).response): float(p) for i, p in enumerate(self.probs)}


def trajectory_prob(policy: TokenPolicy, prompt: Prompt, traj: Trajectory) -> float:
    space = policy.space
    space.traj_index(traj)
    logp = 0.0
    for t, token in enumerate(traj.content):
        logp += policy._row(prompt, traj.content[:t])[token]
    if not traj.forced_eos:
        logp += policy._row(prompt, traj.content)[space.vocab.eos]
    return float(np.exp(logp))


def to_trajectory_policy(policy: TokenPolicy, prompt: Prompt) -> TrajectoryPolicy:
    space = policy.space
    table = policy.log_table(prompt)
    logp = space.path_logprob(np.nan_to_num(table, nan=-np.inf, neginf=-np.inf))
    return TrajectoryPolicy(prompt, space, logp, name=policy.name)


def induce_token_policy(rho: TrajectoryPolicy, name: str = "") -> TokenPolicy:
    """Token conditionals from suffix-mass ratios; zero-mass prefixes stay undefined."""
    sp = rho.space
    lm = rho.subtree_logmass
    table = np.full((sp.size, sp.vocab.size), np.nan)
    dec = np.nonzero(sp.decision & np.isfinite(lm))[0]
    kids = sp.children[dec]
    with np.errstate(invalid="ignore"):
        child_lm = np.where(kids >= 0, lm[np.maximum(kids, 0)], -np.inf)
    child_lm[:, sp.vocab.eos] = rho.logp[dec]
    table[dec] = child_lm - lm[dec][:, None]
    return TokenPolicy(sp.vocab, sp.horizon, tables={rho.prompt.id: table}, name=name or rho.name)


def sample_token(policy: TokenPolicy, state: DecodeState, rng: np.random.Generator) -> int:
    """Inverse-CDF draw over the deterministic token order."""
    return sample_index(policy.probs(state), rng)


def sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    idx = min(idx, len(p) - 1)
    while p[idx] <= 0:  # u landed on the right edge of a zero-width interval
        idx -= 1
    return idx


def top_k_indices(log_p: np.ndarray, k: int) -> tuple[int, ...]:
    """k largest entries, ties to the lowest index."""
    if not 1 <= k <= len(log_p):
        raise ValueError(f"k={k} outside [1, {len(log_p)}]")
    order = np.lexsort((np.arange(len(log_p)), -np.asarray(log_p)))
    return tuple(int(i) for i in order[:k])


def top_k_tokens(policy: TokenPolicy, state: DecodeState, k: int) -> tuple[int, ...]:
    return top_k_indices(policy.log_probs(state), k)


def sample_k_tokens(policy: TokenPolicy, state: DecodeState, k: int, rng: np.random.Generator) -> tuple[int, ...]:
    """k distinct candidates drawn without replacement, proportional to pi."""
    p = policy.probs(state)
    if not 1 <= k <= len(p):
        raise ValueError(f"k={k} outside [1, {len(p)}]")
    support = int(np.count_nonzero(p > 0))
    picks = rng.choice(len(p), size=min(k, support), replace=False, p=p)
    return tuple(int(i) for i in picks)
