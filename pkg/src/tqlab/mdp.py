"""Finite token-level MDP: vocabulary, decode states, trajectories, enumeration.

A response is a sequence of non-EOS tokens of length at most ``horizon``
followed by EOS.  Responses that reach the horizon get EOS appended without
a decision being made (``forced_eos``).  Because of this, complete
trajectories are in one-to-one correspondence with their EOS-free content,
and the same content tuples double as the nodes of the prefix tree.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

ENUM_CAP_ENV = "TQLAB_ENUM_CAP"
DEFAULT_ENUM_CAP = 10**6


class EnumerationCapExceeded(RuntimeError):
    pass


class HorizonError(ValueError):
    pass


def enumeration_cap() -> int:
    raw = os.environ.get(ENUM_CAP_ENV)
    return int(raw) if raw else DEFAULT_ENUM_CAP


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    eos_index: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least two tokens (one of them EOS)")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError(f"duplicate token identifiers in {self.tokens}")
        if not 0 <= self.eos_index < len(self.tokens):
            raise ValueError(f"eos_index {self.eos_index} out of range")

    @classmethod
    def from_tokens(cls, tokens, eos: str = "EOS") -> "Vocabulary":
        tokens = tuple(tokens)
        if eos not in tokens:
            raise ValueError(f"EOS token {eos!r} missing from vocabulary")
        return cls(tokens, tokens.index(eos))

    @classmethod
    def letters(cls, n_content: int) -> "Vocabulary":
        """``n_content`` tokens A, B, ... followed by EOS."""
        return cls(tuple(chr(ord("A") + i) for i in range(n_content)) + ("EOS",), n_content)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos(self) -> int:
        return self.eos_index

    @property
    def content_tokens(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.size) if i != self.eos_index)

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise ValueError(f"unknown token {token!r}") from None

    def check(self, token: int) -> int:
        if not isinstance(token, (int, np.integer)) or not 0 <= token < self.size:
            raise ValueError(f"token {token!r} outside vocabulary of size {self.size}")
        return int(token)

    def encode(self, text) -> tuple[int, ...]:
        if isinstance(text, str):
            text = text.split()
        return tuple(self.index(t) for t in text)

    def render(self, seq) -> str:
        return " ".join(self.tokens[i] for i in seq)


@dataclass(frozen=True)
class Prompt:
    id: str
    tokens: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))


@dataclass(frozen=True)
class Trajectory:
    response: tuple[int, ...]
    forced_eos: bool = False

    @property
    def content(self) -> tuple[int, ...]:
        """Response without its terminal EOS."""
        return self.response[:-1]

    def __len__(self):
        return len(self.response)


@dataclass(frozen=True)
class DecodeState:
    prompt: Prompt
    vocab: Vocabulary = field(repr=False)
    horizon: int
    partial: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "partial", tuple(self.partial))
        if self.vocab.eos in self.partial:
            raise ValueError("a decode state cannot contain EOS")
        if len(self.partial) > self.horizon:
            raise HorizonError(f"partial of length {len(self.partial)} exceeds horizon {self.horizon}")

    @property
    def step(self) -> int:
        return len(self.partial)

    @property
    def key(self) -> tuple[str, tuple[int, ...]]:
        return (self.prompt.id, self.partial)

    @property
    def at_horizon(self) -> bool:
        return self.step == self.horizon


def initial_state(prompt: Prompt, vocab: Vocabulary, horizon: int) -> DecodeState:
    if horizon < 0:
        raise HorizonError("horizon must be non-negative")
    return DecodeState(prompt, vocab, horizon, ())


def advance(state: DecodeState, token: int) -> DecodeState | Trajectory:
    token = state.vocab.check(token)
    if state.at_horizon:
        raise HorizonError("state already at the horizon; use force_terminate")
    if token == state.vocab.eos:
        return Trajectory(state.partial + (token,), forced_eos=False)
    return DecodeState(state.prompt, state.vocab, state.horizon, state.partial + (token,))


def force_terminate(state: DecodeState) -> Trajectory:
    if not state.at_horizon:
        raise HorizonError(f"force_terminate at step {state.step} < horizon {state.horizon}")
    return Trajectory(state.partial + (state.vocab.eos,), forced_eos=True)


def trajectory_count(vocab_size: int, horizon: int) -> int:
    m = vocab_size - 1
    return sum(m**length for length in range(horizon + 1))


class TrajectorySpace:
    """Prefix tree over all responses for one (vocabulary, horizon) pair.

    Node ``i`` is the content tuple ``contents[i]``; it is also the trajectory
    ``contents[i] + (EOS,)``.  Ordering is shortlex by token index.

    Arrays:
      lengths[i]      content length of node i
      tokens[i, d]    d-th content token (-1 past the end)
      anc[i, d]       node id of contents[i][:d] (-1 when d > lengths[i])
      children[i, z]  node id of contents[i] + (z,) (-1 for EOS or at the horizon)
    """

    def __init__(self, vocab: Vocabulary, horizon: int, cap: int | None = None):
        if horizon < 0:
            raise HorizonError("horizon must be non-negative")
        cap = enumeration_cap() if cap is None else cap
        n = trajectory_count(vocab.size, horizon)
        if n > cap:
            raise EnumerationCapExceeded(f"{n} trajectories exceed enumeration cap {cap}")
        self.vocab = vocab
        self.horizon = horizon
        content = vocab.content_tokens
        self.contents: list[tuple[int, ...]] = [
            seq for length in range(horizon + 1) for seq in itertools.product(content, repeat=length)
        ]
        self.index = {c: i for i, c in enumerate(self.contents)}
        n = len(self.contents)
        self.size = n
        self.lengths = np.array([len(c) for c in self.contents], dtype=np.int64)
        self.tokens = np.full((n, max(horizon, 1)), -1, dtype=np.int64)
        self.anc = np.full((n, horizon + 1), -1, dtype=np.int64)
        self.children = np.full((n, vocab.size), -1, dtype=np.int64)
        for i, c in enumerate(self.contents):
            self.tokens[i, : len(c)] = c
            for d in range(len(c) + 1):
                self.anc[i, d] = self.index[c[:d]]
            if len(c) < horizon:
                for z in content:
                    self.children[i, z] = self.index[c + (z,)]
        self.decision = self.lengths < horizon
        self.forced = ~self.decision
        rows, cols = np.nonzero(self.anc >= 0)
        # (trajectory, ancestor) pairs, used for grouped reductions over subtrees
        self.pair_traj = rows
        self.pair_node = self.anc[rows, cols]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.contents[i] + (self.vocab.eos,), forced_eos=bool(self.forced[i]))

    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(self.size)]

    def node_of(self, partial) -> int:
        try:
            return self.index[tuple(partial)]
        except KeyError:
            raise ValueError(f"{partial!r} is not a node of this space") from None

    def traj_index(self, traj: Trajectory) -> int:
        if not traj.response or traj.response[-1] != self.vocab.eos:
            raise ValueError("trajectory must end in EOS")
        i = self.node_of(traj.content)
        if bool(self.forced[i]) != traj.forced_eos:
            raise ValueError("forced_eos flag inconsistent with horizon")
        return i

    def path_logprob(self, log_table: np.ndarray) -> np.ndarray:
        """Trajectory log-probabilities from a node x token log-probability table.

        Forced-EOS steps contribute nothing.
        """
        out = np.zeros(self.size)
        for d in range(self.horizon):
            live = self.lengths > d
            out[live] += log_table[self.anc[live, d], self.tokens[live, d]]
        dec = self.decision
        out[dec] += log_table[np.nonzero(dec)[0], self.vocab.eos]
        return out

    def subtree_logsumexp(self, values: np.ndarray) -> np.ndarray:
        """log sum_{trajectories under node} exp(values), per node."""
        return grouped_logsumexp(values[self.pair_traj], self.pair_node, self.size)

    def subtree_max(self, values: np.ndarray) -> np.ndarray:
        out = np.full(self.size, -np.inf)
        np.maximum.at(out, self.pair_node, values[self.pair_traj])
        return out


def grouped_logsumexp(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    m = np.full(n_groups, -np.inf)
    np.maximum.at(m, groups, values)
    shift = np.where(np.isfinite(m), m, 0.0)
    s = np.zeros(n_groups)
    np.add.at(s, groups, np.exp(values - shift[groups]))
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), shift + np.log(s), -np.inf)


@lru_cache(maxsize=64)
def _cached_space(vocab: Vocabulary, horizon: int, cap: int) -> TrajectorySpace:
    return TrajectorySpace(vocab, horizon, cap)


def get_space(vocab: Vocabulary, horizon: int) -> TrajectorySpace:
    return _cached_space(vocab, horizon, enumeration_cap())


def enumerate_trajectories(prompt: Prompt, vocab: Vocabulary, horizon: int) -> list[Trajectory]:
    """Every complete response, shortlex by token index.  The prompt does not
    change the tree shape; it is accepted for interface symmetry."""
    del prompt
    return get_space(vocab, horizon).trajectories()
