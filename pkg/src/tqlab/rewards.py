"""Trajectory rewards, the EOS-gated token reward and Bradley-Terry fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .mdp import Prompt, Trajectory, TrajectorySpace, Vocabulary, get_space

log = logging.getLogger(__name__)

BOUND_TOL = 1e-12


class RewardBoundsError(ValueError):
    pass


class TrajectoryReward:
    """r(x, y) evaluated on prompt + EOS-free response content.

    ``fn(prompt, content) -> float``.  When ``bounds`` is set every enumerated
    response is checked against it the first time a prompt is materialized.
    ``forced_value``, if not None, replaces the reward of responses that hit
    the horizon without emitting EOS.
    """

    def __init__(
        self,
        fn: Callable[[Prompt, tuple[int, ...]], float],
        bounds: tuple[float, float] | None = (0.0, 1.0),
        name: str = "",
        forced_value: float | None = None,
        meta: dict | None = None,
    ):
        self.fn = fn
        self.bounds = bounds
        self.name = name
        self.forced_value = forced_value
        self.meta = dict(meta or {})
        self._cache: dict[tuple[str, int, int], np.ndarray] = {}

    @property
    def r_max(self) -> float | None:
        return None if self.bounds is None else self.bounds[1]

    def __call__(self, prompt: Prompt, content) -> float:
        return float(self.fn(prompt, tuple(content)))

    def values(self, prompt: Prompt, space: TrajectorySpace) -> np.ndarray:
        """Reward of every trajectory in ``space`` (read-only array)."""
        key = (prompt.id, id(space), space.size)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        vals = np.array([self(prompt, c) for c in space.contents], dtype=float)
        if self.forced_value is not None:
            vals[space.forced] = self.forced_value
        if not np.all(np.isfinite(vals)):
            raise RewardBoundsError(f"reward {self.name!r} produced non-finite values")
        if self.bounds is not None:
            lo, hi = self.bounds
            if vals.min() < lo - BOUND_TOL or vals.max() > hi + BOUND_TOL:
                raise RewardBoundsError(
                    f"reward {self.name!r} range [{vals.min()}, {vals.max()}] outside [{lo}, {hi}]"
                )
        vals.setflags(write=False)
        self._cache[key] = vals
        return vals

    def check(self, prompts: Sequence[Prompt], space: TrajectorySpace) -> "TrajectoryReward":
        for prompt in prompts:
            self.values(prompt, space)
        return self

    # --- constructors -------------------------------------------------
    @classmethod
    def counting(cls, vocab: Vocabulary, weights: dict[str, float], bounds=(0.0, 1.0), name: str = ""):
        """Weighted token counts, e.g. ``{"A": 1/3}`` counts A's scaled by 1/3."""
        w = np.zeros(vocab.size)
        for tok, val in weights.items():
            w[vocab.index(tok)] = val

        def fn(prompt, content):
            return float(sum(w[t] for t in content))

        return cls(fn, bounds, name or "count(" + ",".join(f"{k}:{v:g}" for k, v in weights.items()) + ")",
                   meta={"kind": "count", "weights": dict(weights)})

    @classmethod
    def constant(cls, c: float, bounds=None, name: str = ""):
        return cls(lambda prompt, content: c, bounds, name or f"const({c:g})", meta={"kind": "constant", "value": c})

    @classmethod
    def from_arrays(cls, space: TrajectorySpace, arrays: dict[str, np.ndarray], bounds=(0.0, 1.0),
                    name: str = "table", meta: dict | None = None):
        """Tabular reward: one value per trajectory of ``space`` for each prompt id."""
        arrays = {pid: np.asarray(a, dtype=float).copy() for pid, a in arrays.items()}
        for pid, a in arrays.items():
            if a.shape != (space.size,):
                raise ValueError(f"reward table for {pid!r} has shape {a.shape}, expected ({space.size},)")

        def fn(prompt, content):
            try:
                return arrays[prompt.id][space.index[content]]
            except KeyError:
                raise ValueError(f"no reward entry for {(prompt.id, content)!r}") from None

        reward = cls(fn, bounds, name, meta={"kind": "table", **(meta or {})})
        reward.tables = arrays
        return reward

    @classmethod
    def from_mapping(cls, vocab, horizon, mapping: dict[tuple[str, tuple[int, ...]], float], prompts,
                     default: float | None = None, bounds=(0.0, 1.0), name: str = "table"):
        space = get_space(vocab, horizon)
        arrays = {}
        for prompt in prompts:
            a = np.empty(space.size)
            for i, c in enumerate(space.contents):
                val = mapping.get((prompt.id, c), default)
                if val is None:
                    raise ValueError(f"reward table missing response {vocab.render(c)!r} for prompt {prompt.id!r}")
                a[i] = val
            arrays[prompt.id] = a
        return cls.from_arrays(space, arrays, bounds, name)

    @classmethod
    def uniform_random(cls, space: TrajectorySpace, prompts, rng: np.random.Generator, lo=0.0, hi=1.0,
                       name: str = "random"):
        arrays = {p.id: rng.uniform(lo, hi, size=space.size) for p in prompts}
        return cls.from_arrays(space, arrays, (lo, hi), name)


def token_reward(reward: TrajectoryReward, vocab: Vocabulary, prompt: Prompt, prefix, token: int) -> float:
    """Zero for every token except EOS, which pays r(x, prefix)."""
    token = vocab.check(token)
    if token != vocab.eos:
        return 0.0
    return reward(prompt, tuple(prefix))


def trajectory_return(reward: TrajectoryReward, vocab: Vocabulary, prompt: Prompt, traj: Trajectory) -> float:
    """Sum of token rewards along ``traj``; equal to r on its content."""
    total = 0.0
    resp = traj.response
    for t, tok in enumerate(resp):
        if t == len(resp) - 1 and traj.forced_eos and reward.forced_value is not None:
            total += reward.forced_value
        else:
            total += token_reward(reward, vocab, prompt, resp[:t], tok)
    return total


# --- Bradley-Terry ---------------------------------------------------------


def bt_preference_prob(reward: TrajectoryReward, prompt: Prompt, y1, y2) -> float:
    """P(y1 preferred to y2) = sigmoid(r(y1) - r(y2))."""
    y1 = y1.content if isinstance(y1, Trajectory) else tuple(y1)
    y2 = y2.content if isinstance(y2, Trajectory) else tuple(y2)
    return float(expit(reward(prompt, y1) - reward(prompt, y2)))


@dataclass
class PreferenceDataset:
    """Comparisons (prompt, preferred, dispreferred) stored as trajectory indices.

    ``weights`` default to one per record; fractional weights encode
    expected (noise-free) labels.
    """

    space: TrajectorySpace
    prompt_ids: list[str]
    winners: np.ndarray
    losers: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.winners = np.asarray(self.winners, dtype=np.int64)
        self.losers = np.asarray(self.losers, dtype=np.int64)
        if self.weights is None:
            self.weights = np.ones(len(self.winners))
        self.weights = np.asarray(self.weights, dtype=float)
        if not (len(self.prompt_ids) == len(self.winners) == len(self.losers) == len(self.weights)):
            raise ValueError("dataset columns differ in length")
        if np.any(self.winners == self.losers):
            raise ValueError("a record compares a response with itself")

    def __len__(self):
        return len(self.winners)

    @classmethod
    def from_records(cls, space: TrajectorySpace, records) -> "PreferenceDataset":
        """``records``: iterable of (prompt_id, winner_content, loser_content[, weight])."""
        pids, w, l, wt = [], [], [], []
        for rec in records:
            pid, yw, yl = rec[:3]
            pids.append(pid)
            w.append(space.node_of(yw))
            l.append(space.node_of(yl))
            wt.append(rec[3] if len(rec) > 3 else 1.0)
        return cls(space, pids, w, l, wt)

    def prompt_order(self) -> list[str]:
        return sorted(set(self.prompt_ids))


def _stack(params: dict[str, np.ndarray], dataset: PreferenceDataset):
    order = sorted(params)
    offset = {pid: k * dataset.space.size for k, pid in enumerate(order)}
    flat = np.concatenate([np.asarray(params[pid], dtype=float) for pid in order])
    shift = np.array([offset[p] for p in dataset.prompt_ids], dtype=np.int64)
    return order, flat, dataset.winners + shift, dataset.losers + shift


def bt_nll_loss(params: dict[str, np.ndarray], dataset: PreferenceDataset) -> float:
    """Weighted mean of -log sigmoid(r(y_w) - r(y_l))."""
    if len(dataset) == 0:
        raise ValueError("empty preference dataset")
    _, flat, wi, li = _stack(params, dataset)
    margin = flat[wi] - flat[li]
    return float(-(dataset.weights * log_expit(margin)).sum() / dataset.weights.sum())


def bt_nll_grad(params: dict[str, np.ndarray], dataset: PreferenceDataset) -> dict[str, np.ndarray]:
    if len(dataset) == 0:
        raise ValueError("empty preference dataset")
    order, flat, wi, li = _stack(params, dataset)
    margin = flat[wi] - flat[li]
    g = dataset.weights * (expit(margin) - 1.0) / dataset.weights.sum()
    grad = np.zeros_like(flat)
    np.add.at(grad, wi, g)
    np.add.at(grad, li, -g)
    n = dataset.space.size
    return {pid: grad[k * n:(k + 1) * n] for k, pid in enumerate(order)}


def fit_reward_bt(
    dataset: PreferenceDataset,
    steps: int = 2000,
    learning_rate: float = 10.0,
    seed: int = 0,
    r_max: float = 1.0,
) -> TrajectoryReward:
    """Full-batch gradient descent on the BT loss from an all-zero table.

    The returned reward is the fitted table mapped affinely onto [0, r_max];
    the raw table and the affine map are kept in ``meta``.
    """
    space = dataset.space
    params = {pid: np.zeros(space.size) for pid in dataset.prompt_order()}
    loss = bt_nll_loss(params, dataset) if len(dataset) else float("nan")
    for _ in range(steps):
        grad = bt_nll_grad(params, dataset)
        for pid in params:
            params[pid] = params[pid] - learning_rate * grad[pid]
        loss = bt_nll_loss(params, dataset)
        if not np.isfinite(loss):
            raise FloatingPointError("BT fit diverged (non-finite loss)")
    raw = TrajectoryReward.from_arrays(space, params, bounds=None, name="bt_raw")
    prompts = [Prompt(pid) for pid in params]
    fitted = rescale_reward(raw, 0.0, r_max, prompts, space)
    fitted.name = "bt_fit"
    fitted.meta.update({"kind": "bt_fit", "steps": steps, "learning_rate": learning_rate, "seed": seed,
                        "final_loss": loss, "raw": {pid: a.tolist() for pid, a in params.items()}})
    fitted.raw_tables = params
    return fitted


def generate_bt_dataset(
    truth: TrajectoryReward,
    prompts: Sequence[Prompt],
    space: TrajectorySpace,
    n: int,
    rng: np.random.Generator,
    labels: str = "bernoulli",
    pair_probs: dict[str, np.ndarray] | None = None,
) -> PreferenceDataset:
    """Synthetic comparisons under the BT model of ``truth``.

    Pairs of distinct responses are drawn independently from ``pair_probs``
    (uniform over the space by default).  ``labels="bernoulli"`` draws one
    preference per pair; ``labels="expected"`` emits both orderings weighted
    by their BT probabilities, i.e. noise-free labels.
    """
    if labels not in ("bernoulli", "expected"):
        raise ValueError(f"unknown label mode {labels!r}")
    pids, win, lose, wts = [], [], [], []
    for k in range(n):
        prompt = prompts[k % len(prompts)]
        p = None if pair_probs is None else pair_probs[prompt.id]
        i, j = rng.choice(space.size, size=2, replace=False, p=p)
        r = truth.values(prompt, space)
        p_ij = float(expit(r[i] - r[j]))
        if labels == "bernoulli":
            a, b = (i, j) if rng.random() < p_ij else (j, i)
            pids.append(prompt.id); win.append(a); lose.append(b); wts.append(1.0)
        else:
            pids += [prompt.id, prompt.id]
            win += [i, j]; lose += [j, i]; wts += [p_ij, 1.0 - p_ij]
    return PreferenceDataset(space, pids, win, lose, wts)


def rescale_reward(reward: TrajectoryReward, lo: float, hi: float, prompts: Sequence[Prompt],
                   space: TrajectorySpace) -> TrajectoryReward:
    """Affine map of the enumerated range (over all prompts) onto [lo, hi].

    A constant reward maps to the midpoint.
    """
    arrays = {p.id: np.array(reward.values(p, space)) for p in prompts}
    vmin = min(a.min() for a in arrays.values())
    vmax = max(a.max() for a in arrays.values())
    if vmax - vmin <= 0:
        scale, offset = 0.0, (lo + hi) / 2
    else:
        scale = (hi - lo) / (vmax - vmin)
        offset = lo - scale * vmin
    out = {pid: np.clip(scale * a + offset, lo, hi) if scale else np.full_like(a, offset) for pid, a in arrays.items()}
    meta = {"rescaled_from": reward.name, "scale": scale, "offset": offset}
    return TrajectoryReward.from_arrays(space, out, bounds=(lo, hi), name=f"rescaled({reward.name})", meta=meta)
