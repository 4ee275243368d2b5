"""Every decoder in the roster, from plain SFT sampling up to the two TQ* variants.

Step-wise decoders share one loop: pick candidates from a proposal policy,
score them, tilt an anchor policy by exp(score / alpha) on the candidate
set, then take the argmax (greedy) or sample.  In exact mode every score is
read from a table computed by enumeration; in Monte-Carlo mode scores come
from rollouts at the visited states.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import logsumexp

from .align import AlignedPolicy, transfer_policy, unnormalized_weights
from .mdp import DecodeState, Prompt, Trajectory, TrajectorySpace, initial_state, get_space
from .policies import TokenPolicy, UnreachablePrefixError, induce_token_policy, sample_index, top_k_indices
from .problem import Problem
from .rewards import TrajectoryReward
from .rng import RngStreams, as_generator
from .value import q_mc, q_pi_table, rollout_nodes

KINDS = ("sft", "best_of_n", "args", "cd_minus", "tq_direct", "tq_indirect")
STEP_KINDS = ("sft", "args", "cd_minus", "tq_direct", "tq_indirect")
MODES = ("exact", "mc")
POLICY_CHOICES = ("default", "sft", "target", "baseline", "transfer")

# default (candidate source, anchor) per decoder; 'target' is pi_DPO of direct transfer
_DEFAULTS = {
    "sft": ("sft", "sft"),
    "cd_minus": ("sft", "sft"),
    "tq_direct": ("target", "target"),
    "tq_indirect": ("baseline", "transfer"),
}


@dataclass(frozen=True)
class DecoderConfig:
    alpha: float = 1.0
    beta: float = 0.5
    k: int = 10
    n_rollouts: int = 1
    mode: str = "exact"
    greedy: bool = True
    anchor: str = "default"
    candidate_source: str = "default"
    candidate_sampling: str = "top"
    args_weight: float = 1.0
    args_base: str = "sft"
    n_best: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.n_rollouts < 1:
            raise ValueError(f"n_rollouts must be >= 1, got {self.n_rollouts}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.anchor not in POLICY_CHOICES or self.candidate_source not in POLICY_CHOICES:
            raise ValueError(f"anchor / candidate_source must be one of {POLICY_CHOICES}")
        if self.candidate_sampling not in ("top", "sample"):
            raise ValueError("candidate_sampling must be 'top' or 'sample'")
        if self.args_base not in ("sft", "target"):
            raise ValueError("args_base must be 'sft' or 'target'")
        if self.args_weight < 0:
            raise ValueError("args_weight must be non-negative")
        if self.n_best < 1:
            raise ValueError("n_best must be >= 1")

    def effective_k(self, vocab_size: int) -> int:
        return min(self.k, vocab_size)

    def roles(self, kind: str) -> tuple[str, str]:
        """(candidate source, anchor) policy names for ``kind``."""
        if kind == "args":
            cand, anchor = self.args_base, self.args_base
        else:
            cand, anchor = _DEFAULTS[kind]
        if self.candidate_source != "default":
            cand = self.candidate_source
        if self.anchor != "default":
            anchor = self.anchor
        return cand, anchor


class Score(NamedTuple):
    value: float
    se: float = 0.0


@dataclass(frozen=True)
class StepDistribution:
    partial: tuple[int, ...]
    candidates: tuple[int, ...]
    scores: dict[int, float]
    probs: np.ndarray
    log_normalizer: float

    def to_json(self) -> dict:
        return {
            "partial": list(self.partial),
            "candidates": list(self.candidates),
            "scores": {str(z): s for z, s in self.scores.items()},
            "probs": self.probs.tolist(),
            "log_normalizer": self.log_normalizer,
        }


@dataclass
class DecodeResult:
    trajectory: Trajectory
    steps: list[StepDistribution] = field(default_factory=list)


# --- scores --------------------------------------------------------------------


def _cond_node(space: TrajectorySpace, state: DecodeState, z: int) -> int:
    node = space.node_of(state.partial)
    if z == space.vocab.eos:
        return node
    child = int(space.children[node, z])
    if child < 0:
        raise ValueError(f"no candidate {z} at horizon state {state.partial!r}")
    return child


def tq_star_direct(state: DecodeState, z: int, rho_bl: AlignedPolicy, reward: TrajectoryReward,
                   config: DecoderConfig, rng=None) -> Score:
    """Expected reward of completions of [s, z] drawn from the aligned baseline."""
    sp = rho_bl.space
    r = reward.values(state.prompt, sp)
    if z == sp.vocab.eos:
        return Score(float(r[sp.node_of(state.partial)]))
    if config.mode == "exact":
        v = rho_bl.policy.candidate_mean(r)[sp.node_of(state.partial), z]
        if np.isnan(v):
            raise UnreachablePrefixError(f"zero mass under baseline at {state.partial + (z,)!r}")
        return Score(float(v))
    pi_bl = induce_token_policy(rho_bl.policy)
    return Score(*q_mc(pi_bl, reward, state, z, config.n_rollouts, as_generator(rng)))


def tq_star_indirect(state: DecodeState, z: int, rho_bl: AlignedPolicy, reward: TrajectoryReward,
                     baseline_reward: TrajectoryReward, beta: float, config: DecoderConfig, rng=None) -> Score:
    """Expected target reward of completions of [s, z] under the transferred policy.

    Exact mode conditions the transferred policy directly; MC mode draws
    completions from the baseline and applies self-normalized weights
    exp((r - r_bl) / beta).
    """
    sp = rho_bl.space
    r = reward.values(state.prompt, sp)
    node = sp.node_of(state.partial)
    if z == sp.vocab.eos:
        return Score(float(r[node]))
    if config.mode == "exact":
        rho_r = transfer_policy(rho_bl, reward, baseline_reward, beta)
        v = rho_r.policy.candidate_mean(r)[node, z]
        if np.isnan(v):
            raise UnreachablePrefixError(f"zero mass under transferred policy at {state.partial + (z,)!r}")
        return Score(float(v))
    if beta != rho_bl.beta:
        raise ValueError("beta must match the baseline policy's beta")
    child = _cond_node(sp, state, z)
    if not np.isfinite(rho_bl.policy.subtree_logmass[child]):
        raise UnreachablePrefixError(f"zero mass under baseline at {state.partial + (z,)!r}")
    probs = np.exp(induce_token_policy(rho_bl.policy).log_table(state.prompt))
    ends = rollout_nodes(probs, sp, child, config.n_rollouts, as_generator(rng))
    return _snis(r[ends], baseline_reward.values(state.prompt, sp)[ends], beta)


def _snis(r: np.ndarray, r_bl: np.ndarray, beta: float) -> Score:
    if np.all(r == r[0]):
        return Score(float(r[0]))
    w = unnormalized_weights(r, r_bl, beta)
    total = w.sum()
    if not total > 0:
        raise FloatingPointError("degenerate importance weights (sum is zero)")
    est = float(np.dot(w, r) / total)
    se = float(np.sqrt(np.sum((w * (r - est)) ** 2)) / total) if len(r) > 1 else 0.0
    return Score(est, se)


# --- the decoding step ---------------------------------------------------------


def softmax_step(anchor_log: np.ndarray, scores: np.ndarray, scale: float, candidates) -> StepDistribution:
    """pi(z) proportional to anchor(z) * exp(scale * score(z)) on the candidate set.

    Candidates with zero anchor mass are dropped.
    """
    candidates = tuple(int(z) for z in candidates if np.isfinite(anchor_log[z]))
    if not candidates:
        raise ValueError("anchor policy has no mass on the candidate set")
    cand = np.array(candidates)
    sc = np.asarray(scores, dtype=float)[cand]
    if not np.all(np.isfinite(sc)):
        raise ValueError(f"non-finite scores on candidates {candidates}")
    logits = anchor_log[cand] + scale * sc if scale else anchor_log[cand].copy()
    log_c = float(logsumexp(logits))
    probs = np.zeros(len(anchor_log))
    probs[cand] = np.exp(logits - log_c)
    return StepDistribution((), candidates, {int(z): float(s) for z, s in zip(cand, sc)}, probs, log_c)


def decode_step(base_log_probs: np.ndarray, scores: np.ndarray, alpha: float, candidates) -> StepDistribution:
    """Closed-form maximizer of E[score] - alpha * KL(pi || base) over the candidate set."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return softmax_step(np.asarray(base_log_probs, dtype=float), scores, 1.0 / alpha, candidates)


def step_objective(probs: np.ndarray, scores: np.ndarray, base_log_probs: np.ndarray, alpha: float) -> float:
    """E_pi[score] - alpha * KL(pi || base) restricted to pi's support."""
    s = probs > 0
    lp = np.log(probs[s])
    return float(np.dot(probs[s], np.asarray(scores)[s]) - alpha * np.dot(probs[s], lp - base_log_probs[s]))


# --- exact tables --------------------------------------------------------------


@dataclass(frozen=True)
class StepTable:
    """Exact per-node decoding ingredients for one prompt (rows of horizon nodes are NaN)."""

    space: TrajectorySpace
    candidate_log: np.ndarray
    anchor_log: np.ndarray
    scores: np.ndarray
    scale: float
    k: int

    def candidates(self, node: int) -> tuple[int, ...]:
        return top_k_indices(self.candidate_log[node], self.k)

    def step(self, node: int, candidates=None) -> StepDistribution:
        cands = self.candidates(node) if candidates is None else candidates
        dist = softmax_step(self.anchor_log[node], self.scores[node], self.scale, cands)
        return replace(dist, partial=self.space.contents[node])

    def log_policy(self) -> np.ndarray:
        """log pi_alg for every decision node (top-k candidates)."""
        sp = self.space
        out = np.full((sp.size, sp.vocab.size), np.nan)
        for i in np.nonzero(sp.decision)[0]:
            with np.errstate(divide="ignore"):
                out[i] = np.log(self.step(i).probs)
        return out


def _policy_log_table(problem: Problem, prompt: Prompt, beta: float, which: str) -> np.ndarray:
    return problem.token_policy(prompt, beta, which).log_table(prompt)


def exact_scores(kind: str, problem: Problem, prompt: Prompt, config: DecoderConfig) -> np.ndarray:
    """Node x token score table used by ``kind`` in exact mode."""
    sp = problem.space
    r = problem.reward.values(prompt, sp)
    if kind == "tq_direct":
        return problem.aligned(prompt, config.beta, "target").policy.candidate_mean(r)
    if kind == "tq_indirect":
        return problem.transferred(prompt, config.beta).policy.candidate_mean(r)
    if kind == "cd_minus":
        return q_pi_table(problem.pi_sft, problem.reward, prompt).values
    if kind == "args":
        # reward of the partial response after appending z (short-horizon proxy)
        out = np.full((sp.size, sp.vocab.size), np.nan)
        has = sp.children >= 0
        out[has] = r[sp.children[has]]
        out[sp.decision, sp.vocab.eos] = r[sp.decision]
        return out
    if kind == "sft":
        out = np.zeros((sp.size, sp.vocab.size))
        out[~sp.decision] = np.nan
        return out
    raise ValueError(f"no step scores for decoder {kind!r}")


def step_table(kind: str, problem: Problem, prompt: Prompt, config: DecoderConfig) -> StepTable:
    if kind not in STEP_KINDS:
        raise ValueError(f"{kind!r} is not a step-wise decoder")
    cand, anchor = config.roles(kind)
    k = problem.vocab.size if kind == "sft" else config.effective_k(problem.vocab.size)
    if kind == "args":
        scale = config.args_weight
    elif kind == "sft":
        scale = 0.0
    else:
        scale = 1.0 / config.alpha
    return StepTable(
        problem.space,
        _policy_log_table(problem, prompt, config.beta, cand),
        _policy_log_table(problem, prompt, config.beta, anchor),
        exact_scores(kind, problem, prompt, config),
        scale,
        k,
    )


# --- Monte-Carlo scoring at visited states ---------------------------------------


def _mc_scores(kind: str, problem: Problem, state: DecodeState, candidates, config: DecoderConfig,
               streams: RngStreams, t: int) -> np.ndarray:
    sp = problem.space
    out = np.full(sp.vocab.size, np.nan)
    for z in candidates:
        rng = streams.gen("step", t, "cand", int(z))
        if kind == "tq_direct":
            out[z] = tq_star_direct(state, z, problem.aligned(state.prompt, config.beta, "target"),
                                    problem.reward, config, rng).value
        elif kind == "tq_indirect":
            out[z] = tq_star_indirect(state, z, problem.aligned(state.prompt, config.beta, "baseline"),
                                      problem.reward, problem.reward_for("baseline"), config.beta, config,
                                      rng).value
        elif kind == "cd_minus":
            out[z] = q_mc(problem.pi_sft, problem.reward, state, z, config.n_rollouts, rng)[0]
    return out


# --- sequence decoding -----------------------------------------------------------


def _select(dist: StepDistribution, greedy: bool, rng: np.random.Generator) -> int:
    if greedy:
        return int(np.argmax(dist.probs))  # first maximum = lowest index
    return sample_index(dist.probs, rng)


def _walk(prompt: Prompt, space: TrajectorySpace, step_fn: Callable[[DecodeState, int], StepDistribution],
          greedy: bool, streams: RngStreams) -> DecodeResult:
    from .mdp import advance, force_terminate

    state = initial_state(prompt, space.vocab, space.horizon)
    steps = []
    t = 0
    while True:
        if state.at_horizon:
            return DecodeResult(force_terminate(state), steps)
        dist = step_fn(state, t)
        steps.append(dist)
        nxt = advance(state, _select(dist, greedy, streams.gen("select", t)))
        if isinstance(nxt, Trajectory):
            return DecodeResult(nxt, steps)
        state, t = nxt, t + 1


def _as_streams(rng) -> RngStreams:
    if isinstance(rng, RngStreams):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStreams(int(rng))
    raise TypeError("pass an RngStreams or an integer seed")


def decode_sequence(kind: str, problem: Problem, prompt: Prompt, config: DecoderConfig, rng) -> DecodeResult:
    """Run one step-wise decoder to completion, recording each step distribution."""
    streams = _as_streams(rng)
    sp = problem.space
    if kind == "best_of_n":
        traj = decode_best_of_n(prompt, problem.pi_sft, problem.reward, config.n_best, streams)
        return DecodeResult(traj, [])
    if kind not in STEP_KINDS:
        raise ValueError(f"unknown decoder {kind!r}")
    if config.mode == "exact" or kind in ("sft", "args"):
        table = step_table(kind, problem, prompt, config)

        def step_fn(state, t):
            node = sp.node_of(state.partial)
            cands = None
            if config.candidate_sampling == "sample" and kind != "sft":
                cands = _sample_candidates(table.candidate_log[node], table.k, streams.gen("cands", t))
            return table.step(node, cands)
    else:
        cand_name, anchor_name = config.roles(kind)
        cand_pol = problem.token_policy(prompt, config.beta, cand_name)
        anchor_pol = problem.token_policy(prompt, config.beta, anchor_name)
        k = config.effective_k(sp.vocab.size)

        def step_fn(state, t):
            cand_log = cand_pol.log_probs(state)
            if config.candidate_sampling == "sample":
                cands = _sample_candidates(cand_log, k, streams.gen("cands", t))
            else:
                cands = top_k_indices(cand_log, k)
            anchor_log = anchor_pol.log_probs(state)
            cands = tuple(z for z in cands if np.isfinite(anchor_log[z]))
            scores = _mc_scores(kind, problem, state, cands, config, streams, t)
            return replace(decode_step(anchor_log, scores, config.alpha, cands), partial=state.partial)

    return _walk(prompt, sp, step_fn, config.greedy, streams)


def _sample_candidates(log_p: np.ndarray, k: int, rng: np.random.Generator) -> tuple[int, ...]:
    p = np.exp(log_p)
    k = min(k, int(np.count_nonzero(p > 0)))
    return tuple(int(i) for i in rng.choice(len(p), size=k, replace=False, p=p / p.sum()))


def decode_cd_minus(prompt: Prompt, problem: Problem, config: DecoderConfig, rng) -> DecodeResult:
    """Controlled decoding with Q^{pi_sft} standing in for Q* (no trained value model)."""
    return decode_sequence("cd_minus", problem, prompt, config, rng)


def decode_sft(prompt: Prompt, pi_sft: TokenPolicy, greedy: bool, rng) -> Trajectory:
    """Greedy or ancestral decoding from the reference policy."""
    streams = _as_streams(rng)
    sp = pi_sft.space

    def step_fn(state, t):
        lp = pi_sft.log_probs(state)
        return StepDistribution(state.partial, tuple(range(len(lp))), {}, np.exp(lp), 0.0)

    return _walk(prompt, sp, step_fn, greedy, streams).trajectory


def decode_best_of_n(prompt: Prompt, pi_sft: TokenPolicy, reward: TrajectoryReward, n: int, rng) -> Trajectory:
    """Best reward among ``n`` reference samples; ties go to the earliest draw.

    Draw ``i`` uses the same stream as ``decode_sft`` with ``spawn("draw", i)``,
    so ``n=1`` reproduces a sampled SFT decode from that stream.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    streams = _as_streams(rng)
    sp = pi_sft.space
    r = reward.values(prompt, sp)
    best, best_val = None, -np.inf
    for i in range(n):
        traj = decode_sft(prompt, pi_sft, False, streams.spawn("draw", i))
        val = r[sp.traj_index(traj)]
        if val > best_val:
            best, best_val = traj, val
    return best


def best_of_exhaustive(prompt: Prompt, pi_sft: TokenPolicy, reward: TrajectoryReward) -> Trajectory:
    """Reward argmax over every trajectory the reference can produce."""
    from .policies import to_trajectory_policy

    rho = to_trajectory_policy(pi_sft, prompt)
    sp = rho.space
    r = np.where(np.isfinite(rho.logp), reward.values(prompt, sp), -np.inf)
    return sp.trajectory(int(np.argmax(r)))


def decode_args(prompt: Prompt, base: TokenPolicy, reward: TrajectoryReward, weight: float, k: int,
                greedy: bool, rng) -> Trajectory:
    """Per step: score(z) = log base(z|s) + weight * r(x, [partial, z]) over the top-k of base."""
    streams = _as_streams(rng)
    sp = base.space
    r = reward.values(prompt, sp)
    k = min(k, sp.vocab.size)

    def step_fn(state, t):
        node = sp.node_of(state.partial)
        lp = base.log_probs(state)
        sc = np.where(sp.children[node] >= 0, r[np.maximum(sp.children[node], 0)], np.nan)
        sc[sp.vocab.eos] = r[node]
        return replace(softmax_step(lp, sc, weight, top_k_indices(lp, k)), partial=state.partial)

    return _walk(prompt, sp, step_fn, greedy, streams).trajectory


def decode(kind: str, problem: Problem, prompt: Prompt, config: DecoderConfig, rng) -> DecodeResult:
    """Dispatch any decoder by name."""
    streams = _as_streams(rng)
    if kind == "sft":
        return DecodeResult(decode_sft(prompt, problem.pi_sft, config.greedy, streams))
    if kind == "best_of_n":
        return DecodeResult(decode_best_of_n(prompt, problem.pi_sft, problem.reward, config.n_best, streams))
    return decode_sequence(kind, problem, prompt, config, streams)
