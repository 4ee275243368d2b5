"""Exact metrics and bound checks over enumerated trajectory spaces."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .align import AbsoluteContinuityError, kl_divergence
from .decoders import DecoderConfig, decode, step_table
from .mdp import Prompt, Trajectory
from .policies import TokenPolicy, TrajectoryPolicy
from .problem import Problem
from .rewards import trajectory_return
from .rng import RngStreams
from .value import v_of, v_star

BOUND_TOL = 1e-8


def kl_trajectory(p: TrajectoryPolicy, q: TrajectoryPolicy) -> float:
    """KL(p || q) over the enumeration, 0 log 0 = 0."""
    return kl_divergence(p, q)


def induced_rho_alg(kind: str, problem: Problem, prompt: Prompt, config: DecoderConfig) -> TrajectoryPolicy:
    """Trajectory distribution of sampling from the exact per-step decoding policy."""
    if config.mode != "exact":
        raise ValueError("induced_rho_alg needs exact scores; Monte-Carlo mode is refused")
    if config.candidate_sampling != "top":
        raise ValueError("induced_rho_alg needs deterministic top-k candidates")
    if kind == "sft":
        return problem.rho_sft(prompt)
    table = step_table(kind, problem, prompt, config)
    logp = problem.space.path_logprob(np.nan_to_num(table.log_policy(), nan=-np.inf, neginf=-np.inf))
    return TrajectoryPolicy(prompt, problem.space, logp, name=f"rho_alg[{kind}]")


def alg_token_policy(kind: str, problem: Problem, prompt: Prompt, config: DecoderConfig) -> TokenPolicy:
    table = step_table(kind, problem, prompt, config)
    return TokenPolicy(problem.vocab, problem.horizon, tables={prompt.id: table.log_policy()}, name=f"pi_alg[{kind}]")


def sub_gap(prompt: Prompt, reward, rho_alg: TrajectoryPolicy) -> float:
    """V*(x) - V^alg(x)."""
    return v_star(reward, prompt, rho_alg.space) - v_of(rho_alg, reward)


def _row_kl(p_log: np.ndarray, q_log: np.ndarray) -> float:
    s = np.isfinite(p_log)
    if np.any(~np.isfinite(q_log[s])):
        raise AbsoluteContinuityError("decoding policy puts mass where its anchor has none")
    return float(np.sum(np.exp(p_log[s]) * (p_log[s] - q_log[s])))


def h_alpha(prompt: Prompt, pi_alg: TokenPolicy, pi_anchor: TokenPolicy, rho_alg: TrajectoryPolicy,
            all_steps: bool = False) -> float:
    """Prefix-weighted sum of KL(pi_alg || pi_anchor) over decision states.

    By default sums the T-1 prefix lengths 0..T-2 (empty for T <= 1).
    ``all_steps`` also includes prefixes of length T-1, which is the tighter
    quantity the bound's telescoping argument actually supports.
    """
    sp = rho_alg.space
    last = sp.horizon - 1 if all_steps else sp.horizon - 2
    mass = np.exp(rho_alg.subtree_logmass)
    a, b = pi_alg.log_table(prompt), pi_anchor.log_table(prompt)
    total = 0.0
    for i in np.nonzero(sp.decision & (sp.lengths <= last))[0]:
        if mass[i] > 0:
            total += mass[i] * _row_kl(a[i], b[i])
    return total


def argmax_uniform(problem: Problem, prompt: Prompt) -> TrajectoryPolicy:
    """Uniform distribution over the reward-maximizing trajectories."""
    sp = problem.space
    r = problem.reward.values(prompt, sp)
    top = r == r.max()
    with np.errstate(divide="ignore"):
        logp = np.where(top, -np.log(top.sum()), -np.inf)
    return TrajectoryPolicy(prompt, sp, logp, name="rho_star")


@dataclass(frozen=True)
class BoundReport:
    prompt_id: str
    beta: float
    alpha: float
    horizon: int
    r_max: float
    sub_gap: float
    kl_star_sft: float
    kl_star_sft_point: float
    h_alpha: float
    bound_1: float
    kl_alg_sft: float
    bound_2: float
    slack_1: float
    slack_2: float
    pass_1: bool
    pass_2: bool
    tol: float = BOUND_TOL

    @property
    def passed(self) -> bool:
        return self.pass_1 and self.pass_2

    def to_json(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def kl_bound(beta: float, alpha: float, horizon: int, r_max: float) -> float:
    return (1.0 / beta + horizon / alpha) * r_max


def bound_check(problem: Problem, prompt: Prompt, beta: float, alpha: float, tol: float = BOUND_TOL,
                   kind: str = "tq_direct", score_perturbation: float = 0.0) -> BoundReport:
    """Both suboptimality and KL bounds for direct transfer with k = |V| and exact scores.

    ``score_perturbation`` adds a constant to the root's first candidate score
    (mutation testing only).
    """
    vr = problem.reward.values(prompt, problem.space)
    if vr.min() < -1e-12 or vr.max() > problem.r_max + 1e-12:
        raise ValueError("bound check needs 0 <= r <= R_max")
    config = DecoderConfig(alpha=alpha, beta=beta, k=problem.vocab.size, mode="exact")
    table = step_table(kind, problem, prompt, config)
    if score_perturbation:
        scores = table.scores.copy()
        scores[0, 0] += score_perturbation
        table = type(table)(table.space, table.candidate_log, table.anchor_log, scores, table.scale, table.k)
    log_pi = table.log_policy()
    sp = problem.space
    pi_alg = TokenPolicy(problem.vocab, problem.horizon, tables={prompt.id: log_pi})
    rho_alg = TrajectoryPolicy(prompt, sp, sp.path_logprob(np.nan_to_num(log_pi, nan=-np.inf, neginf=-np.inf)))
    anchor = TokenPolicy(problem.vocab, problem.horizon, tables={prompt.id: table.anchor_log})
    rho_sft = problem.rho_sft(prompt)
    rho_star = argmax_uniform(problem, prompt)
    point = int(np.argmax(vr))
    kl_star = kl_trajectory(rho_star, rho_sft)
    kl_point = float(-rho_sft.logp[point])
    h = h_alpha(prompt, pi_alg, anchor, rho_alg)
    gap = sub_gap(prompt, problem.reward, rho_alg)
    b1 = beta * kl_star - alpha * h
    kl_alg = kl_trajectory(rho_alg, rho_sft)
    b2 = kl_bound(beta, alpha, problem.horizon, problem.r_max)
    return BoundReport(
        prompt.id, float(beta), float(alpha), problem.horizon, float(problem.r_max), float(gap), float(kl_star),
        kl_point, float(h), float(b1), float(kl_alg), float(b2), float(b1 - gap), float(b2 - kl_alg),
        bool(gap - b1 <= tol), bool(kl_alg - b2 <= tol), tol,
    )


def avg_reward(kind: str, problem: Problem, prompts: Sequence[Prompt], config: DecoderConfig,
               rng: RngStreams) -> float:
    """Mean reward of one decoded response per prompt."""
    vals = []
    for prompt in prompts:
        res = decode(kind, problem, prompt, config, rng.spawn(prompt.id, kind))
        vals.append(trajectory_return(problem.reward, problem.vocab, prompt, res.trajectory))
    return float(np.mean(vals))


def normalized_reward(r_method: float, r_sft: float, r_tq: float) -> float:
    """(r_method - r_sft) / (r_tq - r_sft): SFT maps to 0, TQ* to 1."""
    if r_tq == r_sft:
        raise ZeroDivisionError("degenerate normalization: r_tq == r_sft")
    return (r_method - r_sft) / (r_tq - r_sft)


def diversity(traj: Trajectory | Sequence[int]) -> float:
    """Product over n = 2..4 of unique / total n-grams in the EOS-free response."""
    seq = list(traj.content if isinstance(traj, Trajectory) else traj)
    out = 1.0
    for n in (2, 3, 4):
        grams = [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]
        if grams:
            out *= len(set(grams)) / len(grams)
    return out


def _count_vector(tokens, size: int) -> np.ndarray:
    v = np.zeros(size)
    for t in tokens:
        v[t] += 1
    return v


def coherence_proxy(prompt: Prompt, traj: Trajectory, vocab_size: int,
                    embed: Callable[[Sequence[int]], np.ndarray] | None = None) -> float:
    """Cosine similarity of prompt and response embeddings (proxy metric).

    Defaults to token-count vectors; a zero vector on either side gives 0.
    """
    if embed is None:
        a, b = _count_vector(prompt.tokens, vocab_size), _count_vector(traj.content, vocab_size)
    else:
        a, b = np.asarray(embed(prompt.tokens), float), np.asarray(embed(traj.content), float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))



theorem1_check = bound_check
