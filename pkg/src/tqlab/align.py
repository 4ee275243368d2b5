"""Trajectory-level alignment closed forms.

Gibbs tilt of a reference distribution, the KL-regularized objective it
maximizes, implicit-reward recovery, and reweighting a policy aligned to one
reward into the policy aligned to another (with its partition-ratio check).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mdp import DecodeState, Trajectory
from .policies import TrajectoryPolicy, UnreachablePrefixError
from .rewards import TrajectoryReward

log = logging.getLogger(__name__)

PARTITION_TOL = 1e-8


class AbsoluteContinuityError(ValueError):
    pass


class BetaMismatchError(ValueError):
    pass


class NormalizerMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class AlignedPolicy:
    policy: TrajectoryPolicy
    beta: float
    log_partition: float
    reference: TrajectoryPolicy
    reward_name: str = ""
    # log of the enumerated sum of the unnormalized transfer weights, when
    # this policy was produced by reweighting another aligned policy
    log_transfer_normalizer: float | None = None

    @property
    def prompt(self):
        return self.policy.prompt

    @property
    def space(self):
        return self.policy.space


def rlhf_optimal_policy(rho_sft: TrajectoryPolicy, reward: TrajectoryReward, beta: float) -> AlignedPolicy:
    """rho(tau) proportional to rho_sft(tau) * exp(r(tau) / beta)."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    r = reward.values(rho_sft.prompt, rho_sft.space)
    tilt = rho_sft.logp + r / beta
    if np.any(tilt == np.inf) or np.any(np.isnan(tilt)):
        raise OverflowError("Gibbs tilt overflowed")
    policy, log_z = TrajectoryPolicy.from_unnormalized(rho_sft.prompt, rho_sft.space, tilt,
                                                       name=f"gibbs({rho_sft.name},{reward.name},{beta:g})")
    return AlignedPolicy(policy, float(beta), log_z, rho_sft, reward.name)


def kl_divergence(p: TrajectoryPolicy, q: TrajectoryPolicy) -> float:
    """KL(p || q) with 0 log 0 = 0."""
    support = np.isfinite(p.logp)
    if np.any(~np.isfinite(q.logp[support])):
        raise AbsoluteContinuityError("p puts mass where q has none")
    lp = p.logp[support]
    return float(np.sum(np.exp(lp) * (lp - q.logp[support])))


def kl_regularized_value(rho: TrajectoryPolicy, rho_sft: TrajectoryPolicy, reward: TrajectoryReward,
                         beta: float) -> float:
    """E_rho[r] - beta * KL(rho || rho_sft)."""
    r = reward.values(rho.prompt, rho.space)
    return float(np.dot(rho.probs, r) - beta * kl_divergence(rho, rho_sft))


@dataclass(frozen=True)
class ImplicitReward:
    """beta * log(rho / rho_sft) per trajectory; defined up to the additive
    prompt constant beta * log Z(x)."""

    values: np.ndarray
    beta: float
    up_to_constant: bool = True


def implicit_reward(rho: TrajectoryPolicy, rho_sft: TrajectoryPolicy, beta: float) -> ImplicitReward:
    if np.any(~np.isfinite(rho_sft.logp)):
        raise AbsoluteContinuityError("reference assigns zero mass to some trajectory")
    return ImplicitReward(beta * (rho.logp - rho_sft.logp), beta)


def transfer_policy(rho_bl: AlignedPolicy, reward: TrajectoryReward, baseline_reward: TrajectoryReward,
                    beta: float, tol: float = PARTITION_TOL) -> AlignedPolicy:
    """Reweight a policy aligned to ``baseline_reward`` into the one aligned to ``reward``.

    The enumerated sum of rho_bl * exp((r - r_bl) / beta) must equal
    Z_r / Z_bl; a mismatch means rho_bl was not the Gibbs tilt it claims to be.
    """
    if beta != rho_bl.beta:
        raise BetaMismatchError(f"transfer beta {beta} differs from baseline beta {rho_bl.beta}")
    prompt, sp = rho_bl.prompt, rho_bl.space
    r = reward.values(prompt, sp)
    r_bl = baseline_reward.values(prompt, sp)
    log_w = rho_bl.policy.logp + (r - r_bl) / beta
    policy, log_sum = TrajectoryPolicy.from_unnormalized(prompt, sp, log_w,
                                                         name=f"transfer({rho_bl.policy.name}->{reward.name})")
    ref_tilt = rho_bl.reference.logp + r / beta
    m = ref_tilt.max()
    log_z_r = float(m + np.log(np.exp(ref_tilt - m).sum()))
    expected = log_z_r - rho_bl.log_partition
    if abs(np.expm1(log_sum - expected)) > tol:
        raise NormalizerMismatchError(
            f"transfer normalizer exp({log_sum}) != Z_r/Z_bl = exp({expected}); inconsistent inputs"
        )
    return AlignedPolicy(policy, beta, log_z_r, rho_bl.reference, reward.name, log_transfer_normalizer=log_sum)


def unnormalized_weights(r: np.ndarray, r_bl: np.ndarray, beta: float) -> np.ndarray:
    """exp((r - r_bl) / beta) with a max-shift; only ratios are meaningful."""
    e = (np.asarray(r) - np.asarray(r_bl)) / beta
    return np.exp(e - np.max(e))


def importance_weight(rho_r: TrajectoryPolicy, rho_bl: TrajectoryPolicy, state: DecodeState, candidate: int,
                      suffix: Trajectory) -> float:
    """rho_r(tau | [s, z]) / rho_bl(tau | [s, z]) from exact suffix masses.

    ``suffix`` is the continuation after [s, z], ending in EOS; it is just
    the EOS when z itself is EOS.
    """
    sp = rho_r.space
    eos = sp.vocab.eos
    if candidate == eos:
        if tuple(suffix.response) not in ((), (eos,)):
            raise ValueError("nothing can follow an EOS candidate")
        return 1.0
    node = sp.node_of(state.partial)
    cond = int(sp.children[node, candidate])
    if cond < 0:
        raise ValueError("candidate leads past the horizon")
    content = tuple(state.partial) + (candidate,) + tuple(t for t in suffix.response if t != eos)
    if content not in sp.index:
        raise ValueError(f"suffix {suffix.response!r} does not complete a trajectory within the horizon")
    i = sp.index[content]
    lm_r, lm_bl = rho_r.subtree_logmass[cond], rho_bl.subtree_logmass[cond]
    if not (np.isfinite(lm_r) and np.isfinite(lm_bl)):
        raise UnreachablePrefixError(f"zero-mass prefix {state.partial + (candidate,)!r}")
    return float(np.exp((rho_r.logp[i] - lm_r) - (rho_bl.logp[i] - lm_bl)))
