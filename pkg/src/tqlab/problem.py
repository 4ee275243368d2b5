"""A decoding problem: MDP, reference policy, target and baseline rewards.

Derived objects (rho_sft, Gibbs-aligned baselines, transferred policies and
their induced token policies) are memoized per (prompt, beta).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .align import AlignedPolicy, rlhf_optimal_policy, transfer_policy
from .mdp import Prompt, TrajectorySpace, Vocabulary, get_space
from .policies import TokenPolicy, TrajectoryPolicy, induce_token_policy, to_trajectory_policy
from .rewards import TrajectoryReward


@dataclass
class Problem:
    vocab: Vocabulary
    horizon: int
    prompts: list[Prompt]
    pi_sft: TokenPolicy
    reward: TrajectoryReward
    baseline_reward: TrajectoryReward | None = None
    r_max: float = 1.0
    name: str = ""
    _memo: dict = field(default_factory=dict, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def space(self) -> TrajectorySpace:
        return get_space(self.vocab, self.horizon)

    def prompt(self, pid: str) -> Prompt:
        for p in self.prompts:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def _get(self, key, build):
        with self._lock:
            if key not in self._memo:
                self._memo[key] = build()
            return self._memo[key]

    def rho_sft(self, prompt: Prompt) -> TrajectoryPolicy:
        return self._get(("rho_sft", prompt.id), lambda: to_trajectory_policy(self.pi_sft, prompt))

    def reward_for(self, which: str) -> TrajectoryReward:
        if which == "target":
            return self.reward
        if which == "baseline":
            if self.baseline_reward is None:
                raise ValueError(f"problem {self.name!r} has no baseline reward")
            return self.baseline_reward
        raise ValueError(f"unknown reward {which!r}")

    def aligned(self, prompt: Prompt, beta: float, which: str = "target") -> AlignedPolicy:
        """Closed-form RLHF policy for the target or the baseline reward."""
        return self._get(("aligned", prompt.id, beta, which),
                         lambda: rlhf_optimal_policy(self.rho_sft(prompt), self.reward_for(which), beta))

    def transferred(self, prompt: Prompt, beta: float) -> AlignedPolicy:
        """Target-aligned policy obtained by reweighting the baseline-aligned one."""
        return self._get(("transfer", prompt.id, beta),
                         lambda: transfer_policy(self.aligned(prompt, beta, "baseline"), self.reward,
                                                 self.reward_for("baseline"), beta))

    def token_policy(self, prompt: Prompt, beta: float, which: str) -> TokenPolicy:
        """pi_sft ('sft'), or the token policy inducing a trajectory policy:
        'target' (pi_DPO of direct transfer), 'baseline' (pi_BL), 'transfer' (pi_r)."""
        if which == "sft":
            return self.pi_sft

        def build():
            rho = self.transferred(prompt, beta) if which == "transfer" else self.aligned(prompt, beta, which)
            return induce_token_policy(rho.policy, name=f"pi_{which}")

        return self._get(("pi", prompt.id, beta, which), build)
