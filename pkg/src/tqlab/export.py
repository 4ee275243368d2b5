"""JSON round-tripping for policies, rewards and aligned policies."""

from __future__ import annotations

import numpy as np

from .align import AlignedPolicy
from .mdp import Vocabulary, get_space
from .policies import TokenPolicy
from .rewards import TrajectoryReward


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    return x


def policy_to_dict(policy: TokenPolicy, prompts) -> dict:
    """Same table layout the experiment config accepts under ``instance.sft.table``."""
    return _plain(policy.to_dict(prompts))


def policy_from_dict(data: dict, prompts, eos: str = "EOS") -> TokenPolicy:
    vocab = Vocabulary.from_tokens(data["tokens"], eos)
    mapping = {(pid, vocab.encode(state)): probs
               for pid, rows in data["tables"].items() for state, probs in rows.items()}
    return TokenPolicy.from_mapping(vocab, data["horizon"], mapping, prompts, name=data.get("name", ""))


def reward_to_dict(reward: TrajectoryReward, vocab: Vocabulary, horizon: int, prompts) -> dict:
    space = get_space(vocab, horizon)
    table = {p.id: {vocab.render(c): float(v) for c, v in zip(space.contents, reward.values(p, space))}
             for p in prompts}
    return {"name": reward.name, "bounds": None if reward.bounds is None else list(reward.bounds),
            "forced_value": reward.forced_value, "tokens": list(vocab.tokens), "horizon": horizon,
            "meta": _plain(reward.meta), "table": table}


def reward_from_dict(data: dict, prompts, eos: str = "EOS") -> TrajectoryReward:
    vocab = Vocabulary.from_tokens(data["tokens"], eos)
    mapping = {(pid, vocab.encode(resp)): v for pid, rows in data["table"].items() for resp, v in rows.items()}
    bounds = None if data["bounds"] is None else tuple(data["bounds"])
    reward = TrajectoryReward.from_mapping(vocab, data["horizon"], mapping, prompts, None, bounds, data["name"])
    reward.meta.update(data.get("meta", {}))
    reward.forced_value = data.get("forced_value")
    return reward


def aligned_to_dict(aligned: AlignedPolicy) -> dict:
    sp, vocab = aligned.space, aligned.space.vocab
    return {
        "prompt": aligned.prompt.id,
        "beta": aligned.beta,
        "log_partition": aligned.log_partition,
        "log_transfer_normalizer": aligned.log_transfer_normalizer,
        "reference": aligned.reference.name,
        "reward": aligned.reward_name,
        "policy": aligned.policy.name,
        "probs": {vocab.render(c): float(p) for c, p in zip(sp.contents, aligned.policy.probs)},
    }
