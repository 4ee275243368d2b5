"""Experiment configuration: TOML schema, validation and problem construction."""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .decoders import KINDS, POLICY_CHOICES, DecoderConfig
from .mdp import Prompt, Vocabulary, get_space, trajectory_count, enumeration_cap, EnumerationCapExceeded
from .policies import TokenPolicy
from .problem import Problem
from .rewards import TrajectoryReward, fit_reward_bt, generate_bt_dataset

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PromptSection(_Model):
    id: str
    tokens: list[str] = []


class SftSection(_Model):
    kind: Literal["uniform", "dirichlet", "table"] = "uniform"
    concentration: float = Field(1.0, gt=0)
    seed: int = 0
    # prompt id -> space-separated partial ("" for the root) -> probabilities
    table: dict[str, dict[str, list[float]]] = {}


class RewardSection(_Model):
    kind: Literal["count", "table", "random", "constant", "bt_fit"] = "count"
    weights: dict[str, float] = {}
    value: float = 0.0
    table: dict[str, dict[str, float]] = {}
    default: Optional[float] = None
    seed: int = 0
    low: float = 0.0
    high: float = 1.0
    # bt_fit: ground truth used to synthesize comparisons
    truth: Optional["RewardSection"] = None
    n_preferences: int = Field(5000, ge=1)
    labels: Literal["bernoulli", "expected"] = "bernoulli"
    steps: int = Field(2000, ge=0)
    learning_rate: float = Field(10.0, gt=0)


class InstanceSection(_Model):
    preset: Optional[Literal["I0"]] = None
    tokens: Optional[list[str]] = None
    vocab_size: Optional[int] = Field(None, ge=2)
    eos: str = "EOS"
    horizon: int = Field(3, ge=0)
    r_max: float = Field(1.0, gt=0)
    forced_eos_reward: Literal["keep", "zero"] = "keep"
    prompts: list[PromptSection] = [PromptSection(id="p0")]
    sft: SftSection = SftSection()
    reward: RewardSection = RewardSection(weights={"A": 1 / 3})
    # defaults reproduce the two-token instance: r = #A/3, r_BL = #B/3
    baseline_reward: Optional[RewardSection] = RewardSection(weights={"B": 1 / 3})

    @model_validator(mode="after")
    def _check(self):
        if not self.prompts:
            raise ValueError("prompts must be non-empty")
        ids = [p.id for p in self.prompts]
        if len(set(ids)) != len(ids):
            raise ValueError("prompt ids must be unique")
        if self.tokens is not None and self.vocab_size is not None:
            raise ValueError("give tokens or vocab_size, not both")
        return self


class AlignSection(_Model):
    beta: list[float] = [0.5]
    alpha: list[float] = [1.0]
    k: list[int] = [10]

    @field_validator("beta", "alpha")
    @classmethod
    def _positive(cls, v):
        if not v:
            raise ValueError("list must be non-empty")
        if any(not x > 0 for x in v):
            raise ValueError("values must be > 0")
        return v

    @field_validator("k")
    @classmethod
    def _k(cls, v):
        if not v or any(x < 1 for x in v):
            raise ValueError("k values must be >= 1 and the list non-empty")
        return v


class DecoderSection(_Model):
    roster: list[Literal[KINDS]] = list(KINDS)  # type: ignore[valid-type]
    greedy: bool = True
    n_best: int = Field(4, ge=1)
    args_weight: float = Field(1.0, ge=0)
    args_base: Literal["sft", "target"] = "sft"
    anchor: Literal[POLICY_CHOICES] = "default"  # type: ignore[valid-type]
    candidate_source: Literal[POLICY_CHOICES] = "default"  # type: ignore[valid-type]
    candidate_sampling: Literal["top", "sample"] = "top"

    @field_validator("roster")
    @classmethod
    def _roster(cls, v):
        if not v:
            raise ValueError("decoder roster is empty")
        if len(set(v)) != len(v):
            raise ValueError("decoder roster has duplicates")
        return v


class ModeSection(_Model):
    kind: Literal["exact", "mc"] = "exact"
    n_rollouts: int = Field(1, ge=1)


class OutputSection(_Model):
    dir: str = "out"
    traces: bool = False


class VerifySection(_Model):
    instances: int = Field(100, ge=1)
    vocab: tuple[int, int] = (2, 6)
    horizon: tuple[int, int] = (1, 5)
    beta: list[float] = [0.1, 0.5, 1.0]
    alpha: list[float] = [0.5, 1.0, 2.0]
    concentration: float = Field(1.0, gt=0)


class ExperimentConfig(_Model):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    workers: int = Field(1, ge=1)
    instance: InstanceSection = InstanceSection()
    align: AlignSection = AlignSection()
    decoders: DecoderSection = DecoderSection()
    mode: ModeSection = ModeSection()
    output: OutputSection = OutputSection()
    verify: VerifySection = VerifySection()

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v} (expected {SCHEMA_VERSION})")
        return v

    def fingerprint(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def decoder_config(self, alpha: float, beta: float, k: int) -> DecoderConfig:
        d = self.decoders
        return DecoderConfig(alpha=alpha, beta=beta, k=k, n_rollouts=self.mode.n_rollouts, mode=self.mode.kind,
                             greedy=d.greedy, anchor=d.anchor, candidate_source=d.candidate_source,
                             candidate_sampling=d.candidate_sampling, args_weight=d.args_weight,
                             args_base=d.args_base, n_best=d.n_best, seed=self.seed)

    def with_overrides(self, seed=None, out_dir=None, mode=None) -> "ExperimentConfig":
        data = self.model_dump()
        if seed is not None:
            data["seed"] = seed
        if out_dir is not None:
            data["output"]["dir"] = str(out_dir)
        if mode is not None:
            data["mode"]["kind"] = mode
        return parse_config(data)


def _format_validation(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "invalid config: " + "; ".join(parts)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_validation(err)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: TOML parse error: {err}") from None
    cfg = parse_config(data)
    build_problem(cfg)  # resolves every reference and checks the enumeration budget
    return cfg


# --- building the problem -------------------------------------------------------


def _vocab(sec: InstanceSection) -> Vocabulary:
    if sec.preset == "I0" and sec.tokens is None and sec.vocab_size is None:
        return Vocabulary.from_tokens(["A", "B", "EOS"])
    if sec.tokens is not None:
        return Vocabulary.from_tokens(sec.tokens, sec.eos)
    if sec.vocab_size is not None:
        return Vocabulary.letters(sec.vocab_size - 1)
    return Vocabulary.from_tokens(["A", "B", "EOS"])


def _key(vocab: Vocabulary, text: str) -> tuple[int, ...]:
    try:
        return vocab.encode(text)
    except ValueError as err:
        raise ConfigError(f"bad state/response {text!r}: {err}") from None


def _build_reward(sec: RewardSection, vocab, horizon, prompts, r_max, seed, label) -> TrajectoryReward:
    space = get_space(vocab, horizon)
    bounds = (0.0, r_max)
    if sec.kind == "count":
        for tok in sec.weights:
            if tok not in vocab.tokens:
                raise ConfigError(f"{label}.weights: unknown token {tok!r}")
        return TrajectoryReward.counting(vocab, sec.weights, bounds=bounds)
    if sec.kind == "constant":
        return TrajectoryReward.constant(sec.value, bounds=bounds)
    if sec.kind == "random":
        rng = np.random.default_rng([seed, sec.seed])
        return TrajectoryReward.uniform_random(space, prompts, rng, sec.low, sec.high, name=f"{label}:random")
    if sec.kind == "table":
        mapping = {}
        for pid, rows in sec.table.items():
            if pid not in {p.id for p in prompts}:
                raise ConfigError(f"{label}.table: unknown prompt {pid!r}")
            for text, val in rows.items():
                mapping[(pid, _key(vocab, text))] = val
        try:
            return TrajectoryReward.from_mapping(vocab, horizon, mapping, prompts, sec.default, bounds, name=label)
        except ValueError as err:
            raise ConfigError(f"{label}.table: {err}") from None
    # bt_fit
    if sec.truth is None:
        raise ConfigError(f"{label}.truth is required for kind='bt_fit'")
    truth = _build_reward(sec.truth, vocab, horizon, prompts, r_max, seed, f"{label}.truth")
    rng = np.random.default_rng([seed, sec.seed, 1])
    data = generate_bt_dataset(truth, prompts, space, sec.n_preferences, rng, sec.labels)
    return fit_reward_bt(data, sec.steps, sec.learning_rate, sec.seed, r_max)


def build_problem(cfg: ExperimentConfig) -> Problem:
    sec = cfg.instance
    vocab = _vocab(sec)
    n = trajectory_count(vocab.size, sec.horizon)
    if n > enumeration_cap():
        raise EnumerationCapExceeded(f"instance has {n} trajectories, cap is {enumeration_cap()}")
    prompts = []
    for p in sec.prompts:
        toks = _key(vocab, " ".join(p.tokens))
        prompts.append(Prompt(p.id, toks))
    horizon = sec.horizon
    if sec.sft.kind == "uniform":
        pi_sft = TokenPolicy.uniform(vocab, horizon, name="pi_sft")
    elif sec.sft.kind == "dirichlet":
        rng = np.random.default_rng([cfg.seed, sec.sft.seed])
        pi_sft = TokenPolicy.dirichlet(vocab, horizon, prompts, sec.sft.concentration, rng, name="pi_sft")
    else:
        mapping = {}
        for pid, rows in sec.sft.table.items():
            for text, probs in rows.items():
                if len(probs) != vocab.size:
                    raise ConfigError(f"instance.sft.table.{pid}.{text!r}: expected {vocab.size} probabilities")
                mapping[(pid, _key(vocab, text))] = probs
        try:
            pi_sft = TokenPolicy.from_mapping(vocab, horizon, mapping, prompts, name="pi_sft")
        except ValueError as err:
            raise ConfigError(f"instance.sft.table: {err}") from None
    r_max = sec.r_max
    try:
        reward = _build_reward(sec.reward, vocab, horizon, prompts, r_max, cfg.seed, "instance.reward")
        baseline = None
        if sec.baseline_reward is not None:
            baseline = _build_reward(sec.baseline_reward, vocab, horizon, prompts, r_max, cfg.seed + 1,
                                     "instance.baseline_reward")
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if sec.forced_eos_reward == "zero":
        reward.forced_value = 0.0
        if baseline is not None:
            baseline.forced_value = 0.0
    space = get_space(vocab, horizon)
    try:
        reward.check(prompts, space)
        if baseline is not None:
            baseline.check(prompts, space)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if "tq_indirect" in cfg.decoders.roster and baseline is None:
        raise ConfigError("decoders.roster includes tq_indirect but instance.baseline_reward is not set")
    return Problem(vocab, horizon, prompts, pi_sft, reward, baseline, r_max=r_max, name=sec.preset or "instance")
