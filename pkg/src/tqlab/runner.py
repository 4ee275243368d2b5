"""Experiment orchestration: decode grids, bound verification, oracle dumps."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .align import NormalizerMismatchError
from .config import SCHEMA_VERSION, ExperimentConfig, build_problem, parse_config
from .decoders import STEP_KINDS, DecoderConfig, decode, exact_scores, step_objective, step_table
from .policies import top_k_indices
from .evaluation import (
    coherence_proxy,
    diversity,
    induced_rho_alg,
    kl_trajectory,
    normalized_reward,
    sub_gap,
    bound_check,
)
from .instances import random_suite
from .problem import Problem
from .rewards import trajectory_return
from .rng import RngStreams
from .value import q_pi_table, q_star_table, v_of

SUMMARY_FIELDS = ("decoder", "alpha", "beta", "k", "n", "reward", "normalized_reward", "expected_reward",
                  "kl_alg_sft", "sub_gap", "diversity", "coherence_proxy", "coverage", "expected_reward_bl")
OBJECTIVE_TOL = 1e-9
PARTITION_TOL = 1e-8
SCORE_TOL = 1e-9


def _clean(x):
    """JSON-safe value: non-finite floats become null, numpy scalars become Python ones."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"))


def _write_jsonl(path: Path, rows) -> None:
    with path.open("w") as fh:
        for row in rows:
            fh.write(_dumps(row) + "\n")


def _write_csv(path: Path | None, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                    for v in row])
    text = buf.getvalue()
    if path is not None:
        path.write_text(text)
    return text


def _mean(vals):
    vals = [v for v in vals if v is not None and math.isfinite(v)]
    return float(np.mean(vals)) if vals else None


# --- run -----------------------------------------------------------------------


@dataclass
class RunReport:
    rows: list[dict]
    summary: list[dict]
    out_dir: Path | None
    fingerprint: str
    traces: list[dict] = field(default_factory=list)


def _coverage(problem: Problem, prompt, kind: str, cfg: DecoderConfig) -> float | None:
    """Candidate-source mass captured by the top-k set, averaged over all decision states.

    Top-k sets are nested in k, so this is non-decreasing in k.
    """
    if kind == "best_of_n":
        return None
    if kind == "sft":
        return 1.0
    cand, _ = cfg.roles(kind)
    log_table = problem.token_policy(prompt, cfg.beta, cand).log_table(prompt)
    sp = problem.space
    k = cfg.effective_k(problem.vocab.size)
    masses = [np.exp(log_table[i][list(top_k_indices(log_table[i], k))]).sum()
              for i in np.nonzero(sp.decision)[0]]
    return float(np.mean(masses)) if masses else 1.0


def _bounds_apply(problem: Problem, prompt, kind: str, cfg: DecoderConfig) -> bool:
    if kind not in ("tq_direct", "tq_indirect") or cfg.mode != "exact" or cfg.candidate_sampling != "top":
        return False
    if cfg.effective_k(problem.vocab.size) != problem.vocab.size:
        return False
    if kind == "tq_indirect" and problem.baseline_reward is None:
        return False
    r = problem.reward.values(prompt, problem.space)
    return bool(r.min() >= 0 and r.max() <= problem.r_max)


def _job(problem: Problem, config: ExperimentConfig, prompt, kind: str, alpha: float, beta: float, k: int,
         streams: RngStreams):
    try:
        return _cell(problem, config, prompt, kind, alpha, beta, k, streams)
    except Exception as err:
        raise RuntimeError(f"prompt={prompt.id} decoder={kind} alpha={alpha:g} beta={beta:g} k={k}: "
                           f"{type(err).__name__}: {err}") from err


def _cell(problem: Problem, config: ExperimentConfig, prompt, kind: str, alpha: float, beta: float, k: int,
          streams: RngStreams):
    dcfg = config.decoder_config(alpha, beta, k)
    res = decode(kind, problem, prompt, dcfg, streams.spawn(prompt.id, kind))
    reward = trajectory_return(problem.reward, problem.vocab, prompt, res.trajectory)
    # reference points for normalization use the same streams as their own rows
    r_sft = trajectory_return(problem.reward, problem.vocab, prompt,
                              decode("sft", problem, prompt, dcfg, streams.spawn(prompt.id, "sft")).trajectory)
    r_tq = trajectory_return(problem.reward, problem.vocab, prompt,
                             decode("tq_direct", problem, prompt, dcfg,
                                    streams.spawn(prompt.id, "tq_direct")).trajectory)
    try:
        norm = normalized_reward(reward, r_sft, r_tq)
    except ZeroDivisionError:
        norm = None
    row = {
        "schema_version": SCHEMA_VERSION,
        "prompt": prompt.id,
        "decoder": kind,
        "alpha": alpha,
        "beta": beta,
        "k": k,
        "k_effective": dcfg.effective_k(problem.vocab.size),
        "mode": dcfg.mode,
        "response": problem.vocab.render(res.trajectory.response),
        "forced_eos": res.trajectory.forced_eos,
        "reward": reward,
        "normalized_reward": norm,
        "diversity": diversity(res.trajectory),
        "coherence_proxy": coherence_proxy(prompt, res.trajectory, problem.vocab.size),
        "coverage": _coverage(problem, prompt, kind, dcfg),
        "expected_reward": None,
        "kl_alg_sft": None,
        "sub_gap": None,
        "expected_reward_bl": None,
        "bound": None,
    }
    # value of the closed-form aligned policy the transfer decoders target
    row["expected_reward_bl"] = v_of(problem.aligned(prompt, beta, "target").policy, problem.reward)
    if kind in STEP_KINDS and dcfg.mode == "exact" and dcfg.candidate_sampling == "top":
        rho_alg = induced_rho_alg(kind, problem, prompt, dcfg)
        row["expected_reward"] = v_of(rho_alg, problem.reward)
        row["kl_alg_sft"] = kl_trajectory(rho_alg, problem.rho_sft(prompt))
        row["sub_gap"] = sub_gap(prompt, problem.reward, rho_alg)
    if _bounds_apply(problem, prompt, kind, dcfg):
        rep = bound_check(problem, prompt, beta, alpha, kind=kind).to_json()
        rep["informational"] = kind != "tq_direct"
        row["bound"] = rep
    trace = None
    if config.output.traces:
        trace = {"prompt": prompt.id, "decoder": kind, "alpha": alpha, "beta": beta, "k": k,
                 "steps": [s.to_json() for s in res.steps]}
    return row, trace


def summarize(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["decoder"], row["alpha"], row["beta"], row["k"]), []).append(row)
    out = []
    for (kind, alpha, beta, k), members in groups.items():
        entry = {"decoder": kind, "alpha": alpha, "beta": beta, "k": k, "n": len(members)}
        for f in SUMMARY_FIELDS[5:]:
            entry[f] = _mean([m[f] for m in members])
        out.append(entry)
    return out


def run(config: ExperimentConfig, out_dir=None, problem: Problem | None = None) -> RunReport:
    """Decode every (prompt, decoder, alpha, beta, k) cell and write the result files.

    Output is byte-identical for a fixed config regardless of ``workers``.
    """
    problem = problem or build_problem(config)
    streams = RngStreams(config.seed)
    a = config.align
    jobs = [(prompt, kind, alpha, beta, k)
            for beta, alpha, k in product(a.beta, a.alpha, a.k)
            for prompt in problem.prompts
            for kind in config.decoders.roster]

    def work(job):
        return _job(problem, config, *job, streams)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    rows = [r for r, _ in results]
    traces = [t for _, t in results if t is not None]
    summary = summarize(rows)
    report = RunReport(rows, summary, None, config.fingerprint(), traces)
    target = out_dir if out_dir is not None else config.output.dir
    if target is not None:
        report.out_dir = write_run(report, config, Path(target))
    return report


def write_run(report: RunReport, config: ExperimentConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "fingerprint": report.fingerprint, "seed": config.seed,
                "config": config.model_dump(mode="json")}
    (out / "manifest.json").write_text(json.dumps(_clean(manifest), sort_keys=True, indent=2) + "\n")
    _write_jsonl(out / "rows.jsonl", report.rows)
    _write_jsonl(out / "bounds.jsonl", [dict(r["bound"], decoder=r["decoder"]) for r in report.rows if r["bound"]])
    _write_csv(out / "summary.csv", SUMMARY_FIELDS, [[s[f] for f in SUMMARY_FIELDS] for s in report.summary])
    _write_csv(out / "tradeoff.csv", ("decoder", "alpha", "beta", "k", "kl_alg_sft", "expected_reward", "reward"),
               [[s["decoder"], s["alpha"], s["beta"], s["k"], s["kl_alg_sft"], s["expected_reward"], s["reward"]]
                for s in report.summary])
    if config.output.traces:
        _write_jsonl(out / "traces.jsonl", report.traces)
    return out


# --- sweep ---------------------------------------------------------------------

AXES = ("alpha", "beta", "k")


def sweep(config: ExperimentConfig, axis: str, out_dir=None) -> list[dict]:
    """Vary one of alpha / beta / k over its configured list, the others pinned to their first value."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    data = config.model_dump()
    for other in AXES:
        if other != axis:
            data["align"][other] = data["align"][other][:1]
    report = run(parse_config(data), out_dir)
    curves = [dict(decoder=s["decoder"], axis=axis, value=s[axis], reward=s["reward"],
                   expected_reward=s["expected_reward"], kl_alg_sft=s["kl_alg_sft"], diversity=s["diversity"],
                   coverage=s["coverage"], expected_reward_bl=s["expected_reward_bl"]) for s in report.summary]
    if report.out_dir is not None:
        cols = ("decoder", "axis", "value", "reward", "expected_reward", "kl_alg_sft", "diversity", "coverage",
                "expected_reward_bl")
        _write_csv(report.out_dir / f"curves_{axis}.csv", cols, [[c[f] for f in cols] for c in curves])
    return curves


# --- verify --------------------------------------------------------------------


def objective_shortfall(table, true_scores: np.ndarray) -> float:
    """Largest gap between the closed-form optimum of the per-step objective and
    the value attained by the table's decoding policy, evaluated on ``true_scores``."""
    worst = 0.0
    sp = table.space
    alpha = 1.0 / table.scale
    for i in np.nonzero(sp.decision)[0]:
        dist = table.step(i)
        cands = list(dist.candidates)
        if not cands:
            continue
        base = table.anchor_log[i]
        opt = alpha * logsumexp(base[cands] + true_scores[i][cands] / alpha)
        got = step_objective(dist.probs, np.nan_to_num(true_scores[i]), base, alpha)
        worst = max(worst, float(opt - got))
    return worst


@dataclass
class VerifyReport:
    checks: list[dict]
    failures: list[dict]
    worst_slack_1: float
    worst_slack_2: float
    worst_partition_error: float
    worst_indirect_gap: float
    worst_objective_shortfall: float

    @property
    def passed(self) -> bool:
        return not self.failures


def _verify_one(idx: int, problem: Problem, beta: float, alpha: float, corrupt: float) -> list[dict]:
    out = []
    for prompt in problem.prompts:
        rec = {"instance": idx, "prompt": prompt.id, "vocab_size": problem.vocab.size, "horizon": problem.horizon,
               "beta": beta, "alpha": alpha, "problems": []}
        rep = bound_check(problem, prompt, beta, alpha, score_perturbation=corrupt)
        rec["bound"] = rep.to_json()
        if not rep.passed:
            rec["problems"].append("bounds")
        cfg = DecoderConfig(alpha=alpha, beta=beta, k=problem.vocab.size)
        try:
            rho_r = problem.transferred(prompt, beta)
            expected = problem.aligned(prompt, beta, "target").log_partition - \
                problem.aligned(prompt, beta, "baseline").log_partition
            rec["partition_error"] = abs(math.expm1(rho_r.log_transfer_normalizer - expected))
            direct = exact_scores("tq_direct", problem, prompt, cfg)
            indirect = exact_scores("tq_indirect", problem, prompt, cfg)
            both = np.isfinite(direct) & np.isfinite(indirect)
            rec["indirect_gap"] = float(np.max(np.abs(direct[both] - indirect[both]), initial=0.0))
        except NormalizerMismatchError:
            rec["partition_error"] = math.inf
            rec["indirect_gap"] = math.inf
        if rec["partition_error"] > PARTITION_TOL:
            rec["problems"].append("partition")
        if rec["indirect_gap"] > SCORE_TOL:
            rec["problems"].append("indirect")
        table = step_table("tq_direct", problem, prompt, cfg)
        true_scores = table.scores
        if corrupt:
            scores = table.scores.copy()
            scores[0, 0] += corrupt
            table = type(table)(table.space, table.candidate_log, table.anchor_log, scores, table.scale, table.k)
        rec["objective_shortfall"] = objective_shortfall(table, true_scores)
        if rec["objective_shortfall"] > OBJECTIVE_TOL:
            rec["problems"].append("objective")
        out.append(rec)
    return out


def verify(config: ExperimentConfig, n_instances: int | None = None, corrupt: float = 0.0,
           out_dir=None) -> VerifyReport:
    """Check the decoding guarantees on a seeded suite of random instances."""
    v = config.verify
    n = n_instances if n_instances is not None else v.instances
    suite = random_suite(config.seed, n, tuple(v.vocab), tuple(v.horizon), tuple(v.beta), tuple(v.alpha),
                         v.concentration)
    checks = []
    for idx, (problem, beta, alpha) in enumerate(suite):
        checks.extend(_verify_one(idx, problem, beta, alpha, corrupt))
    report = VerifyReport(
        checks,
        [c for c in checks if c["problems"]],
        min(c["bound"]["slack_1"] for c in checks),
        min(c["bound"]["slack_2"] for c in checks),
        max(c["partition_error"] for c in checks),
        max(c["indirect_gap"] for c in checks),
        max(c["objective_shortfall"] for c in checks),
    )
    target = out_dir if out_dir is not None else config.output.dir
    if target is not None:
        out = Path(target)
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / "verify.jsonl", checks)
    return report


# --- oracle dumps --------------------------------------------------------------

ORACLES = ("qstar", "qpi", "rho", "partition")


def oracle(config: ExperimentConfig, what: str, out_dir=None) -> str:
    """Exact reference tables as CSV text (also written to ``out_dir`` when given)."""
    if what not in ORACLES:
        raise ValueError(f"unknown oracle {what!r}; choose from {ORACLES}")
    problem = build_problem(config)
    sp, vocab = problem.space, problem.vocab
    betas = config.align.beta
    rows = []
    if what in ("qstar", "qpi"):
        header = ("prompt", "state", "token", "value")
        for prompt in problem.prompts:
            table = (q_star_table(problem.reward, prompt, sp) if what == "qstar"
                     else q_pi_table(problem.pi_sft, problem.reward, prompt)).values
            for i in np.nonzero(sp.decision)[0]:
                for z in range(vocab.size):
                    if math.isfinite(table[i, z]):
                        rows.append([prompt.id, vocab.render(sp.contents[i]), vocab.tokens[z], float(table[i, z])])
    elif what == "rho":
        header = ("prompt", "response", "reward", "rho_sft") + tuple(f"rho_beta={b:g}" for b in betas)
        for prompt in problem.prompts:
            r = problem.reward.values(prompt, sp)
            rho_sft = problem.rho_sft(prompt).probs
            aligned = [problem.aligned(prompt, b).policy.probs for b in betas]
            for i in range(sp.size):
                traj = sp.trajectory(i)
                rows.append([prompt.id, vocab.render(traj.response), float(r[i]), float(rho_sft[i])]
                            + [float(p[i]) for p in aligned])
    else:
        header = ("prompt", "beta", "log_partition", "partition")
        for prompt in problem.prompts:
            for b in betas:
                lz = problem.aligned(prompt, b).log_partition
                rows.append([prompt.id, b, float(lz), float(np.exp(lz))])
    path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        path = Path(out_dir) / f"oracle_{what}.csv"
    return _write_csv(path, header, rows)
