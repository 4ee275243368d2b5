"""Command-line entry point.

Exit codes: 0 success, 1 bad usage or config, 2 a verification check failed,
3 runtime error.
"""

from __future__ import annotations

import sys

import click

from . import runner
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .mdp import EnumerationCapExceeded

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3


class VerificationFailed(Exception):
    pass


def _load(path, seed, out_dir, mode) -> ExperimentConfig:
    cfg = load_config(path) if path else parse_config({})
    return cfg.with_overrides(seed=seed, out_dir=out_dir, mode=mode)


_common = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                 help="TOML experiment config (defaults to the built-in settings)."),
    click.option("--seed", type=int, default=None, help="Override the master seed."),
    click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Override the output directory."),
    click.option("--mode", type=click.Choice(["exact", "mc"]), default=None, help="Score computation mode."),
]


def common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Decoding-time alignment experiments on exactly enumerable toy MDPs."""


@cli.command("run")
@click.argument("config_file", type=click.Path(dir_okay=False), required=False)
@common
def run_cmd(config_file, config_path, seed, out_dir, mode):
    """Decode every configured cell and write the result files."""
    cfg = _load(config_file or config_path, seed, out_dir, mode)
    report = runner.run(cfg)
    click.echo(f"wrote {len(report.rows)} rows to {report.out_dir}")
    for s in report.summary:
        click.echo(f"  {s['decoder']:<12} alpha={s['alpha']:g} beta={s['beta']:g} k={s['k']} "
                   f"reward={s['reward']:.4f}")


@cli.command("sweep")
@click.argument("config_file", type=click.Path(dir_okay=False), required=False)
@click.option("--axis", type=click.Choice(list(runner.AXES)), required=True)
@common
def sweep_cmd(config_file, axis, config_path, seed, out_dir, mode):
    """Vary alpha, beta or k and write per-decoder curves."""
    cfg = _load(config_file or config_path, seed, out_dir, mode)
    for c in runner.sweep(cfg, axis):
        kl = "n/a" if c["kl_alg_sft"] is None else f"{c['kl_alg_sft']:.4f}"
        click.echo(f"{c['decoder']:<12} {axis}={c['value']:g} reward={c['reward']:.4f} kl={kl}")


@cli.command("verify")
@click.argument("config_file", type=click.Path(dir_okay=False), required=False)
@click.option("--instances", type=click.IntRange(min=1), default=None, help="Number of random instances.")
@click.option("--corrupt", type=float, default=0.0, hidden=True)
@common
def verify_cmd(config_file, instances, corrupt, config_path, seed, out_dir, mode):
    """Check the decoding guarantees on seeded random instances."""
    cfg = _load(config_file or config_path, seed, out_dir, mode)
    rep = runner.verify(cfg, instances, corrupt=corrupt)
    n = len({c["instance"] for c in rep.checks})
    click.echo(f"checked {len(rep.checks)} prompt(s) over {n} instance(s)")
    click.echo(f"worst slack: suboptimality {rep.worst_slack_1:.6g}, KL {rep.worst_slack_2:.6g}")
    click.echo(f"worst partition error {rep.worst_partition_error:.3g}, indirect/direct gap "
               f"{rep.worst_indirect_gap:.3g}, objective shortfall {rep.worst_objective_shortfall:.3g}")
    if not rep.passed:
        for f in rep.failures[:10]:
            click.echo(f"FAIL instance {f['instance']} prompt {f['prompt']}: {', '.join(f['problems'])}", err=True)
        raise VerificationFailed(f"{len(rep.failures)} check(s) failed")
    click.echo("all checks passed")


@cli.command("oracle")
@click.argument("config_file", type=click.Path(dir_okay=False), required=False)
@click.option("--what", type=click.Choice(list(runner.ORACLES)), required=True)
@common
def oracle_cmd(config_file, what, config_path, seed, out_dir, mode):
    """Print exact reference tables as CSV."""
    cfg = _load(config_file or config_path, seed, None, mode)
    click.echo(runner.oracle(cfg, what, out_dir), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="tqlab", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        return EXIT_USAGE
    except (click.UsageError, ConfigError) as e:
        click.echo(f"error: {e.format_message() if isinstance(e, click.UsageError) else e}", err=True)
        return EXIT_USAGE
    except VerificationFailed as e:
        click.echo(f"verification failed: {e}", err=True)
        return EXIT_VERIFY
    except EnumerationCapExceeded as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        click.echo(f"runtime error: {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
