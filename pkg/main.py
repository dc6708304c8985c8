"""
Main entry point for metaopf.
"""

import functools
import logging
import os
import sys
from typing import Any, Callable, Dict, Optional

import click
from dotenv import load_dotenv

from config import METHODS, SWEEP_AXES, ConfigError, ExperimentConfig
from datagen import CorpusError, CorpusExistsError, TopologySamplingError
from evaluate import ReportError
from experiment import ExperimentRunner
from grid import CaseFormatError, NetworkValidationError


EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_BAD_INPUT = 2
EXIT_REFUSED = 3


class ColoredFormatter(logging.Formatter):
    """Colored formatter for metaopf logs."""

    # ANSI color codes
    COLORS = {
        'DEBUG': '\033[36m',      # Cyan
        'INFO': '\033[32m',       # Green
        'WARNING': '\033[33m',    # Yellow
        'ERROR': '\033[31m',      # Red
        'CRITICAL': '\033[35m',   # Magenta
    }

    # Component colors
    COMPONENT_COLORS = {
        'experiment': '\033[94m',    # Blue
        'datagen': '\033[93m',       # Yellow
        'meta': '\033[95m',          # Magenta
        'neuralnet': '\033[96m',     # Cyan
        'opf': '\033[92m',           # Green
        'powerflow': '\033[91m',     # Red
        'case_ingest': '\033[90m',   # Dark gray
        'evaluate': '\033[97m',      # White
    }

    RESET = '\033[0m'
    BOLD = '\033[1m'

    def format(self, record):
        level_color = self.COLORS.get(record.levelname, '')
        component_name = record.name.split('.')[-1]
        component_color = self.COMPONENT_COLORS.get(component_name, '')
        timestamp = self.formatTime(record)

        if level_color or component_color:
            formatted = f"{self.BOLD}{level_color}[{record.levelname}]{self.RESET} "
            formatted += f"{component_color}[{component_name}]{self.RESET} "
            formatted += f"{timestamp} - {record.getMessage()}"
        else:
            formatted = f"[{record.levelname}] [{component_name}] {timestamp} - {record.getMessage()}"
        return formatted


def setup_logging(verbose: bool = False):
    """Setup colored logging on stdout."""
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(ColoredFormatter())

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    root_logger.handlers = [console_handler]

    # Quiet third-party loggers
    for name in ('matplotlib', 'numexpr', 'urllib3'):
        logging.getLogger(name).setLevel(logging.WARNING)


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, CorpusExistsError):
        return EXIT_REFUSED
    if isinstance(
        error,
        (ConfigError, CaseFormatError, NetworkValidationError, CorpusError, ReportError,
         TopologySamplingError, FileNotFoundError),
    ):
        return EXIT_BAD_INPUT
    return EXIT_INTERNAL


def handle_errors(command: Callable) -> Callable:
    """Run a command body and turn exceptions into exit codes."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            command(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except Exception as e:
            code = exit_code_for(e)
            logging.getLogger("metaopf").error(f"{type(e).__name__}: {e}", exc_info=code == EXIT_INTERNAL)
            click.echo(f"error: {e}", err=True)
            sys.exit(code)
        sys.exit(EXIT_OK)

    return wrapper


def run_options(command: Callable) -> Callable:
    """Accept --case and --seed after the subcommand name as well as on the group."""

    @functools.wraps(command)
    def wrapper(*args, case: Optional[str] = None, seed: Optional[int] = None, **kwargs):
        ctx = click.get_current_context()
        if case is not None:
            ctx.obj["case"] = case
        if seed is not None:
            ctx.obj["seed"] = seed
        return command(*args, **kwargs)

    wrapper = click.option("--seed", type=int, help="Master seed")(wrapper)
    return click.option("--case", type=str, help="MATPOWER case file")(wrapper)


def load_config(ctx: click.Context, overrides: Dict[str, Any], require_case: bool = True) -> ExperimentConfig:
    """Defaults, then the JSON file, then METAOPF_* variables, then command-line flags."""
    options = ctx.obj
    config = ExperimentConfig()
    if options.get("config"):
        config = ExperimentConfig.from_json(options["config"], config)
    config = ExperimentConfig.from_env(config)
    flags = {
        "case_path": options.get("case"),
        "corpus_dir": options.get("corpus_dir"),
        "run_dir": options.get("run_dir"),
        "seed": options.get("seed"),
        "threads": options.get("threads"),
        **overrides,
    }
    config = config.merged(flags)
    cap = os.getenv("METAOPF_THREADS")
    if cap and cap.isdigit():
        config = config.merged({"threads": max(1, min(config.threads, int(cap)))})
    if not sys.stderr.isatty():
        config = config.merged({"progress": False})
    return config.validate(require_case=require_case)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON experiment config")
@click.option("--case", type=str, help="MATPOWER case file")
@click.option("--corpus-dir", type=str, help="Root directory for corpora")
@click.option("--run-dir", type=str, help="Root directory for checkpoints, traces and reports")
@click.option("--seed", type=int, help="Master seed")
@click.option("--threads", type=int, help="Worker processes (capped by METAOPF_THREADS)")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx, config_path, case, corpus_dir, run_dir, seed, threads, verbose):
    """Meta-learned OPF predictors for changing grid topologies."""
    setup_logging(verbose)
    load_dotenv()
    ctx.obj = {
        "config": config_path,
        "case": case,
        "corpus_dir": corpus_dir,
        "run_dir": run_dir,
        "seed": seed,
        "threads": threads,
    }


@cli.command()
@run_options
@click.option("--m", "m_total", type=int, help="Number of topologies")
@click.option("--m-offline", type=int, help="Topologies used offline")
@click.option("--k", "k_per_topology", type=int, help="Samples per topology")
@click.option("--lambda", "calibration_lambda", type=float, help="Voltage-bound calibration margin")
@click.option("--test-samples", type=int, help="Held-out samples per online topology")
@click.option("--force", is_flag=True, help="Overwrite an existing corpus")
@click.pass_context
@handle_errors
def gen(ctx, m_total, m_offline, k_per_topology, calibration_lambda, test_samples, force):
    """Generate the topology/load/OPF corpus."""
    config = load_config(ctx, {
        "m_total": m_total,
        "m_offline": m_offline,
        "k_per_topology": k_per_topology,
        "calibration_lambda": calibration_lambda,
        "test_samples": test_samples,
    })
    corpus = ExperimentRunner(config).generate(force=force)
    excluded = corpus.manifest["exclusions"]
    click.echo(f"corpus written to {config.corpus_path}")
    click.echo(f"  topologies: {len(corpus.offline)} offline, {len(corpus.online)} online")
    click.echo(f"  excluded samples: {sum(excluded.values())} total")
    for tid, count in sorted(excluded.items(), key=lambda kv: int(kv[0])):
        if count:
            click.echo(f"    topology {tid}: {count}")


@cli.command()
@run_options
@click.option("--method", "methods", multiple=True, type=click.Choice(METHODS), help="Offline method(s) to run")
@click.pass_context
@handle_errors
def train(ctx, methods):
    """Run offline training for the selected methods."""
    config = load_config(ctx, {"methods": list(methods) or None})
    timings = ExperimentRunner(config).train(config.methods)
    for method, seconds in timings.items():
        click.echo(f"{method}: {seconds:.2f}s")


@cli.command()
@run_options
@click.option("--method", "methods", multiple=True, type=click.Choice(METHODS), help="Method(s) to adapt")
@click.option("--sweep", type=click.Choice(SWEEP_AXES), help="Sweep axis")
@click.option("--epochs", "adapt_epochs", type=int, help="Online epochs")
@click.option("--gamma", type=float, help="Online step size")
@click.option("--samples", "adapt_samples", type=int, help="Online training samples")
@click.option("--record-wall-clock", is_flag=True, default=None, help="Fill the wall_clock_ms column")
@click.pass_context
@handle_errors
def adapt(ctx, methods, sweep, adapt_epochs, gamma, adapt_samples, record_wall_clock):
    """Adapt every method to every online topology and write traces."""
    overrides: Dict[str, Any] = {
        "methods": list(methods) or None,
        "adapt_epochs": adapt_epochs,
        "gamma": gamma,
        "adapt_samples": adapt_samples,
        "record_wall_clock": record_wall_clock,
    }
    config = load_config(ctx, overrides)
    if config.adapt_epochs not in config.report_epochs:
        config = config.merged({"report_epochs": [e for e in config.report_epochs if e < config.adapt_epochs]})
    for path in ExperimentRunner(config).adapt(config.methods, sweep=sweep):
        click.echo(str(path))


@cli.command()
@run_options
@click.argument("traces", nargs=-1, type=click.Path(dir_okay=False))
@click.pass_context
@handle_errors
def report(ctx, traces):
    """Aggregate traces into table and figure CSVs."""
    config = load_config(ctx, {}, require_case=False)
    summary = ExperimentRunner(config).report(traces)
    for row in summary.get("online", []):
        cells = "  ".join(f"{k}={v:.4f}" for k, v in row.items() if k.startswith("epoch_"))
        click.echo(f"{row['metric']:<5} {row['method']:<10} {cells}")
    for row in summary.get("feasibility", []):
        click.echo(f"feasibility {row['method']:<10} {row[config.case_name]:.4f}")
    click.echo(f"reports written to {config.run_path / 'reports'}")


@cli.command()
@run_options
@click.option("--load-scale", type=float, default=1.0, show_default=True, help="Multiplier on base demand")
@click.option("--topology", "topology_id", type=int, help="Audit a corpus topology instead of the base case")
@click.pass_context
@handle_errors
def audit(ctx, load_scale: float, topology_id: Optional[int]):
    """Solve one OPF and print its constraint audit as JSON."""
    config = load_config(ctx, {})
    click.echo(ExperimentRunner(config).audit(load_scale=load_scale, topology_id=topology_id))


if __name__ == "__main__":
    cli()
