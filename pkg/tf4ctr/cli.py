"""Command-line interface for the tf4ctr training stack."""

import logging
import sys
from pathlib import Path
from typing import NoReturn, Optional

import click
import structlog
from dotenv import load_dotenv

from .config import load_config
from .errors import Tf4CtrError
from .pipeline import ExperimentPipeline

# Load environment variables
load_dotenv()


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def configure_logging(verbose: bool = False) -> None:
    """JSON logs on stderr; ``--verbose`` switches to the console renderer at DEBUG."""
    logging.basicConfig(
        format="%(message)s",
        handlers=[_StderrHandler()],
        level=logging.DEBUG if verbose else logging.INFO,
        force=True,
    )
    renderer = (
        structlog.dev.ConsoleRenderer() if verbose else structlog.processors.JSONRenderer()
    )
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            renderer,
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )


configure_logging()
logger = structlog.get_logger(__name__)


def _fail(action: str, error: Exception) -> NoReturn:
    """Report a failure on stderr and exit with the error's code."""
    code = error.exit_code if isinstance(error, Tf4CtrError) else 1
    click.echo(f"❌ {action} failed: {str(error)}", err=True)
    logger.error(f"{action} failed", error=str(error), exit_code=code)
    click.get_current_context().exit(code)


def _floats(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}") from None


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
def cli(verbose):
    """TF4CTR experiment CLI."""
    configure_logging(verbose)


@cli.command()
@click.option("--config", "config_path", type=click.Path(path_type=Path), help="Config file")
@click.option("--set", "overrides", multiple=True, help="Override a key: --set key=value")
@click.option("--out", type=click.Path(path_type=Path), help="Run directory")
@click.option("--seed", type=int, help="Random seed (overrides the config)")
def train(config_path: Optional[Path], overrides, out: Optional[Path], seed: Optional[int]):
    """Train one model and write a run directory."""
    try:
        config = load_config(config_path, overrides, seed)
        outcome = ExperimentPipeline().run_training(config, out)
        click.echo(str(outcome.run_dir))
    except Exception as e:
        _fail("Training", e)


@cli.command(name="eval")
@click.option("--run", "run_dir", required=True, type=click.Path(path_type=Path))
@click.option("--split", default="test", type=click.Choice(["train", "valid", "test"]))
@click.option("--data", "data_path", type=click.Path(path_type=Path), help="Evaluate on this CSV")
def evaluate_cmd(run_dir: Path, split: str, data_path: Optional[Path]):
    """Evaluate a run's best checkpoint."""
    try:
        report = ExperimentPipeline().run_evaluation(run_dir, split, data_path)
        click.echo(report.model_dump_json())
    except Exception as e:
        _fail("Evaluation", e)


@cli.command()
@click.option("--run", "run_dir", required=True, type=click.Path(path_type=Path))
@click.option("--split", default="test", type=click.Choice(["train", "valid", "test"]))
def analyze(run_dir: Path, split: str):
    """Category histograms per checkpoint and gradient-norm summaries."""
    try:
        outputs = ExperimentPipeline().run_analysis(run_dir, split)
        for path in outputs.values():
            click.echo(str(path))
    except Exception as e:
        _fail("Analysis", e)


@cli.command()
@click.option("--grid", "grid_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), help="Grid output directory")
def grid(grid_path: Path, out: Optional[Path]):
    """Run a grid of configurations sequentially."""
    try:
        outputs = ExperimentPipeline().run_grid(grid_path, out)
        for path in outputs.values():
            click.echo(str(path))
    except Exception as e:
        _fail("Grid", e)


@cli.command()
@click.option("--rows", default=20000, show_default=True, type=int)
@click.option("--fields", default=5, show_default=True, type=int)
@click.option("--vocab-size", default=20, show_default=True, type=int, help="Tokens per field")
@click.option("--hard-fraction", default=0.0, show_default=True, type=float)
@click.option("--seed", default=2024, show_default=True, type=int)
@click.option("--users", default=0, show_default=True, type=int, help="Add a user_id column")
@click.option("--signal-scale", default=6.0, show_default=True, type=float)
@click.option(
    "--hard-selection",
    type=click.Choice(["random", "token"], case_sensitive=False),
    default="random",
    show_default=True,
    help="Flip uniformly random rows, or the rows holding a subset of the first field's tokens",
)
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Output CSV")
def synth(rows, fields, vocab_size, hard_fraction, seed, users, signal_scale, hard_selection, out):
    """Generate a synthetic dataset with a planted model and hard rows."""
    try:
        csv_path, truth_path = ExperimentPipeline().run_synth(
            out, rows, fields, vocab_size, hard_fraction, seed, users, signal_scale, hard_selection
        )
        click.echo(str(csv_path))
        click.echo(str(truth_path))
    except Exception as e:
        _fail("Synthetic generation", e)


@cli.command()
@click.option("--c", "cs", default="0.3,0.5,0.7,1.0", show_default=True, help="c values")
@click.option("--gamma", "gammas", default="1,2,3", show_default=True, help="gamma values")
@click.option("--points", default=99, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Output CSV")
def curves(cs: str, gammas: str, points: int, out: Path):
    """Tabulate TF Loss curves of a positive sample."""
    try:
        path = ExperimentPipeline().run_curves(out, _floats(cs), _floats(gammas), points)
        click.echo(str(path))
    except click.BadParameter:
        raise
    except Exception as e:
        _fail("Curve export", e)


if __name__ == "__main__":
    cli()
