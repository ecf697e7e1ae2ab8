"""Experiment orchestration: training runs, evaluation, analysis, grids and synthetic data."""

import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import structlog
from rich.console import Console
from rich.table import Table

from . import __version__
from .config import (
    GridSpec,
    build_config,
    config_as_strings,
    default_run_root,
    read_config_values,
    read_grid,
)
from .data import encode, prepare_datasets, read_csv, synth_generate, write_csv
from .diffcore import set_precision
from .errors import CheckpointError, DataError
from .losses import tf_loss_curve
from .models import GridCellResult, HardSelection, MetricsReport, ModelConfig, RunManifest
from .network import TwinFocusNetwork
from .storage import (
    CATEGORY_COLUMNS,
    GRADNORM_COLUMNS,
    HISTORY_COLUMNS,
    TIMING_COLUMNS,
    RunStore,
)
from .trainer import TrainResult, Trainer, evaluate

logger = structlog.get_logger(__name__)
console = Console(stderr=True)

# grid axes already covered by the ssem/dfm/loss labels, or pooled over
SUMMARY_SKIP_AXES = frozenset({"ssem_variant", "dfm_variant", "loss", "seed"})


@dataclass
class TrainingOutcome:
    run_dir: Path
    result: TrainResult


def make_run_id(config: ModelConfig) -> str:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    return (
        f"{config.ssem_variant.value}-{config.dfm_variant.value}-"
        f"{config.loss.value}-s{config.seed}-{stamp}"
    )


class ExperimentPipeline:
    """Main entry point for every experiment the CLI can run."""

    def __init__(self, run_root: Optional[Path] = None, quiet: bool = False):
        """Initialize the pipeline with the default output root."""
        self.run_root = Path(run_root) if run_root else default_run_root()
        self.quiet = quiet

    def _say(self, message: str) -> None:
        if not self.quiet:
            console.print(message)

    def run_training(self, config: ModelConfig, out_dir: Optional[Path] = None) -> TrainingOutcome:
        """Load data, train, and write every run artifact."""
        self._say("[bold blue]Step 1: Loading data[/bold blue]")
        prepared = prepare_datasets(config)
        self._say(
            f"[green]✓ {len(prepared.train)} train / {len(prepared.valid)} valid / "
            f"{len(prepared.test)} test rows[/green]"
        )

        run_id = make_run_id(config)
        store = RunStore(Path(out_dir) if out_dir else self.run_root / run_id).create()
        store.clear_metrics()
        store.write_config(config)
        store.write_vocab(prepared.vocabs)
        store.write_manifest(
            RunManifest(
                run_id=run_id,
                config=config_as_strings(config),
                seed=config.seed,
                code_version=__version__,
                outputs=store.output_paths(),
            )
        )

        self._say("[bold blue]Step 2: Training[/bold blue]")
        try:
            result = Trainer(config, prepared.train, prepared.valid, prepared.test, store).train()
        except Exception as e:
            self._say(f"[red]✗ Training failed: {str(e)}[/red]")
            logger.error("Training step failed", run_dir=str(store.run_dir), error=str(e))
            raise

        store.save_checkpoint(result.network, epoch=result.state.best_epoch)
        store.write_table(store.history_path, result.history, HISTORY_COLUMNS)
        store.write_table(store.gradnorm_path, result.gradnorms, GRADNORM_COLUMNS)
        store.write_table(store.timing_path, result.timings, TIMING_COLUMNS)
        store.write_table(store.category_path, result.category_rows, CATEGORY_COLUMNS)
        store.append_metrics(result.valid_report)
        if result.test_report is not None:
            store.append_metrics(result.test_report)
        store.mark_finished()

        self._say(
            f"[green]✓ Best epoch {result.state.best_epoch} "
            f"(valid AUC {result.state.best_valid_auc:.5f})[/green]"
        )
        reports = [r for r in (result.valid_report, result.test_report) if r is not None]
        self.display_reports(reports)
        logger.info("Run completed", run_dir=str(store.run_dir))
        return TrainingOutcome(run_dir=store.run_dir, result=result)

    def _restore(self, store: RunStore) -> tuple[ModelConfig, TwinFocusNetwork]:
        if not store.checkpoint_path.exists():
            raise CheckpointError(f"No checkpoint in {store.run_dir}")
        config = store.read_config()
        vocabs = store.read_vocab()
        set_precision(config.precision)
        network = TwinFocusNetwork(config, [v.size for v in vocabs], config.seed)
        store.load_checkpoint(network)
        return config, network

    def run_evaluation(
        self, run_dir: Path, split: str = "test", data_path: Optional[Path] = None
    ) -> MetricsReport:
        """Re-evaluate a run's best checkpoint on one of its splits or on a new CSV."""
        store = RunStore(run_dir)
        config, network = self._restore(store)
        vocabs = store.read_vocab()
        if data_path is not None:
            dataset = encode(read_csv(data_path, config.numeric_fields), vocabs)
            split = Path(data_path).stem
        else:
            dataset = prepare_datasets(config, vocabs).by_name(split)
        if len(dataset) == 0:
            raise DataError(f"Split '{split}' is empty")
        report = evaluate(
            network, dataset, config.thresholds, split=split,
            batch_size=config.eval_batch_size, timed=True,
        )
        store.append_metrics(report)
        self.display_reports([report])
        return report

    def run_analysis(self, run_dir: Path, split: str = "test") -> dict[str, Path]:
        """Category histograms per retained checkpoint and per-epoch gradient-norm means."""
        store = RunStore(run_dir)
        config, network = self._restore(store)
        dataset = prepare_datasets(config, store.read_vocab()).by_name(split)
        if len(dataset) == 0:
            raise DataError(f"Split '{split}' is empty")

        out_dir = store.run_dir / "analysis" / split
        rows: list[dict] = []
        checkpoints = store.epoch_checkpoints() or [store.checkpoint_path]
        self._say(f"[bold blue]Analyzing {len(checkpoints)} checkpoint(s) on {split}[/bold blue]")
        for path in checkpoints:
            epoch = store.load_checkpoint(network, path)
            report = evaluate(
                network, dataset, config.thresholds, split=split,
                batch_size=config.eval_batch_size, epoch=epoch,
            )
            rows.extend(report.category_counts.to_rows(epoch, split))
        hist_path = store.write_table(out_dir / "category_hist.csv", rows, CATEGORY_COLUMNS)
        outputs = {"category_hist": hist_path}

        if store.gradnorm_path.exists():
            norms = pd.read_csv(store.gradnorm_path)
            summary = norms.groupby("epoch", sort=True)[
                ["grad_norm_zs", "grad_norm_zc", "loss_ctr", "loss_tf"]
            ].mean()
            path = out_dir / "gradnorm_summary.csv"
            summary.reset_index().to_csv(path, index=False, lineterminator="\n")
            outputs["gradnorm_summary"] = path
        else:
            logger.warning("No gradient-norm log in run", run_dir=str(store.run_dir))

        self.display_histogram(pd.DataFrame(rows, columns=CATEGORY_COLUMNS))
        return outputs

    def run_grid(self, grid_path: Path, out_dir: Optional[Path] = None) -> dict[str, Path]:
        """Run every grid cell sequentially; failed cells are recorded and skipped."""
        spec = read_grid(grid_path)
        out = Path(out_dir) if out_dir else self.run_root / f"grid-{datetime.now():%Y%m%d-%H%M%S}"
        out.mkdir(parents=True, exist_ok=True)
        base = read_config_values(spec.base_config) if spec.base_config else {}

        console.print(f"[bold green]Starting grid with {spec.size} cell(s)[/bold green]")
        results: list[GridCellResult] = []
        labels: list[dict[str, str]] = []
        for index, cell in enumerate(spec.cells()):
            console.print(f"[bold blue]Cell {index + 1}/{spec.size}: {cell}[/bold blue]")
            cell_result, label = self._run_cell(index, {**base, **cell}, cell, out)
            results.append(cell_result)
            labels.append(label)

        runs = self._grid_runs_frame(spec, results, labels)
        outputs = {"grid_runs": out / "grid_runs.csv", "grid_summary": out / "grid_summary.csv"}
        runs.to_csv(outputs["grid_runs"], index=False, lineterminator="\n")
        summary = self._grid_summary(runs, spec.axes)
        summary.to_csv(outputs["grid_summary"], index=False, lineterminator="\n")

        axes = [k for k in spec.axes if k != "seed"]
        if axes:
            outputs["grid_axes_summary"] = out / "grid_axes_summary.csv"
            self._axes_summary(runs, axes).to_csv(
                outputs["grid_axes_summary"], index=False, lineterminator="\n"
            )

        failed = sum(r.status == "failed" for r in results)
        console.print(
            f"[bold green]Grid finished: {len(results) - failed} ok, {failed} failed[/bold green]"
        )
        self.display_grid_summary(summary)
        return outputs

    def _run_cell(
        self, index: int, values: dict[str, str], overrides: dict[str, str], out: Path
    ) -> tuple[GridCellResult, dict[str, str]]:
        label = {"ssem": "", "dfm": "", "loss": ""}
        try:
            config = build_config(values)
            label = {
                "ssem": config.ssem_variant.value,
                "dfm": config.dfm_variant.value,
                "loss": config.loss.value,
            }
            runner = ExperimentPipeline(self.run_root, quiet=True)
            outcome = runner.run_training(config, out / f"cell_{index:03d}")
            test = outcome.result.test_report or outcome.result.valid_report
            inference = outcome.result.inference
            return (
                GridCellResult(
                    cell=index,
                    overrides=overrides,
                    status="ok",
                    run_dir=str(outcome.run_dir),
                    test_auc=test.auc,
                    test_gauc=test.gauc,
                    test_logloss=test.logloss,
                    per_sample_ms=inference.per_sample_ms if inference else None,
                ),
                label,
            )
        except Exception as e:
            console.print(f"[red]✗ Cell {index} failed: {str(e)}[/red]")
            logger.error("Grid cell failed", cell=index, overrides=overrides, error=str(e))
            return (
                GridCellResult(cell=index, overrides=overrides, status="failed", error=str(e)),
                label,
            )

    @staticmethod
    def _grid_runs_frame(
        spec: GridSpec, results: Sequence[GridCellResult], labels: Sequence[dict]
    ) -> pd.DataFrame:
        records = []
        for result, label in zip(results, labels):
            record = {"cell": result.cell, "status": result.status, **label}
            record.update({key: result.overrides.get(key, "") for key in spec.axes})
            record.update(
                run_dir=result.run_dir,
                test_auc=result.test_auc,
                test_gauc=result.test_gauc,
                test_logloss=result.test_logloss,
                per_sample_ms=result.per_sample_ms,
                error=result.error,
            )
            records.append(record)
        runs = pd.DataFrame(records)
        runs["per_sample_ms"] = pd.to_numeric(runs["per_sample_ms"])

        baseline = runs[
            (runs["ssem"] == "Share") & (runs["dfm"] == "Sum")
            & (runs["loss"] == "logloss") & (runs["status"] == "ok")
        ]
        runs["latency_ratio"] = np.nan
        if len(baseline) and baseline["per_sample_ms"].median() > 0:
            runs["latency_ratio"] = runs["per_sample_ms"] / baseline["per_sample_ms"].median()
        return runs

    @staticmethod
    def _grid_summary(runs: pd.DataFrame, axes: Sequence[str] = ()) -> pd.DataFrame:
        """DFM columns of median test AUC and gAUC.

        Rows are keyed by SSEM, loss and every other non-seed axis, so runs that
        differ in anything but the seed are never pooled.
        """
        index = ["ssem", "loss"] + [a for a in axes if a not in SUMMARY_SKIP_AXES]
        ok = runs[runs["status"] == "ok"].copy()
        if ok.empty:
            return pd.DataFrame(columns=index)
        ok["test_auc"] = ok["test_auc"].astype(float)
        ok["test_gauc"] = ok["test_gauc"].astype(float)
        table = (
            ok.groupby([*index, "dfm"], sort=True)[["test_auc", "test_gauc"]]
            .median()
            .unstack("dfm")
        )
        table.columns = [f"{dfm}_{metric.removeprefix('test_')}" for metric, dfm in table.columns]
        return table.reset_index()

    @staticmethod
    def _axes_summary(runs: pd.DataFrame, axes: Sequence[str]) -> pd.DataFrame:
        ok = runs[runs["status"] == "ok"]
        if ok.empty:
            return pd.DataFrame(columns=[*axes, "runs", "test_auc", "test_gauc"])
        grouped = ok.groupby(list(axes), sort=False)
        summary = grouped[["test_auc", "test_gauc"]].median()
        summary.insert(0, "runs", grouped.size())
        return summary.reset_index()

    def run_synth(
        self,
        out: Path,
        rows: int,
        fields: int,
        vocab_size: int,
        hard_fraction: float,
        seed: int,
        users: int = 0,
        signal_scale: float = 6.0,
        hard_selection: HardSelection = HardSelection.RANDOM,
    ) -> tuple[Path, Path]:
        """Write a synthetic CSV and its ground-truth JSON sidecar."""
        dataset, truth = synth_generate(
            rows, fields, vocab_size, hard_fraction, seed,
            n_users=users, signal_scale=signal_scale, hard_selection=hard_selection,
        )
        csv_path = write_csv(dataset, Path(out))
        truth_path = csv_path.with_suffix(".truth.json")
        truth_json = json.dumps(truth.model_dump(mode="json"), indent=2)
        truth_path.write_text(truth_json + "\n", encoding="utf-8")
        self._say(f"[green]✓ Wrote {rows} rows to {csv_path}[/green]")
        return csv_path, truth_path

    def run_curves(
        self, out: Path, cs: Sequence[float], gammas: Sequence[float], points: int = 99
    ) -> Path:
        """Tabulate the TF Loss of a positive sample for every (c, gamma) pair."""
        grid = np.linspace(0.01, 0.99, points)
        frame = pd.concat(
            [tf_loss_curve(grid, c, gamma) for c in cs for gamma in gammas], ignore_index=True
        )
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out, index=False, lineterminator="\n")
        return out

    def display_reports(self, reports: Sequence[MetricsReport]) -> None:
        if self.quiet or not reports:
            return
        table = Table(title="Evaluation")
        table.add_column("Split", style="cyan")
        for column in ("AUC", "gAUC", "LogLoss", "Rows", "ms/sample"):
            table.add_column(column, style="green")
        for r in reports:
            table.add_row(
                r.split,
                "-" if r.auc is None else f"{r.auc:.5f}",
                "-" if r.gauc is None else f"{r.gauc:.5f}",
                f"{r.logloss:.5f}",
                str(r.n_rows),
                f"{r.per_sample_ms:.4f}",
            )
        console.print(table)

    def display_histogram(self, rows: pd.DataFrame) -> None:
        if self.quiet or rows.empty:
            return
        table = Table(title="Sample categories")
        for column in CATEGORY_COLUMNS:
            table.add_column(column, style="cyan" if column != "count" else "green")
        for record in rows.itertuples(index=False):
            table.add_row(*(str(v) for v in record))
        console.print(table)

    def display_grid_summary(self, summary: pd.DataFrame) -> None:
        if summary.empty:
            return
        table = Table(title="Grid summary (median over seeds)")
        for column in summary.columns:
            table.add_column(str(column), style="cyan" if column == "ssem" else "green")
        for record in summary.itertuples(index=False):
            table.add_row(
                *(
                    f"{v:.5f}" if isinstance(v, float) and not np.isnan(v) else str(v)
                    for v in record
                )
            )
        console.print(table)
