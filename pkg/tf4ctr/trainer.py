"""Training loop: Adam, global-norm clipping, LR decay, early stopping on validation AUC."""

import math
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
import structlog

from .data import Batch, Dataset, batches
from .diffcore import Graph, Tensor, set_precision
from .errors import ArgumentError, ConfigError, DataError, NonFiniteError, ShapeError
from .losses import logit_grad_norm, total_loss
from .metrics import ScoredSet, Timing, report, timeit
from .models import (
    EpochRecord,
    GradNormRecord,
    LossReport,
    MetricsReport,
    ModelConfig,
    TimingRecord,
)
from .network import TwinFocusNetwork

if TYPE_CHECKING:
    from .storage import RunStore

logger = structlog.get_logger(__name__)


@dataclass
class AdamState:
    """First and second moments per parameter plus the step counter."""

    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update, applied in place."""
    if len(params) != len(grads):
        raise ArgumentError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.value, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p.value, dtype=np.float64) for p in params]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"Gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"Non-finite gradient for parameter {p.name}")

    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.value -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ArgumentError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


@dataclass
class TrainState:
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    best_valid_auc: float = -math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0

    def update(self, epoch: int, valid_auc: float, patience: int) -> tuple[bool, bool]:
        """Record one epoch's validation AUC; returns (improved, should_stop)."""
        self.epoch = epoch
        if valid_auc > self.best_valid_auc:
            self.best_valid_auc = valid_auc
            self.best_epoch = epoch
            self.epochs_since_improve = 0
            return True, False
        self.epochs_since_improve += 1
        return False, self.epochs_since_improve >= patience


@dataclass
class TrainResult:
    network: TwinFocusNetwork
    state: TrainState
    history: list[EpochRecord]
    gradnorms: list[GradNormRecord]
    timings: list[TimingRecord]
    category_rows: list[dict]
    stopped_early: bool
    valid_report: MetricsReport
    test_report: Optional[MetricsReport] = None
    inference: Optional[Timing] = None


def predict_scores(network: TwinFocusNetwork, dataset: Dataset, batch_size: int) -> np.ndarray:
    parts = [network.predict(batch.ids) for batch in batches(dataset, batch_size)]
    return np.concatenate(parts) if parts else np.zeros(0)


INFERENCE_REPEATS = 3


def measure_inference(network: TwinFocusNetwork, dataset: Dataset, batch_size: int) -> Timing:
    """Warmed-up wall clock of one full inference pass, fastest of a few repeats."""

    def run() -> int:
        predict_scores(network, dataset, batch_size)
        return len(dataset)

    return timeit(run, repeats=INFERENCE_REPEATS)


def evaluate(
    network: TwinFocusNetwork,
    dataset: Dataset,
    thresholds: tuple[float, float],
    split: str = "valid",
    batch_size: int = 10000,
    epoch: Optional[int] = None,
    timed: bool = False,
) -> MetricsReport:
    """Deterministic full pass over ``dataset`` (no Gumbel noise, no loss)."""
    start = time.perf_counter()
    scores = predict_scores(network, dataset, batch_size)
    seconds = time.perf_counter() - start if timed else 0.0
    scored = ScoredSet(scores=scores, labels=dataset.labels, user_ids=dataset.user_ids)
    return report(scored, split, thresholds, epoch=epoch, seconds=seconds)


class Trainer:
    """Runs the training algorithm for one configuration."""

    def __init__(
        self,
        config: ModelConfig,
        train: Dataset,
        valid: Dataset,
        test: Optional[Dataset] = None,
        store: Optional["RunStore"] = None,
    ):
        """Initialize the network and optimiser state."""
        if len(train) == 0:
            raise DataError("Training split is empty")
        if len(valid) == 0:
            raise ConfigError("Validation split is empty; early stopping needs validation data")
        set_precision(config.precision)
        self.config = config
        self.train_data = train
        self.valid_data = valid
        self.test_data = test if test is not None and len(test) else None
        self.store = store
        self.network = TwinFocusNetwork(config, train.vocab_sizes, config.seed)
        self.state = TrainState()

    def learning_rate(self, epoch: int) -> float:
        return self.config.learning_rate * self.config.lr_decay ** (epoch - 1)

    def train_step(self, batch: Batch, lr: float) -> LossReport:
        """Forward, backward, clip and update on one batch."""
        params = self.network.parameters()
        self.network.zero_grad()
        try:
            with Graph() as graph:
                trace = self.network.forward(batch.ids, train_mode=True)
                terms = total_loss(trace, batch.labels, self.config)
            grad_zs, grad_zc = graph.backward(
                terms.total, wrt=[trace.simple.logit, trace.complex.logit]
            )
        except NonFiniteError as e:
            logger.error(
                "Training aborted on non-finite values", error=str(e), step=self.state.adam.step
            )
            raise

        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
        grads = clip_global_norm(grads, self.config.clip_norm)
        adam_step(params, grads, self.state.adam, lr)
        return terms.report(logit_grad_norm(grad_zs), logit_grad_norm(grad_zc))

    def run_epoch(self, epoch: int, lr: float) -> tuple[dict[str, float], list[GradNormRecord]]:
        totals = {"loss": 0.0, "ctr": 0.0, "tf": 0.0}
        rows = 0
        gradnorms = []
        data = batches(
            self.train_data,
            self.config.batch_size,
            shuffle=True,
            seed=self.config.seed,
            epoch=epoch,
        )
        for index, batch in enumerate(data):
            result = self.train_step(batch, lr)
            n = len(batch)
            totals["loss"] += result.loss_total * n
            totals["ctr"] += result.loss_ctr * n
            totals["tf"] += result.loss_tf * n
            rows += n
            gradnorms.append(
                GradNormRecord(
                    epoch=epoch,
                    batch_index=index,
                    grad_norm_zs=result.grad_norm_zs,
                    grad_norm_zc=result.grad_norm_zc,
                    loss_ctr=result.loss_ctr,
                    loss_tf=result.loss_tf,
                )
            )
        return {k: v / rows for k, v in totals.items()}, gradnorms

    def _evaluate(self, dataset: Dataset, split: str, epoch: Optional[int] = None, timed=False):
        return evaluate(
            self.network, dataset, self.config.thresholds, split=split,
            batch_size=self.config.eval_batch_size, epoch=epoch, timed=timed,
        )

    def train(self) -> TrainResult:
        history: list[EpochRecord] = []
        gradnorms: list[GradNormRecord] = []
        timings: list[TimingRecord] = []
        category_rows: list[dict] = []
        best_snapshot = self.network.state_dict()
        stopped_early = False

        logger.info(
            "Training started",
            train_rows=len(self.train_data),
            valid_rows=len(self.valid_data),
            max_epochs=self.config.max_epochs,
        )
        for epoch in range(1, self.config.max_epochs + 1):
            lr = self.learning_rate(epoch)
            start = time.perf_counter()
            losses, epoch_norms = self.run_epoch(epoch, lr)
            seconds = time.perf_counter() - start
            gradnorms.extend(epoch_norms)
            timings.append(
                TimingRecord(
                    epoch=epoch,
                    phase="train",
                    seconds=seconds,
                    per_sample_ms=1000.0 * seconds / len(self.train_data),
                )
            )

            valid = self._evaluate(self.valid_data, "valid", epoch)
            if valid.auc is None:
                raise DataError("Validation AUC is undefined: the split holds a single class")
            category_rows.extend(valid.category_counts.to_rows(epoch, "valid"))
            if self.test_data is not None:
                test = self._evaluate(self.test_data, "test", epoch)
                category_rows.extend(test.category_counts.to_rows(epoch, "test"))

            history.append(
                EpochRecord(
                    epoch=epoch,
                    train_loss=losses["loss"],
                    train_loss_ctr=losses["ctr"],
                    train_loss_tf=losses["tf"],
                    valid_auc=valid.auc,
                    valid_gauc=valid.gauc,
                    valid_logloss=valid.logloss,
                    lr=lr,
                )
            )
            if self.store is not None and self.config.keep_epoch_checkpoints:
                self.store.save_checkpoint(self.network, self.store.epoch_checkpoint(epoch), epoch)

            improved, stop = self.state.update(epoch, valid.auc, self.config.patience)
            if improved:
                best_snapshot = self.network.state_dict()
            logger.info(
                "Epoch finished",
                epoch=epoch,
                train_loss=round(losses["loss"], 6),
                valid_auc=round(valid.auc, 6),
                best_epoch=self.state.best_epoch,
                seconds=round(seconds, 3),
            )
            if stop:
                stopped_early = True
                logger.info("Early stopping", epoch=epoch, best_epoch=self.state.best_epoch)
                break

        self.network.load_state_dict(best_snapshot)
        valid_report = self._evaluate(self.valid_data, "valid", self.state.best_epoch, timed=True)
        test_report = None
        if self.test_data is not None:
            test_report = self._evaluate(self.test_data, "test", self.state.best_epoch, timed=True)

        inference = None
        if self.config.measure_timing:
            inference = measure_inference(
                self.network, self.valid_data, self.config.eval_batch_size
            )
            timings.append(
                TimingRecord(
                    phase="inference",
                    seconds=inference.seconds,
                    per_sample_ms=inference.per_sample_ms,
                )
            )

        logger.info(
            "Training finished",
            best_epoch=self.state.best_epoch,
            best_valid_auc=self.state.best_valid_auc,
            test_auc=test_report.auc if test_report else None,
        )
        return TrainResult(
            network=self.network,
            state=self.state,
            history=history,
            gradnorms=gradnorms,
            timings=timings,
            category_rows=category_rows,
            stopped_early=stopped_early,
            valid_report=valid_report,
            test_report=test_report,
            inference=inference,
        )
