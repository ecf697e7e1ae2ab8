"""CTR loss, Twin Focus Loss, Focal Loss and logit-gradient diagnostics.

Every loss works on the label-aligned probability ``p = y*yhat + (1-y)*(1-yhat)``
after clamping, so ``p`` close to 1 always means an easy sample.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
import pandas as pd
import structlog

from .diffcore import (
    PROB_EPS,
    Graph,
    Tensor,
    add,
    clamp_probability,
    constant,
    log,
    mean_all,
    mul,
    parameter,
    pow_scalar,
    sigmoid,
    sub,
)
from .errors import ArgumentError, DataError
from .fusion import fuse_sum, fuse_wsf
from .models import DfmVariant, LossKind, LossReport, ModelConfig, TfHyper

if TYPE_CHECKING:
    from .network import ForwardTrace

logger = structlog.get_logger(__name__)


def label_column(labels, n: int) -> np.ndarray:
    """Validate binary labels and return them as an ``n x 1`` float column."""
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != n:
        raise DataError(f"Expected {n} labels, got {y.shape[0]}")
    if not np.isin(y, (0, 1)).all():
        raise DataError("Labels must be 0 or 1")
    return y.astype(np.float64).reshape(n, 1)


def aligned_probability(prob: Tensor, labels) -> Tensor:
    y = label_column(labels, prob.shape[0])
    p = clamp_probability(prob)
    return add(mul(constant(y), p), mul(constant(1.0 - y), sub(1.0, p)))


def _neg_mean(x: Tensor) -> Tensor:
    return mul(mean_all(x), -1.0)


def loss_ctr(prob: Tensor, labels) -> Tensor:
    """Mean negative log of the label-aligned probability."""
    return _neg_mean(log(aligned_probability(prob, labels)))


@dataclass
class TfTerms:
    simple: Tensor
    complex: Tensor
    total: Tensor


def loss_tf(prob_s: Tensor, prob_c: Tensor, labels, hyper: TfHyper) -> TfTerms:
    """Twin Focus Loss.

    The simple head is weighted by ``(c + p_s)^gamma`` and the complex head by
    ``(m - p_c)^gamma`` with ``m = 2 - c``; the two terms are mixed by alpha.
    """
    p_s = aligned_probability(prob_s, labels)
    p_c = aligned_probability(prob_c, labels)
    factor_s = pow_scalar(add(p_s, hyper.c), hyper.gamma)
    factor_c = pow_scalar(sub(hyper.m, p_c), hyper.gamma)
    simple = _neg_mean(mul(factor_s, log(p_s)))
    complex_ = _neg_mean(mul(factor_c, log(p_c)))
    total = add(mul(simple, hyper.alpha), mul(complex_, 1.0 - hyper.alpha))
    return TfTerms(simple=simple, complex=complex_, total=total)


def loss_focal(prob: Tensor, labels, gamma_f: float) -> Tensor:
    if gamma_f < 0:
        raise ArgumentError("focal gamma must be non-negative")
    p = aligned_probability(prob, labels)
    return _neg_mean(mul(pow_scalar(sub(1.0, p), gamma_f), log(p)))


@dataclass
class LossTerms:
    """Scalar loss tensors of one forward pass; ``tf`` is None without auxiliary heads."""

    total: Tensor
    ctr: Tensor
    tf: Optional[TfTerms] = None

    def report(self, grad_norm_zs: float = 0.0, grad_norm_zc: float = 0.0) -> LossReport:
        return LossReport(
            loss_ctr=self.ctr.item(),
            loss_simple=self.tf.simple.item() if self.tf else 0.0,
            loss_complex=self.tf.complex.item() if self.tf else 0.0,
            loss_tf=self.tf.total.item() if self.tf else 0.0,
            loss_total=self.total.item(),
            grad_norm_zs=grad_norm_zs,
            grad_norm_zc=grad_norm_zc,
        )


def objective(
    prob: Tensor, prob_s: Tensor, prob_c: Tensor, labels, kind: LossKind, hyper: TfHyper
) -> LossTerms:
    kind = LossKind(kind)
    if kind == LossKind.FOCAL:
        focal = loss_focal(prob, labels, hyper.focal_gamma)
        return LossTerms(total=focal, ctr=focal)
    ctr = loss_ctr(prob, labels)
    if kind == LossKind.LOGLOSS:
        return LossTerms(total=ctr, ctr=ctr)
    tf = loss_tf(prob_s, prob_c, labels, hyper)
    return LossTerms(total=add(ctr, tf.total), ctr=ctr, tf=tf)


def total_loss(trace: "ForwardTrace", labels, config: ModelConfig) -> LossTerms:
    """Training objective of one forward pass: L_ctr, plus L_TF for the tf loss."""
    return objective(
        trace.fusion.prob, trace.simple.prob, trace.complex.prob, labels,
        config.loss, config.tf_hyper,
    )


def logit_grad_norm(grad: np.ndarray) -> float:
    """Batch mean of ``|N * dL/dz_i|``, the gradient of each sample's own loss term."""
    grad = np.asarray(grad).reshape(-1)
    if grad.size == 0:
        return 0.0
    return float(np.mean(np.abs(grad * grad.size)))


def logit_gradients(
    z_s: np.ndarray,
    z_c: np.ndarray,
    labels,
    hyper: TfHyper,
    fusion_kind: DfmVariant = DfmVariant.SUM,
    loss_kind: LossKind = LossKind.LOGLOSS,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``N * dL/dz`` for both heads, given head logits alone.

    Only the parameter-free fusions (Sum, and WSF at its initial weights) can
    be evaluated from logits; other fusions report norms from the full
    network during training.
    """
    fusion_kind = DfmVariant(fusion_kind)
    zs = parameter(np.asarray(z_s, dtype=np.float64).reshape(-1, 1), name="z_s")
    zc = parameter(np.asarray(z_c, dtype=np.float64).reshape(-1, 1), name="z_c")
    n = zs.shape[0]
    with Graph() as graph:
        if fusion_kind == DfmVariant.SUM:
            fused = fuse_sum(zs, zc)
        elif fusion_kind == DfmVariant.WSF:
            fused = fuse_wsf(zs, zc, constant(np.full((1, 1), 0.5)), constant(np.full((1, 1), 0.5)))
        else:
            raise ArgumentError(f"Logit-only gradients are not defined for {fusion_kind.value}")
        terms = objective(fused.prob, sigmoid(zs), sigmoid(zc), labels, loss_kind, hyper)
    g_s, g_c = graph.backward(terms.total, wrt=[zs, zc])
    return g_s.reshape(-1) * n, g_c.reshape(-1) * n


def grad_diag(
    z_s: np.ndarray,
    z_c: np.ndarray,
    labels,
    hyper: TfHyper,
    fusion_kind: DfmVariant = DfmVariant.SUM,
    loss_kind: LossKind = LossKind.LOGLOSS,
) -> tuple[float, float]:
    g_s, g_c = logit_gradients(z_s, z_c, labels, hyper, fusion_kind, loss_kind)
    return float(np.mean(np.abs(g_s))), float(np.mean(np.abs(g_c)))


def gradient_factors(p, c: float, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradient modulating factors ``(c+p)^(gamma-1)`` and ``(m-p)^(gamma-1)``."""
    p = np.asarray(p, dtype=np.float64)
    m = 2.0 - c
    return np.power(c + p, gamma - 1.0), np.power(m - p, gamma - 1.0)


def tf_loss_curve(p_grid: Sequence[float], c: float, gamma: float) -> pd.DataFrame:
    """TF Loss of a positive sample over a grid of predicted probabilities."""
    p = np.clip(np.asarray(p_grid, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    m = 2.0 - c
    factor_s = np.power(c + p, gamma)
    factor_c = np.power(m - p, gamma)
    grad_s, grad_c = gradient_factors(p, c, gamma)
    return pd.DataFrame(
        {
            "p": p,
            "c": c,
            "gamma": gamma,
            "loss_ctr": -np.log(p),
            "factor_simple": factor_s,
            "factor_complex": factor_c,
            "loss_simple": -factor_s * np.log(p),
            "loss_complex": -factor_c * np.log(p),
            "grad_factor_simple": grad_s,
            "grad_factor_complex": grad_c,
        }
    )
