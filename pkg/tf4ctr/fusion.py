"""Dynamic fusion of the simple and complex encoder outputs into the final prediction."""

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import structlog

from .diffcore import (
    Module,
    Rng,
    Tensor,
    add,
    concat,
    constant,
    log,
    matmul,
    mul,
    parameter,
    sigmoid,
    slice_cols,
    softmax_rows,
    softplus,
)
from .encoders import Dense, EncoderOutput, Mlp
from .errors import ConfigError
from .models import DfmVariant, ModelConfig

logger = structlog.get_logger(__name__)

# keeps the VF voting weights strictly positive before the log
VF_PI_EPS = 1e-6
_GUMBEL_TINY = 1e-12

TensorFn = Callable[[Tensor], Tensor]


@dataclass
class FusionOutput:
    """Fused logit and probability plus variant-specific diagnostics."""

    logit: Tensor
    prob: Tensor
    diagnostics: dict[str, Tensor] = field(default_factory=dict)


def _output(logit: Tensor, **diagnostics: Tensor) -> FusionOutput:
    return FusionOutput(logit=logit, prob=sigmoid(logit), diagnostics=diagnostics)


def fuse_sum(z_s: Tensor, z_c: Tensor) -> FusionOutput:
    return _output(add(z_s, z_c))


def fuse_wsf(z_s: Tensor, z_c: Tensor, w_s: Tensor, w_c: Tensor) -> FusionOutput:
    return _output(add(mul(w_s, z_s), mul(w_c, z_c)), w_s=w_s, w_c=w_c)


def gumbel_noise(rng: Rng, shape: tuple[int, ...]) -> np.ndarray:
    u = np.clip(rng.generator.random(shape), _GUMBEL_TINY, 1.0 - _GUMBEL_TINY)
    return -np.log(-np.log(u))


def fuse_vf(
    h_es: Tensor,
    h_hs: Tensor,
    z_s: Tensor,
    z_c: Tensor,
    proj_es: TensorFn,
    proj_hs: TensorFn,
    tau: float,
    rng: Rng,
    train_mode: bool,
) -> FusionOutput:
    """Voting fusion with Gumbel-Softmax weights; noise is only drawn in training."""
    if tau <= 0:
        raise ConfigError(f"VF temperature must be positive, got {tau}")
    pi_s = add(softplus(proj_es(h_es)), VF_PI_EPS)
    pi_c = add(softplus(proj_hs(h_hs)), VF_PI_EPS)
    scores = concat([log(pi_s), log(pi_c)])
    if train_mode:
        scores = add(scores, constant(gumbel_noise(rng, scores.shape)))
    p = softmax_rows(mul(scores, 1.0 / tau))
    p_s, p_c = slice_cols(p, 0, 1), slice_cols(p, 1, 2)
    return _output(add(mul(p_s, z_s), mul(p_c, z_c)), p_s=p_s, p_c=p_c)


def fuse_cf(h_es: Tensor, h_hs: Tensor, weight: Tensor, bias: Tensor) -> FusionOutput:
    x = concat([h_es, h_hs])
    if weight.shape != (x.shape[1], 1):
        raise ConfigError(f"CF weight must be {x.shape[1]} x 1, got {weight.shape}")
    return _output(add(matmul(x, weight), bias))


def fuse_moef(
    h_es: Tensor, h_hs: Tensor, gate: TensorFn, ex1: TensorFn, ex2: TensorFn
) -> FusionOutput:
    x = concat([h_es, h_hs])
    g = softmax_rows(gate(x))
    g1, g2 = slice_cols(g, 0, 1), slice_cols(g, 1, 2)
    m1, m2 = ex1(x), ex2(x)
    return _output(add(mul(g1, m1), mul(g2, m2)), g1=g1, g2=g2, m1=m1, m2=m2)


class SumFusion(Module):
    variant = DfmVariant.SUM

    def forward(self, simple: EncoderOutput, complex_: EncoderOutput, train_mode: bool = False):
        return fuse_sum(simple.logit, complex_.logit)


class WsfFusion(Module):
    """Two learnable scalar weights, both starting at 0.5."""

    variant = DfmVariant.WSF

    def __init__(self):
        self.w_s = parameter(np.full((1, 1), 0.5), name="fusion.w_s")
        self.w_c = parameter(np.full((1, 1), 0.5), name="fusion.w_c")

    def forward(self, simple: EncoderOutput, complex_: EncoderOutput, train_mode: bool = False):
        return fuse_wsf(simple.logit, complex_.logit, self.w_s, self.w_c)


class VfFusion(Module):
    variant = DfmVariant.VF

    def __init__(self, es_width: int, hs_width: int, tau: float, rng: Rng, noise_rng: Rng):
        if tau <= 0:
            raise ConfigError(f"VF temperature must be positive, got {tau}")
        self.tau = tau
        self.proj_es = Dense(es_width, 1, rng.child("proj_es"), bias=False, name="fusion.proj_es")
        self.proj_hs = Dense(hs_width, 1, rng.child("proj_hs"), bias=False, name="fusion.proj_hs")
        self.noise_rng = noise_rng

    def forward(self, simple: EncoderOutput, complex_: EncoderOutput, train_mode: bool = False):
        return fuse_vf(
            simple.hidden, complex_.hidden, simple.logit, complex_.logit,
            self.proj_es, self.proj_hs, self.tau, self.noise_rng, train_mode,
        )


class CfFusion(Module):
    variant = DfmVariant.CF

    def __init__(self, es_width: int, hs_width: int, rng: Rng):
        self.dense = Dense(es_width + hs_width, 1, rng.child("dense"), name="fusion.cf")

    def forward(self, simple: EncoderOutput, complex_: EncoderOutput, train_mode: bool = False):
        return fuse_cf(simple.hidden, complex_.hidden, self.dense.weight, self.dense.bias)


class MoeFusion(Module):
    variant = DfmVariant.MOEF

    def __init__(
        self,
        es_width: int,
        hs_width: int,
        rng: Rng,
        gate_hidden=(400, 100),
        expert_hidden=(400, 200),
        activation: str = "relu",
    ):
        width = es_width + hs_width
        self.gate = Mlp(width, gate_hidden, rng.child("gate"), out_dim=2,
                        activation=activation, name="fusion.gate")
        self.experts = [
            Mlp(width, expert_hidden, rng.child(f"expert{i}"), out_dim=1,
                activation=activation, name=f"fusion.expert{i}")
            for i in range(2)
        ]

    def forward(self, simple: EncoderOutput, complex_: EncoderOutput, train_mode: bool = False):
        ex1, ex2 = self.experts
        return fuse_moef(simple.hidden, complex_.hidden, self.gate, ex1, ex2)


FusionModule = Union[SumFusion, WsfFusion, VfFusion, CfFusion, MoeFusion]


def build_fusion(
    config: ModelConfig, es_width: int, hs_width: int, rng: Rng, noise_rng: Rng
) -> FusionModule:
    """Create the fusion module for ``config.dfm_variant``.

    ``es_width`` and ``hs_width`` are the final hidden widths of the simple
    and complex encoders.
    """
    variant = DfmVariant(config.dfm_variant)
    if variant == DfmVariant.SUM:
        module = SumFusion()
    elif variant == DfmVariant.WSF:
        module = WsfFusion()
    elif variant == DfmVariant.VF:
        module = VfFusion(es_width, hs_width, config.vf_temperature, rng, noise_rng)
    elif variant == DfmVariant.CF:
        module = CfFusion(es_width, hs_width, rng)
    else:
        module = MoeFusion(
            es_width, hs_width, rng,
            gate_hidden=config.gate_hidden, expert_hidden=config.expert_hidden,
            activation=config.hidden_activation,
        )
    logger.debug("Fusion built", variant=variant.value, parameters=module.parameter_count())
    return module
