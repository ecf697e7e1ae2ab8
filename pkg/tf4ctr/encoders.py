"""MLP building blocks and the simple/complex feature-interaction encoders."""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import structlog

from .diffcore import Module, Rng, Tensor, add, matmul, parameter, relu, sigmoid, xavier_init
from .errors import ConfigError
from .models import EncoderConfig

logger = structlog.get_logger(__name__)

_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid}


class Dense(Module):
    """Affine layer ``x @ W (+ b)`` with a Xavier-initialised weight."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, bias: bool = True, name: str = "dense"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = xavier_init((in_dim, out_dim), rng, name=f"{name}.weight")
        self.bias = parameter(np.zeros((1, out_dim)), name=f"{name}.bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = add(out, self.bias)
        return out


class Mlp(Module):
    """Stack of Dense layers with a hidden activation and an optional linear output layer."""

    def __init__(
        self,
        in_dim: int,
        hidden_units: Sequence[int],
        rng: Rng,
        out_dim: Optional[int] = None,
        activation: str = "relu",
        name: str = "mlp",
    ):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"Unknown activation: {activation}")
        self.in_dim = in_dim
        self.activation = activation
        widths = [in_dim, *hidden_units]
        self.hidden = [
            Dense(widths[i], widths[i + 1], rng.child(f"hidden{i}"), name=f"{name}.hidden{i}")
            for i in range(len(hidden_units))
        ]
        self.output = None
        if out_dim is not None:
            self.output = Dense(widths[-1], out_dim, rng.child("output"), name=f"{name}.output")
        self.out_dim = out_dim if out_dim is not None else widths[-1]

    def forward(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for layer in self.hidden:
            x = act(layer(x))
        if self.output is not None:
            x = self.output(x)
        return x


@dataclass
class EncoderOutput:
    """Latent representation, head logit and head probability of one encoder."""

    hidden: Tensor
    logit: Tensor
    prob: Tensor


class MlpEncoder(Module):
    """Feature-interaction encoder: an MLP body and a single-logit head."""

    def __init__(self, in_dim: int, config: EncoderConfig, rng: Rng, name: str = "encoder"):
        self.config = config
        self.body = Mlp(
            in_dim, config.hidden_units, rng.child("body"), activation=config.activation, name=name
        )
        self.head = Dense(
            self.body.out_dim, 1, rng.child("head"), bias=config.head_bias, name=f"{name}.head"
        )

    @property
    def in_dim(self) -> int:
        return self.body.in_dim

    @property
    def hidden_width(self) -> int:
        return self.body.out_dim

    @property
    def depth(self) -> int:
        return self.config.depth

    def forward(self, h: Tensor) -> EncoderOutput:
        return encode(self, h)


def encode(enc: MlpEncoder, h: Tensor) -> EncoderOutput:
    if h.ndim != 2 or h.shape[1] != enc.in_dim:
        raise ConfigError(f"Encoder expects input width {enc.in_dim}, got shape {h.shape}")
    hidden = enc.body(h)
    logit = enc.head(hidden)
    return EncoderOutput(hidden=hidden, logit=logit, prob=sigmoid(logit))


def validate_depths(simple: EncoderConfig, complex_: EncoderConfig) -> None:
    if simple.depth >= complex_.depth:
        raise ConfigError(
            f"Simple encoder depth {simple.depth} must be below complex depth {complex_.depth}"
        )


def default_configs() -> tuple[EncoderConfig, EncoderConfig]:
    """Single-layer simple encoder and the three-layer complex encoder."""
    simple = EncoderConfig(hidden_units=[400])
    complex_ = EncoderConfig(hidden_units=[400, 400, 400])
    validate_depths(simple, complex_)
    return simple, complex_
