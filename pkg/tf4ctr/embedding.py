"""Embedding tables and the sample selection embedding variants.

Every variant turns one batch of categorical ids into the pair
``(h_es, h_hs)``: the input of the simple encoder and of the complex one.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import structlog

from .diffcore import (
    Module,
    Rng,
    Tensor,
    add,
    concat,
    constant,
    embedding_lookup,
    mul,
    sigmoid,
    slice_cols,
    softmax_rows,
    sub,
    xavier_init,
)
from .encoders import Mlp
from .errors import ConfigError, ShapeError
from .models import ModelConfig, SsemVariant

logger = structlog.get_logger(__name__)

TensorFn = Callable[[Tensor], Tensor]


class EmbeddingTable(Module):
    """One ``d x s_i`` matrix per field."""

    def __init__(self, vocab_sizes: Sequence[int], dim: int, rng: Rng, name: str = "embedding"):
        if dim < 1:
            raise ConfigError("embedding dimension must be positive")
        self.dim = dim
        self.vocab_sizes = list(vocab_sizes)
        self.tables = [
            xavier_init((dim, size), rng.child(f"field{i}"), name=f"{name}.{i}")
            for i, size in enumerate(self.vocab_sizes)
        ]

    @property
    def num_fields(self) -> int:
        return len(self.tables)

    @property
    def width(self) -> int:
        return self.num_fields * self.dim


@dataclass
class SsemOutput:
    h_es: Tensor
    h_hs: Tensor
    gate_values: Optional[Tensor] = None
    shared: Optional[Tensor] = None


def _ids(batch) -> np.ndarray:
    return np.asarray(getattr(batch, "ids", batch), dtype=np.int64)


def embed(table: EmbeddingTable, batch) -> Tensor:
    """Look up every field and concatenate in field order."""
    ids = _ids(batch)
    if ids.ndim != 2 or ids.shape[1] != table.num_fields:
        raise ShapeError(f"Expected ids of shape n x {table.num_fields}, got {ids.shape}")
    return concat([embedding_lookup(E, ids[:, i]) for i, E in enumerate(table.tables)])


def ssem_ser(tables: tuple[EmbeddingTable, EmbeddingTable], batch) -> SsemOutput:
    simple, complex_ = tables
    if 2 * simple.dim != complex_.dim:
        raise ConfigError(
            f"SER needs the simple table at half width: {simple.dim} vs {complex_.dim}"
        )
    return SsemOutput(h_es=embed(simple, batch), h_hs=embed(complex_, batch))


def ssem_gm(table: EmbeddingTable, gate_mlp: TensorFn, batch) -> SsemOutput:
    """Split the shared embedding by a per-sample scalar gate.

    ``h_es = g*h`` and ``h_hs = (1-g)*h``. Per sample, the larger share is
    multiplied out and the smaller one is its difference from ``h``; that
    difference is exact in floating point, so ``h_es + h_hs == h`` bitwise.
    """
    h = embed(table, batch)
    g = sigmoid(gate_mlp(h))
    if g.shape != (h.shape[0], 1):
        raise ShapeError(f"GM gate must produce n x 1 values, got {g.shape}")
    upper = (g.value >= 0.5).astype(np.float64)
    keep, flip = constant(upper), constant(1.0 - upper)
    major = mul(add(mul(keep, g), mul(flip, sub(1.0, g))), h)
    minor = sub(h, major)
    h_es = add(mul(keep, major), mul(flip, minor))
    h_hs = add(mul(keep, minor), mul(flip, major))
    return SsemOutput(h_es=h_es, h_hs=h_hs, gate_values=g, shared=h)


def _mix(gates: Tensor, m1: Tensor, m2: Tensor) -> Tensor:
    return mul(slice_cols(gates, 0, 1), m1) + mul(slice_cols(gates, 1, 2), m2)


def ssem_mmoe(
    table: EmbeddingTable,
    experts: tuple[TensorFn, TensorFn],
    gates: tuple[TensorFn, TensorFn],
    batch,
) -> SsemOutput:
    h = embed(table, batch)
    m1, m2 = experts[0](h), experts[1](h)
    g1, g2 = softmax_rows(gates[0](h)), softmax_rows(gates[1](h))
    if g1.shape[1] != 2 or g2.shape[1] != 2:
        raise ShapeError("MMoE gates must produce two weights per sample")
    return SsemOutput(
        h_es=_mix(g1, m1, m2),
        h_hs=_mix(g2, m1, m2),
        gate_values=concat([g1, g2]),
        shared=h,
    )


def ssem_share(table: EmbeddingTable, batch) -> SsemOutput:
    h = embed(table, batch)
    return SsemOutput(h_es=h, h_hs=h, shared=h)


class SerSsem(Module):
    """Separate tables: the simple branch at d/2, the complex one at d."""

    variant = SsemVariant.SER

    def __init__(self, vocab_sizes: Sequence[int], dim: int, rng: Rng):
        if dim % 2:
            raise ConfigError(f"SER needs an even embedding dimension, got {dim}")
        self.simple = EmbeddingTable(vocab_sizes, dim // 2, rng.child("es"), name="ssem.es")
        self.complex = EmbeddingTable(vocab_sizes, dim, rng.child("hs"), name="ssem.hs")

    @property
    def es_width(self) -> int:
        return self.simple.width

    @property
    def hs_width(self) -> int:
        return self.complex.width

    def forward(self, batch) -> SsemOutput:
        return ssem_ser((self.simple, self.complex), batch)


class _SharedTableSsem(Module):
    def __init__(self, vocab_sizes: Sequence[int], dim: int, rng: Rng):
        self.table = EmbeddingTable(vocab_sizes, dim, rng.child("table"), name="ssem.table")

    @property
    def es_width(self) -> int:
        return self.table.width

    @property
    def hs_width(self) -> int:
        return self.table.width


class GmSsem(_SharedTableSsem):
    variant = SsemVariant.GM

    def __init__(
        self,
        vocab_sizes: Sequence[int],
        dim: int,
        rng: Rng,
        gate_hidden: Sequence[int] = (400, 100),
        activation: str = "relu",
    ):
        super().__init__(vocab_sizes, dim, rng)
        self.gate = Mlp(
            self.table.width, gate_hidden, rng.child("gate"), out_dim=1,
            activation=activation, name="ssem.gate",
        )

    def forward(self, batch) -> SsemOutput:
        return ssem_gm(self.table, self.gate, batch)


class MmoeSsem(_SharedTableSsem):
    """Two experts of width D mixed by two softmax gates."""

    variant = SsemVariant.MMOE

    def __init__(
        self,
        vocab_sizes: Sequence[int],
        dim: int,
        rng: Rng,
        expert_hidden: Sequence[int] = (400, 200),
        gate_hidden: Sequence[int] = (400, 100),
        activation: str = "relu",
    ):
        super().__init__(vocab_sizes, dim, rng)
        width = self.table.width
        self.experts = [
            Mlp(width, expert_hidden, rng.child(f"expert{i}"), out_dim=width,
                activation=activation, name=f"ssem.expert{i}")
            for i in range(2)
        ]
        self.gates = [
            Mlp(width, gate_hidden, rng.child(f"gate{i}"), out_dim=2,
                activation=activation, name=f"ssem.gate{i}")
            for i in range(2)
        ]

    def forward(self, batch) -> SsemOutput:
        return ssem_mmoe(
            self.table, (self.experts[0], self.experts[1]), (self.gates[0], self.gates[1]), batch
        )


class ShareSsem(_SharedTableSsem):
    variant = SsemVariant.SHARE

    def forward(self, batch) -> SsemOutput:
        return ssem_share(self.table, batch)


SsemModule = Union[SerSsem, GmSsem, MmoeSsem, ShareSsem]


def build_ssem(config: ModelConfig, vocab_sizes: Sequence[int], rng: Rng) -> SsemModule:
    variant = SsemVariant(config.ssem_variant)
    d = config.embedding_dim
    if variant == SsemVariant.SER:
        module = SerSsem(vocab_sizes, d, rng)
    elif variant == SsemVariant.GM:
        module = GmSsem(
            vocab_sizes, d, rng, gate_hidden=config.gate_hidden,
            activation=config.hidden_activation,
        )
    elif variant == SsemVariant.MMOE:
        module = MmoeSsem(
            vocab_sizes, d, rng, expert_hidden=config.expert_hidden,
            gate_hidden=config.gate_hidden, activation=config.hidden_activation,
        )
    else:
        module = ShareSsem(vocab_sizes, d, rng)
    logger.debug(
        "SSEM built",
        variant=variant.value,
        es_width=module.es_width,
        hs_width=module.hs_width,
        parameters=module.parameter_count(),
    )
    return module
