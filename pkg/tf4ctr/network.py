"""The twin-focus network: SSEM, simple and complex encoders, dynamic fusion."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import structlog

from .diffcore import Module, Rng
from .embedding import SsemOutput, build_ssem
from .encoders import EncoderOutput, MlpEncoder, validate_depths
from .fusion import FusionOutput, build_fusion
from .models import ModelConfig

logger = structlog.get_logger(__name__)


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass."""

    ssem: SsemOutput
    simple: EncoderOutput
    complex: EncoderOutput
    fusion: FusionOutput

    @property
    def prob(self):
        return self.fusion.prob


class TwinFocusNetwork(Module):
    def __init__(self, config: ModelConfig, vocab_sizes: Sequence[int], seed: int):
        """Initialize every component from seed-derived, per-component streams."""
        self.config = config
        self.vocab_sizes = list(vocab_sizes)
        rng = Rng(seed).child("init")

        simple_cfg, complex_cfg = config.encoder_configs()
        validate_depths(simple_cfg, complex_cfg)

        self.ssem = build_ssem(config, self.vocab_sizes, rng.child("ssem"))
        self.simple = MlpEncoder(self.ssem.es_width, simple_cfg, rng.child("simple"), "simple")
        self.complex = MlpEncoder(self.ssem.hs_width, complex_cfg, rng.child("complex"), "complex")
        self.fusion = build_fusion(
            config,
            self.simple.hidden_width,
            self.complex.hidden_width,
            rng.child("fusion"),
            Rng(seed).child("gumbel"),
        )
        logger.info(
            "Network initialized",
            ssem=config.ssem_variant.value,
            dfm=config.dfm_variant.value,
            parameters=self.parameter_count(),
        )

    def forward(self, batch, train_mode: bool = False) -> ForwardTrace:
        ssem = self.ssem(batch)
        simple = self.simple(ssem.h_es)
        complex_ = self.complex(ssem.h_hs)
        fused = self.fusion(simple, complex_, train_mode=train_mode)
        return ForwardTrace(ssem=ssem, simple=simple, complex=complex_, fusion=fused)

    def predict(self, batch) -> np.ndarray:
        """Deterministic click probabilities, one per row."""
        return self.forward(batch, train_mode=False).prob.value.reshape(-1).copy()
