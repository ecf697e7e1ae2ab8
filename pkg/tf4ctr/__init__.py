"""Twin-focus CTR training stack: SSEM, twin encoders, dynamic fusion and TF Loss."""

__version__ = "0.1.0"
