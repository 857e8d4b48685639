"""Region-aware feature fusion network for automated BBPS scoring.

A dual-branch image classifier for bowel-preparation quality: a global
visual branch (backbone encoder plus a residual bottleneck adapter) is
fused, through a learned sigmoid gate, with a fecal-cue branch that scores
anchor regions of the image against a bank of text prompts. Includes
dataset curation, deterministic training, checkpointing, and an
evaluation/statistics harness. Backends are pluggable; a tiny trainable
transformer ships for desk-scale verification.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    RaffnetError,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "RaffnetError",
    "__version__",
]
