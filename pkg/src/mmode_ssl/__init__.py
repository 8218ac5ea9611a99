"""Self-supervised pretraining for lung-sliding classification on M-mode ultrasound images.

The package is numpy-only: a small reverse-mode autodiff engine, M-mode
extraction, augmentation pipelines, joint-embedding objectives, a compact
CNN, training loops, evaluation, a synthetic data generator and a CLI.
"""

from .errors import ConfigError, DataError, MModeSSLError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "MModeSSLError", "NumericalError", "__version__"]
