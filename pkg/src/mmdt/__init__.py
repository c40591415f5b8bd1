"""Document recapture detection with disentangled forensic traces and a multi-modal ViT."""

from .errors import *  # noqa: F401,F403

__version__ = "0.1.0"
