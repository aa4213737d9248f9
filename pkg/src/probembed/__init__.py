"""Probabilistic image-text embeddings with closed-form Gaussian matching.

Modules:

* ``prob_core``: CSD distance, match probability, BCE, VIB-KL and gradients.
* ``objective``: batch losses for the probabilistic objective and InfoNCE.
* ``trainer``: MLP dual encoders, hand-written backprop, AdamW, checkpoints.
* ``synth_data``: synthetic multi-view studies and image perturbations.
* ``evalkit``: retrieval, zero-shot, selective prediction, robustness.
* ``store``: binary embedding-store and dataset files.
* ``cli``: the ``probembed`` command-line driver.
"""

from .prob_core import GaussianEmbedding, MatchScalars, csd, match_bce, match_prob, vib_kl
from .store import EmbeddingStore, read_store, write_store

__all__ = [
    "EmbeddingStore",
    "GaussianEmbedding",
    "MatchScalars",
    "csd",
    "match_bce",
    "match_prob",
    "read_store",
    "vib_kl",
    "write_store",
]

__version__ = "0.1.0"
