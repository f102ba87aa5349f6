"""Autoregressive novel view synthesis from a single image.

Pipeline: Pluecker ray maps -> camera autoencoder tokens, frames -> causal FSQ
video tokens, then a decoder-only transformer predicts visual tokens in a
spatially shuffled, temporally ordered sequence interleaved with camera tokens.
"""

__version__ = "0.1.0"

from arview.errors import TrainingDiverged, ValidationError

__all__ = ["ValidationError", "TrainingDiverged", "__version__"]
