"""Pilot-native masked-autoencoder pretraining for MIMO-OFDM channel tensors.

Subpackages cover the full desk-scale pipeline: a synthetic geometric multipath
channel generator, grid tokenization and masking, a factorized space-time
transformer trained with patch-normalized reconstruction plus auxiliary scale
losses under an SNR curriculum, downstream beam-selection / LoS / channel-
estimation evaluation, and a FLOP/latency profiler.
"""
from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
