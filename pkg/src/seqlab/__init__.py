"""seqlab: a from-scratch sequence-modeling toolkit.

Encoder-decoder and decoder-only Transformer models with a configurable
zoo of attention and sub-layer variants, built on a minimal numpy tensor
engine with reverse-mode autodiff. Includes training, incremental
decoding, quantized inference, and brute-force verification oracles.
"""

__version__ = "0.1.0"
