"""End-to-end neural speaker diarization toolkit.

Simulates multi-speaker mixtures, trains BLSTM- and self-attention-based
diarization networks with a permutation-free objective, runs threshold +
median-filter inference, and scores hypotheses with a collar-tolerant DER.
"""

__version__ = "0.1.0"
