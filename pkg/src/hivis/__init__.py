"""Toy HiViS speculative decoding: a text-only drafter conditioned on the
target's hidden states, tree verification and two-stage drafter training."""

import os

# Inference runs many tiny matmuls; BLAS thread fan-out only adds overhead
# and makes wall-clock comparisons noisy.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

__version__ = "0.1.0"
