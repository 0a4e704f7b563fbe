"""signlab: gloss-free sign language translation at desk scale.

A synthetic corpus generator, a hierarchical visual encoder with contrastive
pretraining, and a small decoder LM tuned to read visual tokens, all on numpy
with numba-accelerated kernels (set SIGNLAB_NUMBA=0 for the pure-numpy path).
"""

__version__ = "0.1.0"
