"""Latent-image grounded dialogue modeling, end to end in numpy.

The package trains and evaluates a dialogue model whose responses are
grounded either in a real image or in an image reconstructed from the text
itself: a frozen bidirectional GRU text encoder, a pretrained-then-frozen
stacked attentional GAN image reconstructor, a gated multimodal response
decoder, the joint training objective over image-grounded and text-only
corpora, and a full metric/analysis suite, all verified on a procedurally
generated shape/color micro-world.
"""

import os as _os
import sys as _sys

# At the model sizes used here, multi-threaded BLAS is slower than single
# threaded and makes op timing noisy; pin to one thread unless numpy is
# already imported or the user chose otherwise.
if "numpy" not in _sys.modules:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
