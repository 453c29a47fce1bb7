"""Dual-encoder pointer-generator summarization for patent text.

The package is a desk-scale laboratory: a minimal autodiff core
(:mod:`patentsum.autodiff`), corpus tooling (:mod:`patentsum.corpus`),
the gated dual-source encoder stack (:mod:`patentsum.encoders`), a staged
pointer/coverage decoder (:mod:`patentsum.decoder`), the training loop and
experiment drivers (:mod:`patentsum.training`), ROUGE scoring
(:mod:`patentsum.rouge`), and a command-line front end
(:mod:`patentsum.cli`).
"""

__version__ = "0.1.0"
