"""Iterative co-training transductive zero-shot learning.

Co-trains pluggable base ZSL learners by exchanging pseudo-labeled
unseen-class subsets, with class-balanced incremental sampling, prediction
fusion, semantic-guided OOD gating for GZSL, and a seeded synthetic
benchmark plus evaluation harness.
"""

__version__ = "0.1.0"
