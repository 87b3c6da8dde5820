"""Desk-scale triplet Siamese metric-learning toolkit.

Stages: grayscale CT-style preprocessing, triplet meta-dataset construction,
ensemble embedding with margin-ranking training, and cosine-similarity
few-shot classification with a full evaluation suite.
"""

__version__ = "0.1.0"
