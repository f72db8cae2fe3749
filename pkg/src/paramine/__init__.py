"""Contrastive bi-encoder training for paraphrase identification.

Additive margin scale loss over in-batch and hard negatives, mega-batch
hard-negative mining, a trainable projection head over frozen base
embeddings, threshold calibration, and alignment/uniformity metrics.
"""

__version__ = "0.1.0"
