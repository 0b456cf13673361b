"""Deep metric learning on volumetric data: triplet losses, contrastive
pre-training, rare-case augmentation, and KNN-over-embeddings evaluation.
"""

__version__ = "0.1.0"
