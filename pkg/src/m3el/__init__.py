"""Multi-level matching engine for multimodal entity linking.

Trains intra-modal (global-to-global, global-to-local) and cross-modal
(text-to-vision, vision-to-text) matching heads over precomputed text and
image embeddings, with contrastive regularization, retrieval metrics, and
ablation/sweep harnesses.
"""

__version__ = "0.1.0"
