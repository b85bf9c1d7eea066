"""Intra-modal matching: coarse global-to-global and fine global-to-local.

Both modalities run the identical computation with their own projection
weights. The global-to-local score attends entity-local queries over
mention-local keys/values, pools the attended rows, and dots the result
with the projected entity global. The entity global goes through the same
projection as the entity-local queries, so no extra parameters are needed
to land both factors in the shared scaled space.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .params import AttentionTriple, affine, affine_vec


def g2g_score(entity_global, mention_global) -> ad.Tensor:
    """Plain dot product of the two raw global features."""
    return ad.dot(ad._wrap(entity_global), ad._wrap(mention_global))


def g2l_score(entity_global, entity_local, mention_local, tri: AttentionTriple,
              entity_mask=None, mention_mask=None, pooling: str = "mean") -> ad.Tensor:
    """Attention of entity-local queries over mention-local keys/values.

    Pad rows are excluded on both sides: mention pads are masked out of the
    attention columns, entity pads out of the row pooling.
    """
    e_local = ad._wrap(entity_local)
    m_local = ad._wrap(mention_local)
    if e_local.data.ndim != 2 or m_local.data.ndim != 2:
        raise ShapeError("g2l_score expects local matrices")
    d_s = tri.out_dim
    q = affine(e_local, tri.w1, tri.b1)
    k = affine(m_local, tri.w2, tri.b2)
    v = affine(m_local, tri.w3, tri.b3)
    logits = ad.mul_scalar(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_s))
    attended = ad.matmul(ad.row_softmax(logits, mask=mention_mask), v)
    alpha = ad.pool_rows(attended, pooling, mask=entity_mask)
    projected_global = affine_vec(ad._wrap(entity_global), tri.w1, tri.b1)
    return ad.dot(projected_global, alpha)


def modality_match(entity_record, mention_record, tri: AttentionTriple,
                   pooling: str = "mean") -> ad.Tensor:
    """Average of the coarse and fine scores for one same-modality pair."""
    if entity_record.global_vec.shape != mention_record.global_vec.shape:
        raise ShapeError("modality_match: records are not from the same modality")
    coarse = g2g_score(entity_record.global_vec, mention_record.global_vec)
    fine = g2l_score(entity_record.global_vec, entity_record.local,
                     mention_record.local, tri, pooling=pooling)
    return ad.mul_scalar(ad.add(coarse, fine), 0.5)
