"""Cross-modal matching: bidirectional global/local interaction per object,
multi-head temperature fusion, gated residual, and a dot product across the
entity- and mention-level representations per direction.

A note on the local-to-global attention: the attention over the singleton
global axis normalizes each row to exactly 1, so every enhanced local row
equals relu of the scaled global. That identity is implemented as stated
(and asserted in tests) rather than silently redefined.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, ShapeError
from .params import DirectionParams, ModelParams, affine, affine_vec


def bidirectional_interaction(global_vec, locals_, dirp: DirectionParams,
                              mask=None) -> tuple[ad.Tensor, ad.Tensor]:
    """Cross-modal interaction of one object's global with its local rows.

    Returns the locally-aware enhanced global (d_c,) and the globally-aware
    enhanced locals (rows, d_c), rows counting only unmasked positions.
    """
    g = ad._wrap(global_vec)
    loc = ad._wrap(locals_)
    if loc.data.ndim != 2:
        raise ShapeError("bidirectional_interaction expects a local matrix")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        if keep.shape[0] != loc.data.shape[0]:
            raise ShapeError("mask length != local row count")
        if not keep.any():
            raise DataError("bidirectional_interaction: all local rows masked")
        if not keep.all():
            # pads are trailing zero rows by construction; drop them up front
            loc = ad.slice_rows(loc, 0, int(keep.sum())) if _is_prefix(keep) \
                else _select_rows(loc, keep)
    t_bar = affine_vec(g, dirp.w4, dirp.b4)                       # (d_c,)
    v_bar = affine(loc, dirp.w5, dirp.b5)                         # (rows, d_c)
    h_gl = ad.row_softmax(ad.matmul(ad.as_row(t_bar), ad.transpose(v_bar)))
    enhanced_global = ad.relu(ad.matmul(h_gl, v_bar))             # (1, d_c)
    h_lg = ad.row_softmax(ad.matmul(v_bar, ad.as_col(t_bar)))     # (rows, 1), all ones
    enhanced_locals = ad.relu(ad.matmul(h_lg, ad.as_row(t_bar)))  # (rows, d_c)
    return ad.reshape(enhanced_global, (dirp.d_c,)), enhanced_locals


def _is_prefix(keep: np.ndarray) -> bool:
    n = int(keep.sum())
    return bool(keep[:n].all())


def _select_rows(loc: ad.Tensor, keep: np.ndarray) -> ad.Tensor:
    parts = [ad.slice_rows(loc, i, i + 1) for i in np.flatnonzero(keep)]
    return ad.concat_rows(parts)


def multihead_fusion(enhanced_locals, enhanced_global,
                     dirp: DirectionParams) -> ad.Tensor:
    """Temperature-sharpened soft pooling over the stacked rows, averaged over heads.

    Each head softmaxes omega_k * h down the row axis per feature column and
    takes the weighted column sum, so every head output is a convex
    combination of the rows of h.
    """
    locs = ad._wrap(enhanced_locals)
    glob = ad._wrap(enhanced_global)
    h = ad.concat_rows([locs, glob])                              # (rows+1, d_c)
    k = dirp.k_heads
    omegas = dirp.omegas()
    scaled = ad.concat_cols([ad.mul(h, ad.element(omegas, i)) for i in range(k)])
    weights = ad.col_softmax(scaled)
    tiled = ad.concat_cols([h] * k)
    head_outputs = ad.tsum(ad.mul(weights, tiled), axis=0)        # (k * d_c,)
    return ad.tmean(ad.reshape(head_outputs, (k, dirp.d_c)), axis=0)


def gated_fusion(fused, original_global) -> ad.Tensor:
    """fused + tanh(g) * g elementwise; the gate sees the raw global."""
    f = ad._wrap(fused)
    g = ad._wrap(original_global)
    if f.data.shape != g.data.shape:
        raise ConfigError(
            f"gated_fusion: fused width {f.data.shape} != global width {g.data.shape}")
    return ad.add(f, ad.mul(ad.tanh(g), g))


def direction_score(entity_repr, mention_repr) -> ad.Tensor:
    return ad.dot(ad._wrap(entity_repr), ad._wrap(mention_repr))


def object_representation(global_vec, locals_, dirp: DirectionParams,
                          mask=None) -> ad.Tensor:
    """Full one-object pipeline: interact, fuse heads, gate with the raw global."""
    enhanced_global, enhanced_locals = bidirectional_interaction(
        global_vec, locals_, dirp, mask=mask)
    fused = multihead_fusion(enhanced_locals, enhanced_global, dirp)
    return gated_fusion(fused, global_vec)


def cross_modal_score(entity_text, entity_vision, mention_text, mention_vision,
                      params: ModelParams, enable_t2v: bool = True,
                      enable_v2t: bool = True) -> ad.Tensor:
    """Mean of the enabled direction scores for one (entity, mention) pair.

    Text-to-vision pairs each object's text global with its vision locals;
    vision-to-text pairs the vision global with the text locals.
    """
    if not (enable_t2v or enable_v2t):
        raise ConfigError("cross_modal_score: both directions disabled")
    scores = []
    if enable_t2v:
        e_repr = object_representation(entity_text.global_vec, entity_vision.local,
                                       params.cmn_t2v)
        m_repr = object_representation(mention_text.global_vec, mention_vision.local,
                                       params.cmn_t2v)
        scores.append(direction_score(e_repr, m_repr))
    if enable_v2t:
        e_repr = object_representation(entity_vision.global_vec, entity_text.local,
                                       params.cmn_v2t)
        m_repr = object_representation(mention_vision.global_vec, mention_text.local,
                                       params.cmn_v2t)
        scores.append(direction_score(e_repr, m_repr))
    total = scores[0]
    for s in scores[1:]:
        total = ad.add(total, s)
    return ad.mul_scalar(total, 1.0 / len(scores))
