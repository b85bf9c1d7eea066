"""Intra-modal contrastive learning over batch-level global features.

Negatives for an anchor come from two in-batch sources: its own view
(inner-source) and the opposite view (inter-source), weighted by beta and
gamma. Only global features participate; local features are handled by the
matching networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class IclConfig:
    tau: float = 0.03
    beta: float = 0.8
    gamma: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("negative-source weights must be >= 0")


def _sqrt(x: ad.Tensor) -> ad.Tensor:
    # tiny shift keeps zero vectors representable (value impact ~1e-16)
    return ad.pow_scalar(ad.add_scalar(x, 1e-32), 0.5)


def cosine_sim(x, y) -> ad.Tensor:
    """x . y / (|x| |y| + eps); zero vectors give ~0 rather than an error."""
    x, y = ad._wrap(x), ad._wrap(y)
    if x.data.shape != y.data.shape or x.data.ndim != 1:
        raise ShapeError(f"cosine_sim: vector shapes {x.data.shape} and {y.data.shape} differ")
    nx = _sqrt(ad.dot(x, x))
    ny = _sqrt(ad.dot(y, y))
    denom = ad.add_scalar(ad.mul(nx, ny), COSINE_EPS)
    return ad.mul(ad.dot(x, y), ad.pow_scalar(denom, -1.0))


def _row_normals(x: ad.Tensor) -> ad.Tensor:
    """Row L2 norms of a matrix, shape (rows,)."""
    return _sqrt(ad.tsum(ad.mul(x, x), axis=1))


def _cosine_matrix(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Pairwise cosine similarities: out[i, j] = cos(a_i, b_j)."""
    dots = ad.matmul(a, ad.transpose(b))
    denom = ad.add_scalar(ad.matmul(ad.as_col(_row_normals(a)),
                                    ad.as_row(_row_normals(b))), COSINE_EPS)
    return ad.mul(dots, ad.pow_scalar(denom, -1.0))


def pair_loss(i: int, anchor_view: str, entity_globals, mention_globals,
              cfg: IclConfig) -> ad.Tensor:
    """Contrastive loss of the positive pair at index i, seen from one view.

    The positive is the same-index item of the other view. The denominator
    adds the anchor's same-view negatives (weight beta) and other-view
    negatives (weight gamma); it is not symmetric between the two views.
    """
    if anchor_view not in ("entity", "mention"):
        raise ConfigError(f"unknown anchor view {anchor_view!r}")
    e, m = ad._wrap(entity_globals), ad._wrap(mention_globals)
    if e.data.shape != m.data.shape or e.data.ndim != 2:
        raise ShapeError("pair_loss expects two (u, dim) matrices")
    u = e.data.shape[0]
    if not (0 <= i < u):
        raise ShapeError(f"anchor index {i} out of range")
    anchor_mat, other_mat = (e, m) if anchor_view == "entity" else (m, e)

    def theta(x, y):
        return ad.exp(ad.mul_scalar(cosine_sim(x, y), 1.0 / cfg.tau))

    def row(mat, j):
        return ad.reshape(ad.slice_rows(mat, j, j + 1), (mat.data.shape[1],))

    anchor = row(anchor_mat, i)
    positive = theta(anchor, row(other_mat, i))
    denom = positive
    for j in range(u):
        if j == i:
            continue
        inner = ad.mul_scalar(theta(anchor, row(anchor_mat, j)), cfg.beta)
        inter = ad.mul_scalar(theta(anchor, row(other_mat, j)), cfg.gamma)
        denom = ad.add(denom, ad.add(inner, inter))
    return ad.sub(ad.log(denom), ad.log(positive))


def _view_losses(entity_globals: ad.Tensor, mention_globals: ad.Tensor,
                 cfg: IclConfig) -> tuple[ad.Tensor, ad.Tensor]:
    """Vectorized per-anchor losses for both views of one modality, shape (u,)."""
    s_em = _cosine_matrix(entity_globals, mention_globals)
    s_ee = _cosine_matrix(entity_globals, entity_globals)
    s_mm = _cosine_matrix(mention_globals, mention_globals)

    def heat(s):
        return ad.exp(ad.mul_scalar(s, 1.0 / cfg.tau))

    z_em, z_ee, z_mm = heat(s_em), heat(s_ee), heat(s_mm)
    pos = ad.diag_part(z_em)

    # entity anchors: inner negatives are other entities, inter are other mentions
    inner_e = ad.sub(ad.tsum(z_ee, axis=1), ad.diag_part(z_ee))
    inter_e = ad.sub(ad.tsum(z_em, axis=1), pos)
    denom_e = ad.add(pos, ad.add(ad.mul_scalar(inner_e, cfg.beta),
                                 ad.mul_scalar(inter_e, cfg.gamma)))
    loss_e = ad.sub(ad.log(denom_e), ad.log(pos))

    # mention anchors: theta(m_i, e_j) sits in column i of the cross matrix
    inner_m = ad.sub(ad.tsum(z_mm, axis=1), ad.diag_part(z_mm))
    inter_m = ad.sub(ad.tsum(z_em, axis=0), pos)
    denom_m = ad.add(pos, ad.add(ad.mul_scalar(inner_m, cfg.beta),
                                 ad.mul_scalar(inter_m, cfg.gamma)))
    loss_m = ad.sub(ad.log(denom_m), ad.log(pos))
    return loss_e, loss_m


def total_cl_loss(text_entity, text_mention, vision_entity, vision_mention,
                  cfg: IclConfig) -> ad.Tensor:
    """Mean of the 4u directional pair losses across both modalities."""
    te, tm = ad._wrap(text_entity), ad._wrap(text_mention)
    ve, vm = ad._wrap(vision_entity), ad._wrap(vision_mention)
    u = te.data.shape[0]
    for mat in (tm, ve, vm):
        if mat.data.ndim != 2 or mat.data.shape[0] != u:
            raise ShapeError("total_cl_loss: the four global matrices must share u")
    terms = []
    for e_mat, m_mat in ((te, tm), (ve, vm)):
        loss_e, loss_m = _view_losses(e_mat, m_mat, cfg)
        terms.extend((ad.tsum(loss_e), ad.tsum(loss_m)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul_scalar(total, 1.0 / (4 * u))
