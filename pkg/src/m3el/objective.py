"""Candidate-set losses, the union score, and the joint training objective.

Each enabled score stream (text, vision, cross, union) feeds one softmax
cross-entropy over the per-mention candidate set; the contrastive term adds
on top. Ablation flags drop components, and the union renormalizes over
whatever score streams remain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .icl import IclConfig, total_cl_loss

POOLING_MODES = ("mean", "max", "soft")


@dataclass(frozen=True)
class LossConfig:
    """Which loss terms and score modules participate, plus their knobs."""

    use_cl: bool = True
    use_union: bool = True
    use_text: bool = True
    use_vision: bool = True
    use_cross: bool = True
    score_text: bool = True      # module switches: disabling one also drops
    score_vision: bool = True    # its loss term and its union contribution
    score_cross: bool = True
    enable_t2v: bool = True
    enable_v2t: bool = True
    pooling: str = "mean"
    icl: IclConfig = field(default_factory=IclConfig)

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")
        if self.use_text and not self.score_text:
            raise ConfigError("text loss enabled but text matching module disabled")
        if self.use_vision and not self.score_vision:
            raise ConfigError("vision loss enabled but vision matching module disabled")
        if self.use_cross and not self.score_cross:
            raise ConfigError("cross loss enabled but cross matching module disabled")
        if self.score_cross and not (self.enable_t2v or self.enable_v2t):
            raise ConfigError("cross matching enabled but both directions disabled")
        if not (self.use_union or self.use_text or self.use_vision or self.use_cross):
            raise ConfigError("no trainable loss component enabled")
        if not (self.score_text or self.score_vision or self.score_cross):
            raise ConfigError("all score modules disabled; the union score is empty")


@dataclass
class LossBreakdown:
    """Per-component values for one step; disabled components read 0."""

    l_cl: float
    l_u: float
    l_t: float
    l_v: float
    l_c: float

    @property
    def l_joint(self) -> float:
        return self.l_cl + self.l_u + self.l_t + self.l_v + self.l_c

    def as_dict(self) -> dict[str, float]:
        return {"l_cl": self.l_cl, "l_u": self.l_u, "l_t": self.l_t,
                "l_v": self.l_v, "l_c": self.l_c, "l_joint": self.l_joint}


def uco_loss(scores, gold) -> ad.Tensor:
    """Mean softmax cross-entropy of the gold candidate per mention row."""
    return ad.softmax_cross_entropy(ad._wrap(scores), gold)


def union_score(m_t, m_v, m_c, enabled: tuple[bool, bool, bool]) -> ad.Tensor:
    """Mean of the enabled matching scores (scalars or whole score matrices)."""
    picked = [ad._wrap(s) for s, on in zip((m_t, m_v, m_c), enabled) if on]
    if not picked:
        raise ConfigError("union_score: no component enabled")
    total = picked[0]
    for s in picked[1:]:
        total = ad.add(total, s)
    return ad.mul_scalar(total, 1.0 / len(picked))


def joint_loss(score_matrices: dict[str, ad.Tensor], gold, batch_globals,
               cfg: LossConfig) -> tuple[ad.Tensor, LossBreakdown]:
    """Assemble the enabled loss terms from per-stream candidate scores.

    score_matrices maps enabled stream names ("m_t", "m_v", "m_c") to
    (mentions, candidates) score tensors; gold gives each row's correct
    column. batch_globals is the (text_entity, text_mention, vision_entity,
    vision_mention) global-feature tuple the contrastive term consumes.
    """
    enabled = (cfg.score_text, cfg.score_vision, cfg.score_cross)
    streams = {}
    for name, on in zip(("m_t", "m_v", "m_c"), enabled):
        if on:
            if name not in score_matrices:
                raise ConfigError(f"joint_loss: stream {name!r} enabled but not provided")
            streams[name] = score_matrices[name]

    terms: list[ad.Tensor] = []
    values = {"l_cl": 0.0, "l_u": 0.0, "l_t": 0.0, "l_v": 0.0, "l_c": 0.0}

    def include(key, thunk):
        try:
            term = thunk()
        except NumericError as exc:
            raise NumericError(f"component {key}: {exc}") from exc
        terms.append(term)
        values[key] = term.item()

    if cfg.use_cl:
        include("l_cl", lambda: total_cl_loss(*batch_globals, cfg.icl))
    if cfg.use_union:
        include("l_u", lambda: uco_loss(
            union_score(streams.get("m_t"), streams.get("m_v"), streams.get("m_c"),
                        enabled), gold))
    if cfg.use_text:
        include("l_t", lambda: uco_loss(streams["m_t"], gold))
    if cfg.use_vision:
        include("l_v", lambda: uco_loss(streams["m_v"], gold))
    if cfg.use_cross:
        include("l_c", lambda: uco_loss(streams["m_c"], gold))

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, LossBreakdown(**values)
