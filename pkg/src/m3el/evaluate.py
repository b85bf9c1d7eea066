"""Candidate ranking, retrieval metrics, and the ablation/sweep harnesses.

Ties rank the gold entity after every equal-scored rival, so metrics never
depend on candidate order. Harness runs share one seed and dataset across
variants; each returns its report with the variant's config fingerprint.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError
from .features import Banks, FeatureGroup, _group, split_entries
from .params import ModelParams
from .scoring import score_matrices, union_matrix
from .trainer import TrainConfig, TrainResult, train


@dataclass
class EvalReport:
    mrr: float
    hits1: float
    hits3: float
    hits5: float
    n_mentions: int
    split: str
    config_fingerprint: str
    ranks: list[int]

    def to_json(self) -> dict:
        return {"config_fingerprint": self.config_fingerprint, "split": self.split,
                "mrr": self.mrr, "hits1": self.hits1, "hits3": self.hits3,
                "hits5": self.hits5, "n_mentions": self.n_mentions}


def rank_candidates(scores, gold_index: int) -> int:
    """Pessimistic rank: 1 + strictly-better rivals + equal-scored rivals."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise DataError("rank_candidates: empty candidate list")
    if not (0 <= gold_index < scores.size):
        raise DataError(f"rank_candidates: gold index {gold_index} out of range")
    gold = scores[gold_index]
    better = int((scores > gold).sum())
    ties = int((scores == gold).sum()) - 1
    return 1 + better + ties


def compute_metrics(ranks) -> dict[str, float]:
    ranks = list(ranks)
    if not ranks:
        raise DataError("compute_metrics: no ranks given")
    if any(r < 1 for r in ranks):
        raise DataError("compute_metrics: ranks must be >= 1")
    arr = np.asarray(ranks, dtype=np.float64)
    return {
        "mrr": float((1.0 / arr).mean()),
        "hits1": float((arr <= 1).mean()),
        "hits3": float((arr <= 3).mean()),
        "hits5": float((arr <= 5).mean()),
    }


def evaluate_split(params: ModelParams, banks: Banks, entries, config: TrainConfig,
                   split: str = "test") -> EvalReport:
    """Rank each mention's manifest candidates by the union matching score."""
    if not entries:
        raise DataError(f"no entries to evaluate in split {split!r}")
    banks.validate_manifest(entries)
    cfg = config.loss_config()
    frozen = params.frozen()
    ranks = []
    for entry in entries:
        entity_ids = list(entry.candidates)
        mention_ids = [entry.mention_id]
        streams = score_matrices(
            _group(banks.entity_text, entity_ids, config.max_text_rows),
            _group(banks.entity_vision, entity_ids, config.max_vision_rows),
            _group(banks.mention_text, mention_ids, config.max_text_rows),
            _group(banks.mention_vision, mention_ids, config.max_vision_rows),
            frozen, cfg)
        union = union_matrix(streams, cfg).data[0]
        ranks.append(rank_candidates(union, entity_ids.index(entry.gold_entity_id)))
    metrics = compute_metrics(ranks)
    return EvalReport(n_mentions=len(ranks), split=split,
                      config_fingerprint=config.fingerprint(), ranks=ranks, **metrics)


def train_and_evaluate(config: TrainConfig, banks: Banks, entries,
                       split: str = "test") -> tuple[TrainResult, EvalReport]:
    result = train(config, banks, entries)
    report = evaluate_split(result.params, banks, split_entries(entries, split),
                            result.config, split=split)
    return result, report


ABLATION_AXES = {
    "loss": ("full", "wo_l_u", "wo_l_t", "wo_l_v", "wo_l_c", "wo_l_cl"),
    "module": ("full", "wo_text", "wo_vision", "wo_cross"),
    "pooling": ("mean", "max", "soft"),
    "direction": ("t2v", "v2t", "both"),
}


def _ablation_config(base: TrainConfig, axis: str, variant: str) -> TrainConfig:
    if axis == "loss":
        flags = {"wo_l_u": {"use_union": False}, "wo_l_t": {"use_text": False},
                 "wo_l_v": {"use_vision": False}, "wo_l_c": {"use_cross": False},
                 "wo_l_cl": {"use_cl": False}, "full": {}}
        return replace(base, **flags[variant])
    if axis == "module":
        flags = {"wo_text": {"use_text": False, "score_text": False},
                 "wo_vision": {"use_vision": False, "score_vision": False},
                 "wo_cross": {"use_cross": False, "score_cross": False},
                 "full": {}}
        return replace(base, **flags[variant])
    if axis == "pooling":
        return replace(base, pooling=variant)
    if axis == "direction":
        flags = {"t2v": {"enable_v2t": False}, "v2t": {"enable_t2v": False}, "both": {}}
        return replace(base, **flags[variant])
    raise ConfigError(f"unknown ablation axis {axis!r}")


def run_ablation(base: TrainConfig, axis: str, banks: Banks, entries,
                 variants=None, split: str = "test") -> list[tuple[str, EvalReport]]:
    """Train and evaluate each variant with the shared seed and data."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"expected one of {sorted(ABLATION_AXES)}")
    chosen = tuple(variants) if variants else ABLATION_AXES[axis]
    configs = {}
    for variant in chosen:
        if variant not in ABLATION_AXES[axis]:
            raise ConfigError(f"unknown variant {variant!r} for axis {axis!r}")
        configs[variant] = _ablation_config(base, axis, variant)
    rows = []
    for variant, config in configs.items():
        _, report = train_and_evaluate(config, banks, entries, split=split)
        rows.append((variant, report))
    return rows


SWEEP_PARAMS = ("k", "tau", "beta", "gamma")


def _sweep_config(base: TrainConfig, param: str, value) -> TrainConfig:
    if param == "k":
        k = int(value)
        if k < 1 or k != value:
            raise ConfigError(f"head count must be a positive integer, got {value}")
        return replace(base, k_heads=k)
    if param == "tau":
        if value <= 0:
            raise ConfigError(f"temperature must be positive, got {value}")
        return replace(base, tau=float(value))
    if param in ("beta", "gamma"):
        if value < 0:
            raise ConfigError(f"{param} must be >= 0, got {value}")
        return replace(base, **{param: float(value)})
    raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")


def run_sweep(base: TrainConfig, param: str, values, banks: Banks, entries,
              split: str = "test") -> list[tuple[float, EvalReport]]:
    """One train+eval per value; every value is validated before any training."""
    configs = [(v, _sweep_config(base, param, v)) for v in values]
    if not configs:
        raise ConfigError("sweep needs at least one value")
    rows = []
    for value, config in configs:
        _, report = train_and_evaluate(config, banks, entries, split=split)
        rows.append((value, report))
    return rows
