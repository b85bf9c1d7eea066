"""Batched scoring must agree with the per-pair route, padded or not."""

import numpy as np
import pytest

from m3el import autodiff as ad
from m3el import features as fs
from m3el import scoring
from m3el.objective import LossConfig
from m3el.params import Dims, ModelParams


def build_banks(n_entities=4, n_mentions=3, d_t=6, d_v=5, text_rows=4,
                vision_rows=3, seed=0, ragged=False):
    rng = np.random.default_rng(seed)
    banks = fs.Banks(
        entity_text=fs.FeatureBank("entity", "text", d_t),
        entity_vision=fs.FeatureBank("entity", "vision", d_v),
        mention_text=fs.FeatureBank("mention", "text", d_t),
        mention_vision=fs.FeatureBank("mention", "vision", d_v),
    )

    def rows(base):
        return int(rng.integers(1, base + 1)) if ragged else base

    for i in range(1, n_entities + 1):
        banks.entity_text.add(fs.EmbeddingRecord(
            i, rng.normal(size=d_t), rng.normal(size=(rows(text_rows), d_t))))
        banks.entity_vision.add(fs.EmbeddingRecord(
            i, rng.normal(size=d_v), rng.normal(size=(rows(vision_rows), d_v))))
    for i in range(1, n_mentions + 1):
        mid = 1000 + i
        banks.mention_text.add(fs.EmbeddingRecord(
            mid, rng.normal(size=d_t), rng.normal(size=(rows(text_rows), d_t))))
        banks.mention_vision.add(fs.EmbeddingRecord(
            mid, rng.normal(size=d_v), rng.normal(size=(rows(vision_rows), d_v))))
    return banks


def groups_from_banks(banks, entity_ids, mention_ids):
    return (fs._group(banks.entity_text, entity_ids, 40),
            fs._group(banks.entity_vision, entity_ids, 50),
            fs._group(banks.mention_text, mention_ids, 40),
            fs._group(banks.mention_vision, mention_ids, 50))


@pytest.mark.parametrize("pooling", ["mean", "max", "soft"])
@pytest.mark.parametrize("ragged", [False, True])
def test_batched_matches_per_pair(pooling, ragged):
    banks = build_banks(ragged=ragged, seed=3 if ragged else 2)
    params = ModelParams(Dims(d_t=6, d_v=5, d_s=4), k_heads=2, seed=7)
    cfg = LossConfig(pooling=pooling)
    entity_ids = [1, 2, 3, 4]
    mention_ids = [1001, 1002, 1003]
    et, ev, mt, mv = groups_from_banks(banks, entity_ids, mention_ids)
    streams = scoring.score_matrices(et, ev, mt, mv, params, cfg)
    for i, mid in enumerate(mention_ids):
        for j, eid in enumerate(entity_ids):
            bundle = scoring.score_pair(
                banks.entity_text.get(eid), banks.entity_vision.get(eid),
                banks.mention_text.get(mid), banks.mention_vision.get(mid),
                params, cfg)
            assert streams["m_t"].data[i, j] == pytest.approx(bundle.m_t, abs=1e-9)
            assert streams["m_v"].data[i, j] == pytest.approx(bundle.m_v, abs=1e-9)
            assert streams["m_c"].data[i, j] == pytest.approx(bundle.m_c, abs=1e-9)


def test_union_matrix_matches_bundles():
    banks = build_banks(seed=5)
    params = ModelParams(Dims(d_t=6, d_v=5, d_s=4), k_heads=2, seed=9)
    cfg = LossConfig()
    et, ev, mt, mv = groups_from_banks(banks, [1, 2], [1001, 1002])
    streams = scoring.score_matrices(et, ev, mt, mv, params, cfg)
    union = scoring.union_matrix(streams, cfg)
    bundle = scoring.score_pair(
        banks.entity_text.get(2), banks.entity_vision.get(2),
        banks.mention_text.get(1001), banks.mention_vision.get(1001), params, cfg)
    assert union.data[0, 1] == pytest.approx(bundle.m_u, abs=1e-9)


def test_disabled_streams_are_absent():
    banks = build_banks(seed=6)
    params = ModelParams(Dims(d_t=6, d_v=5, d_s=4), k_heads=2, seed=11)
    cfg = LossConfig(use_vision=False, score_vision=False)
    et, ev, mt, mv = groups_from_banks(banks, [1, 2], [1001])
    streams = scoring.score_matrices(et, ev, mt, mv, params, cfg)
    assert set(streams) == {"m_t", "m_c"}


def test_direction_flags_change_only_cross_stream():
    banks = build_banks(seed=8)
    params = ModelParams(Dims(d_t=6, d_v=5, d_s=4), k_heads=2, seed=13)
    et, ev, mt, mv = groups_from_banks(banks, [1, 2, 3], [1001, 1002])
    both = scoring.score_matrices(et, ev, mt, mv, params, LossConfig())
    t2v_only = scoring.score_matrices(et, ev, mt, mv, params,
                                      LossConfig(enable_v2t=False))
    np.testing.assert_allclose(both["m_t"].data, t2v_only["m_t"].data, atol=0)
    np.testing.assert_allclose(both["m_v"].data, t2v_only["m_v"].data, atol=0)
    assert not np.allclose(both["m_c"].data, t2v_only["m_c"].data)
    v2t_only = scoring.score_matrices(et, ev, mt, mv, params,
                                      LossConfig(enable_t2v=False))
    np.testing.assert_allclose(
        both["m_c"].data,
        0.5 * (t2v_only["m_c"].data + v2t_only["m_c"].data), atol=1e-12)


def test_padding_is_score_noop():
    # identical records, one bank set padded with extra zero rows + masks
    banks = build_banks(seed=12, text_rows=3, vision_rows=2)
    params = ModelParams(Dims(d_t=6, d_v=5, d_s=4), k_heads=2, seed=15)
    cfg = LossConfig()
    et, ev, mt, mv = groups_from_banks(banks, [1, 2], [1001, 1002])

    def padded(group, extra):
        locals_ = np.concatenate(
            [group.locals_, np.zeros((len(group.ids), extra, group.locals_.shape[2]))],
            axis=1)
        masks = np.concatenate(
            [group.masks, np.zeros((len(group.ids), extra), dtype=bool)], axis=1)
        return fs.FeatureGroup(ids=group.ids, globals_=group.globals_,
                               locals_=locals_, masks=masks)

    base = scoring.score_matrices(et, ev, mt, mv, params, cfg)
    pad = scoring.score_matrices(padded(et, 3), padded(ev, 2),
                                 padded(mt, 1), padded(mv, 4), params, cfg)
    for key in ("m_t", "m_v", "m_c"):
        np.testing.assert_allclose(pad[key].data, base[key].data, atol=1e-9)


def test_gradients_flow_through_batched_path():
    banks = build_banks(n_entities=3, n_mentions=3, seed=21)
    params = ModelParams(Dims(d_t=6, d_v=5, d_s=4), k_heads=2, seed=23)
    cfg = LossConfig()
    et, ev, mt, mv = groups_from_banks(banks, [1, 2, 3], [1001, 1002, 1003])

    def build():
        streams = scoring.score_matrices(et, ev, mt, mv, params, cfg)
        total = ad.tsum(streams["m_t"])
        total = ad.add(total, ad.tsum(streams["m_v"]))
        return ad.add(total, ad.tsum(streams["m_c"]))

    res = ad.grad_check(build, params.named(), h=1e-5, max_coords_per_param=6,
                        rng=np.random.default_rng(0))
    assert res.max_rel_error < 1e-4, res


def test_frozen_params_build_no_tape():
    banks = build_banks(seed=31)
    params = ModelParams(Dims(d_t=6, d_v=5, d_s=4), k_heads=2, seed=33)
    et, ev, mt, mv = groups_from_banks(banks, [1, 2], [1001])
    streams = scoring.score_matrices(et, ev, mt, mv, params.frozen(), LossConfig())
    assert not streams["m_t"].requires_grad
    assert not streams["m_c"].requires_grad
