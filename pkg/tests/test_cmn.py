"""Cross-modal matching tests: structural identities, scalar oracle, invariants."""

import numpy as np
import pytest

from m3el import autodiff as ad
from m3el import cmn
from m3el.errors import ConfigError
from m3el.features import EmbeddingRecord
from m3el.params import DirectionParams, Dims, ModelParams


def make_direction(global_dim=4, local_dim=3, k=2, seed=0):
    return DirectionParams("cmn.test", global_dim, local_dim, k,
                           np.random.default_rng(seed))


def multihead_reference(h, omegas):
    """Scalar evaluation of the head-averaged temperature pooling."""
    rows, d_c = h.shape
    acc = np.zeros(d_c)
    for omega in omegas:
        for c in range(d_c):
            w = np.exp(omega * h[:, c] - (omega * h[:, c]).max())
            w /= w.sum()
            acc[c] += float((w * h[:, c]).sum())
    return acc / len(omegas)


class TestBidirectionalInteraction:
    def test_single_row_softmax_is_one(self):
        rng = np.random.default_rng(1)
        dirp = make_direction()
        g = rng.normal(size=4)
        loc = rng.normal(size=(1, 3))
        enhanced_global, _ = cmn.bidirectional_interaction(g, loc, dirp)
        t_bar = (g @ dirp.w4.data + dirp.b4.data)
        v_bar = loc @ dirp.w5.data + dirp.b5.data
        np.testing.assert_allclose(enhanced_global.data, np.maximum(v_bar[0], 0.0),
                                   atol=1e-12)

    def test_negative_values_relu_to_zero(self):
        dirp = make_direction()
        dirp.w5.data[:] = 0.0
        dirp.b5.data[:] = -1.0   # v_bar strictly negative everywhere
        g = np.ones(4)
        loc = np.ones((3, 3))
        enhanced_global, _ = cmn.bidirectional_interaction(g, loc, dirp)
        np.testing.assert_array_equal(enhanced_global.data, np.zeros(4))

    def test_enhanced_locals_equal_relu_of_scaled_global(self):
        # direct consequence of the softmax over the singleton global axis
        rng = np.random.default_rng(2)
        dirp = make_direction()
        g = rng.normal(size=4)
        loc = rng.normal(size=(5, 3))
        _, enhanced_locals = cmn.bidirectional_interaction(g, loc, dirp)
        t_bar = g @ dirp.w4.data + dirp.b4.data
        expect = np.tile(np.maximum(t_bar, 0.0), (5, 1))
        np.testing.assert_array_equal(enhanced_locals.data, expect)

    def test_shapes_match_contract(self):
        rng = np.random.default_rng(3)
        dirp = make_direction(global_dim=6, local_dim=2, k=3, seed=4)
        enhanced_global, enhanced_locals = cmn.bidirectional_interaction(
            rng.normal(size=6), rng.normal(size=(7, 2)), dirp)
        assert enhanced_global.data.shape == (6,)
        assert enhanced_locals.data.shape == (7, 6)

    def test_dense_reference(self):
        rng = np.random.default_rng(5)
        dirp = make_direction(seed=6)
        g = rng.normal(size=4)
        loc = rng.normal(size=(4, 3))
        enhanced_global, _ = cmn.bidirectional_interaction(g, loc, dirp)
        t_bar = g @ dirp.w4.data + dirp.b4.data
        v_bar = loc @ dirp.w5.data + dirp.b5.data
        logits = t_bar @ v_bar.T
        attn = np.exp(logits - logits.max())
        attn /= attn.sum()
        np.testing.assert_allclose(enhanced_global.data,
                                   np.maximum(attn @ v_bar, 0.0), atol=1e-12)

    def test_masked_rows_do_not_influence_global(self):
        rng = np.random.default_rng(7)
        dirp = make_direction(seed=8)
        g = rng.normal(size=4)
        loc = rng.normal(size=(3, 3))
        base, _ = cmn.bidirectional_interaction(g, loc, dirp)
        padded = np.vstack([loc, np.zeros((2, 3))])
        mask = np.array([True, True, True, False, False])
        masked, _ = cmn.bidirectional_interaction(g, padded, dirp, mask=mask)
        np.testing.assert_allclose(masked.data, base.data, atol=1e-12)

    def test_all_masked_is_data_error(self):
        from m3el.errors import DataError
        dirp = make_direction()
        with pytest.raises(DataError):
            cmn.bidirectional_interaction(np.ones(4), np.ones((2, 3)), dirp,
                                          mask=np.array([False, False]))


class TestMultiheadFusion:
    def test_single_row_passthrough(self):
        dirp = make_direction(global_dim=3, local_dim=2, k=4, seed=9)
        row = np.array([0.3, -0.8, 1.2])
        # degenerate h: zero local rows is impossible, so feed the global only
        out = cmn.multihead_fusion(np.empty((0, 3)), row, dirp)
        np.testing.assert_allclose(out.data, row, atol=1e-12)

    def test_two_identical_rows(self):
        dirp = make_direction(global_dim=3, local_dim=2, k=5, seed=10)
        row = np.array([0.5, 1.5, -2.0])
        out = cmn.multihead_fusion(row[None, :], row, dirp)
        np.testing.assert_allclose(out.data, row, atol=1e-12)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(11)
        dirp = make_direction(global_dim=3, local_dim=2, k=5, seed=12)
        dirp.omega_raw.data[:] = rng.normal(scale=0.3, size=5)
        locs = rng.normal(size=(3, 3))
        glob = rng.normal(size=3)
        out = cmn.multihead_fusion(locs, glob, dirp)
        h = np.vstack([locs, glob[None, :]])
        expect = multihead_reference(h, np.exp(dirp.omega_raw.data))
        np.testing.assert_allclose(out.data, expect, atol=1e-10)

    def test_output_is_convex_combination_per_column(self):
        rng = np.random.default_rng(13)
        dirp = make_direction(global_dim=4, local_dim=2, k=3, seed=14)
        dirp.omega_raw.data[:] = rng.normal(size=3)
        locs = rng.normal(size=(5, 4))
        glob = rng.normal(size=4)
        out = cmn.multihead_fusion(locs, glob, dirp).data
        h = np.vstack([locs, glob[None, :]])
        assert np.all(out >= h.min(axis=0) - 1e-12)
        assert np.all(out <= h.max(axis=0) + 1e-12)


class TestGatedFusion:
    def test_zero_global_passes_fused(self):
        fused = np.array([1.0, -2.0])
        out = cmn.gated_fusion(fused, np.zeros(2))
        np.testing.assert_array_equal(out.data, fused)

    def test_zero_fused_gives_gated_global(self):
        g = np.array([0.5, -1.5, 2.0])
        out = cmn.gated_fusion(np.zeros(3), g)
        np.testing.assert_allclose(out.data, np.tanh(g) * g, atol=1e-15)
        assert np.all(out.data >= 0.0)

    def test_elementwise_reference(self):
        rng = np.random.default_rng(15)
        fused, g = rng.normal(size=4), rng.normal(size=4)
        out = cmn.gated_fusion(fused, g)
        expect = np.array([f + np.tanh(x) * x for f, x in zip(fused, g)])
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_dim_mismatch_is_config_error(self):
        with pytest.raises(ConfigError):
            cmn.gated_fusion(np.zeros(3), np.zeros(4))


class TestDirectionScore:
    def test_basis_vector(self):
        e1 = np.array([1.0, 0.0])
        assert cmn.direction_score(e1, e1).item() == 1.0

    def test_orthogonal(self):
        assert cmn.direction_score(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item() == 0.0

    def test_random_dot(self):
        rng = np.random.default_rng(16)
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert cmn.direction_score(a, b).item() == pytest.approx(float(a @ b), rel=1e-12)


def make_pair_records(seed=17, d_t=5, d_v=4, text_rows=3, vision_rows=2):
    rng = np.random.default_rng(seed)

    def rec(rid, dim, rows):
        return EmbeddingRecord(rid, rng.normal(size=dim), rng.normal(size=(rows, dim)))

    return (rec(1, d_t, text_rows), rec(1, d_v, vision_rows),
            rec(2, d_t, text_rows), rec(2, d_v, vision_rows))


class TestCrossModalScore:
    def setup_method(self):
        self.params = ModelParams(Dims(d_t=5, d_v=4, d_s=3), k_heads=2, seed=21)
        self.records = make_pair_records()

    def test_mean_of_directions(self):
        out = ad.mul_scalar(ad.add(ad.tensor(2.0), ad.tensor(4.0)), 0.5)
        assert out.item() == 3.0

    def test_single_direction_passthrough(self):
        et, ev, mt, mv = self.records
        both = cmn.cross_modal_score(et, ev, mt, mv, self.params).item()
        only_t2v = cmn.cross_modal_score(et, ev, mt, mv, self.params,
                                         enable_v2t=False).item()
        only_v2t = cmn.cross_modal_score(et, ev, mt, mv, self.params,
                                         enable_t2v=False).item()
        assert both == pytest.approx((only_t2v + only_v2t) / 2.0, rel=1e-12)

    def test_composition_matches_sub_ops(self):
        et, ev, mt, mv = self.records
        combined = cmn.cross_modal_score(et, ev, mt, mv, self.params).item()
        by_hand = []
        for glob_e, loc_e, glob_m, loc_m, dirp in (
                (et.global_vec, ev.local, mt.global_vec, mv.local, self.params.cmn_t2v),
                (ev.global_vec, et.local, mv.global_vec, mt.local, self.params.cmn_v2t)):
            e_enh_g, e_enh_l = cmn.bidirectional_interaction(glob_e, loc_e, dirp)
            e_repr = cmn.gated_fusion(cmn.multihead_fusion(e_enh_l, e_enh_g, dirp), glob_e)
            m_enh_g, m_enh_l = cmn.bidirectional_interaction(glob_m, loc_m, dirp)
            m_repr = cmn.gated_fusion(cmn.multihead_fusion(m_enh_l, m_enh_g, dirp), glob_m)
            by_hand.append(cmn.direction_score(e_repr, m_repr).item())
        assert combined == pytest.approx(sum(by_hand) / 2.0, abs=1e-12)

    def test_both_disabled_is_config_error(self):
        et, ev, mt, mv = self.records
        with pytest.raises(ConfigError):
            cmn.cross_modal_score(et, ev, mt, mv, self.params,
                                  enable_t2v=False, enable_v2t=False)

    def test_gradients_pass(self):
        et, ev, mt, mv = self.records
        leaves = {}
        leaves.update(self.params.cmn_t2v.named())
        leaves.update(self.params.cmn_v2t.named())
        res = ad.grad_check(
            lambda: cmn.cross_modal_score(et, ev, mt, mv, self.params),
            leaves, h=1e-5)
        assert res.max_rel_error < 1e-4, res
