"""Bank I/O, manifest handling, batch assembly, and the synthetic generator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3el import features as fs
from m3el.errors import (
    BadMagicError,
    ConfigError,
    DataError,
    NonFiniteBankError,
    TruncatedBankError,
    VersionMismatchError,
)


def make_bank(side="entity", modality="text", dim=4, n=3, seed=0):
    rng = np.random.default_rng(seed)
    bank = fs.FeatureBank(side, modality, dim)
    for i in range(1, n + 1):
        g = rng.normal(size=dim).astype(np.float32).astype(np.float64)
        rows = int(rng.integers(1, 5))
        local = rng.normal(size=(rows, dim)).astype(np.float32).astype(np.float64)
        bank.add(fs.EmbeddingRecord(id=i, global_vec=g, local=local))
    return bank


class TestBankIO:
    def test_round_trip_bit_for_bit(self, tmp_path):
        bank = make_bank(n=5, seed=42)
        path = tmp_path / "b.m3eb"
        fs.write_bank(bank, path)
        loaded = fs.load_bank(path)
        assert loaded == bank
        # a second write is byte-identical
        path2 = tmp_path / "b2.m3eb"
        fs.write_bank(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_round_trip_property(self, seed):
        import tempfile
        bank = make_bank(dim=3, n=2, seed=seed)
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/b.m3eb"
            fs.write_bank(bank, path)
            assert fs.load_bank(path) == bank

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.m3eb"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(BadMagicError):
            fs.load_bank(path)

    def test_version_mismatch(self, tmp_path):
        bank = make_bank(n=1)
        path = tmp_path / "b.m3eb"
        fs.write_bank(bank, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            fs.load_bank(path)

    def test_truncated_record(self, tmp_path):
        bank = make_bank(n=2)
        path = tmp_path / "b.m3eb"
        fs.write_bank(bank, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(TruncatedBankError):
            fs.load_bank(path)

    def test_declared_rows_exceed_payload(self, tmp_path):
        # Record claims 5 local rows but the file only carries 3.
        bank = fs.FeatureBank("entity", "text", 2)
        bank.add(fs.EmbeddingRecord(1, np.zeros(2), np.zeros((3, 2))))
        path = tmp_path / "b.m3eb"
        fs.write_bank(bank, path)
        blob = bytearray(path.read_bytes())
        import struct
        off = 18 + 8  # past header and record id
        blob[off:off + 4] = struct.pack("<I", 5)
        path.write_bytes(bytes(blob))
        with pytest.raises(TruncatedBankError):
            fs.load_bank(path)

    def test_non_finite_payload(self, tmp_path):
        bank = make_bank(n=1)
        path = tmp_path / "b.m3eb"
        fs.write_bank(bank, path)
        blob = bytearray(path.read_bytes())
        blob[-4:] = np.array([np.inf], dtype="<f4").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(NonFiniteBankError):
            fs.load_bank(path)

    def test_trailing_garbage(self, tmp_path):
        bank = make_bank(n=1)
        path = tmp_path / "b.m3eb"
        fs.write_bank(bank, path)
        path.write_bytes(path.read_bytes() + b"\x00\x01")
        with pytest.raises(TruncatedBankError):
            fs.load_bank(path)


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [fs.MentionManifestEntry(1, 10, [10, 11], "train"),
                   fs.MentionManifestEntry(2, 12, [12], "test")]
        path = tmp_path / "m.jsonl"
        fs.write_manifest(entries, path)
        loaded = fs.load_manifest(path)
        assert loaded == entries

    def test_gold_must_be_candidate(self):
        with pytest.raises(DataError):
            fs.MentionManifestEntry(1, 10, [11, 12], "train")

    def test_empty_candidates(self):
        with pytest.raises(DataError):
            fs.MentionManifestEntry(1, 10, [], "train")

    def test_bad_line_reports_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"mention_id": 1, "gold_entity_id": 10, '
                        '"candidates": [10], "split": "train"}\n{"nope": 1}\n')
        with pytest.raises(DataError, match=":2:"):
            fs.load_manifest(path)


def synthetic_setup(**kwargs):
    spec = fs.SyntheticSpec(**kwargs)
    return fs.generate_synthetic(spec, seed=kwargs.pop("seed", 123))


class TestAssembleBatch:
    def setup_method(self):
        self.banks, self.entries = synthetic_setup(num_mentions=6, distractors=2)

    def test_single_pair(self):
        rng = np.random.default_rng(0)
        batch = fs.assemble_batch(self.entries, self.banks, 1, rng)
        assert batch.size == 1
        assert batch.entity_text.ids == [batch.gold_ids[0]]

    def test_exhaustive_unique(self):
        rng = np.random.default_rng(0)
        batch = fs.assemble_batch(self.entries[:4], self.banks, 4, rng)
        assert sorted(batch.mention_ids) == sorted(e.mention_id for e in self.entries[:4])

    def test_alignment_invariant(self):
        rng = np.random.default_rng(7)
        batch = fs.assemble_batch(self.entries, self.banks, 5, rng)
        by_mention = {e.mention_id: e.gold_entity_id for e in self.entries}
        for i in range(batch.size):
            assert by_mention[batch.mention_text.ids[i]] == batch.entity_text.ids[i]
            assert batch.entity_text.ids[i] == batch.entity_vision.ids[i]
            assert batch.mention_text.ids[i] == batch.mention_vision.ids[i]

    def test_truncation_to_max_rows(self):
        banks, entries = synthetic_setup(num_mentions=2, distractors=1, text_rows=60)
        rng = np.random.default_rng(0)
        batch = fs.assemble_batch(entries, banks, 2, rng, max_text_rows=40)
        assert batch.mention_text.locals_.shape[1] == 40
        assert batch.mention_text.masks.all()

    def test_padding_masks_short_records(self):
        banks, entries = synthetic_setup(num_mentions=3, distractors=1, text_rows=4)
        # give one mention fewer local rows than the others
        mid = entries[0].mention_id
        rec = banks.mention_text.records[mid]
        banks.mention_text.records[mid] = fs.EmbeddingRecord(
            id=mid, global_vec=rec.global_vec, local=rec.local[:2])
        rng = np.random.default_rng(0)
        batch = fs.assemble_batch(entries, banks, 3, rng)
        i = batch.mention_ids.index(mid)
        assert batch.mention_text.masks[i].sum() == 2
        assert not batch.mention_text.locals_[i, 2:].any()

    def test_oversized_batch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DataError):
            fs.assemble_batch(self.entries, self.banks, 99, rng)

    def test_unresolvable_id(self):
        bad = fs.MentionManifestEntry(999999, 1, [1], "train")
        with pytest.raises(DataError):
            self.banks.validate_manifest([bad])


class TestLowResource:
    def test_sizes(self):
        entries = list(range(100))
        assert len(fs.low_resource_subset(entries, 0.1, seed=1)) == 10
        assert len(fs.low_resource_subset(entries, 0.2, seed=1)) == 20

    def test_identity_at_one(self):
        entries = list(range(10))
        assert fs.low_resource_subset(entries, 1.0, seed=1) == entries

    def test_deterministic(self):
        entries = list(range(50))
        a = fs.low_resource_subset(entries, 0.3, seed=9)
        b = fs.low_resource_subset(entries, 0.3, seed=9)
        assert a == b

    def test_empty_result_is_config_error(self):
        with pytest.raises(ConfigError):
            fs.low_resource_subset(list(range(5)), 0.1, seed=1)

    def test_fraction_domain(self):
        with pytest.raises(ConfigError):
            fs.low_resource_subset(list(range(5)), 0.0, seed=1)


class TestSyntheticGenerator:
    def test_zero_noise_copies_gold(self):
        banks, entries = synthetic_setup(num_mentions=4, distractors=2, noise_sigma=0.0)
        for e in entries:
            m = banks.mention_text.get(e.mention_id).global_vec
            g = banks.entity_text.get(e.gold_entity_id).global_vec
            np.testing.assert_array_equal(m, g)

    def test_globals_unit_normalized(self):
        banks, _ = synthetic_setup(num_mentions=4, distractors=2)
        for bank in (banks.entity_text, banks.mention_vision):
            for rec in bank.records.values():
                np.testing.assert_allclose(np.linalg.norm(rec.global_vec), 1.0, atol=1e-6)

    def test_cosine_ranking_places_gold_top1(self):
        banks, entries = synthetic_setup(num_mentions=64, distractors=7, noise_sigma=0.01)
        top1 = 0
        for e in entries:
            m = banks.mention_text.get(e.mention_id).global_vec
            sims = []
            for c in e.candidates:
                g = banks.entity_text.get(c).global_vec
                sims.append(float(m @ g / (np.linalg.norm(m) * np.linalg.norm(g))))
            if e.candidates[int(np.argmax(sims))] == e.gold_entity_id:
                top1 += 1
        assert top1 / len(entries) >= 0.99

    def test_same_seed_byte_identical(self, tmp_path):
        for run in ("a", "b"):
            banks, entries = fs.generate_synthetic(fs.SyntheticSpec(num_mentions=5), seed=77)
            fs.write_bank(banks.entity_text, tmp_path / f"{run}.m3eb")
            fs.write_manifest(entries, tmp_path / f"{run}.jsonl")
        assert (tmp_path / "a.m3eb").read_bytes() == (tmp_path / "b.m3eb").read_bytes()
        assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()

    def test_candidates_contain_gold_and_distractors(self):
        _, entries = synthetic_setup(num_mentions=3, distractors=4)
        for e in entries:
            assert e.gold_entity_id in e.candidates
            assert len(e.candidates) == 5
            assert len(set(e.candidates)) == 5

    def test_dims_validated(self):
        with pytest.raises(ConfigError):
            fs.SyntheticSpec(d_t=1)
