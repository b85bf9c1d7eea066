"""Embedding banks, dataset manifests, batch assembly, synthetic data.

Bank file format (little-endian, float32 storage, converted to float64 on
load):

    magic "M3EB" | u32 version=1 | u8 modality | u8 side | u32 dim | u32 count
    per record: u64 id | u32 local_rows | dim f32 global | local_rows*dim f32 local

Manifests are JSON lines, one mention per line:
    {"mention_id": ..., "gold_entity_id": ..., "candidates": [...], "split": ...}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BankFormatError,
    ConfigError,
    DataError,
    NonFiniteBankError,
    TruncatedBankError,
    VersionMismatchError,
)

BANK_MAGIC = b"M3EB"
BANK_VERSION = 1

MODALITIES = ("text", "vision")
SIDES = ("entity", "mention")
SPLITS = ("train", "valid", "test")


@dataclass
class EmbeddingRecord:
    """One object's global feature vector plus its local feature matrix.

    For text, local row 0 is the global-token position; for vision, row 0 is
    the class-token position. Rows beyond row 0 are per-token / per-patch
    states.
    """

    id: int
    global_vec: np.ndarray   # (dim,)
    local: np.ndarray        # (rows, dim), rows >= 1

    def __post_init__(self):
        self.global_vec = np.asarray(self.global_vec, dtype=np.float64)
        self.local = np.asarray(self.local, dtype=np.float64)
        if self.local.ndim != 2 or self.local.shape[0] < 1:
            raise DataError(f"record {self.id}: local matrix needs at least one row")
        if self.global_vec.ndim != 1 or self.global_vec.shape[0] != self.local.shape[1]:
            raise DataError(f"record {self.id}: global/local width mismatch")
        if not (np.all(np.isfinite(self.global_vec)) and np.all(np.isfinite(self.local))):
            raise NonFiniteBankError(f"record {self.id}: non-finite values")


@dataclass
class FeatureBank:
    """All records for one (side, modality) pair, indexed by id."""

    side: str
    modality: str
    dim: int
    records: dict[int, EmbeddingRecord] = field(default_factory=dict)

    def __post_init__(self):
        if self.side not in SIDES:
            raise ConfigError(f"unknown side {self.side!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")

    def add(self, record: EmbeddingRecord) -> None:
        if record.global_vec.shape[0] != self.dim:
            raise DataError(f"record {record.id}: dim {record.global_vec.shape[0]} != bank dim {self.dim}")
        if record.id in self.records:
            raise DataError(f"duplicate record id {record.id}")
        self.records[record.id] = record

    def get(self, record_id: int) -> EmbeddingRecord:
        try:
            return self.records[record_id]
        except KeyError:
            raise DataError(
                f"id {record_id} not found in {self.side}/{self.modality} bank") from None

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, FeatureBank):
            return NotImplemented
        if (self.side, self.modality, self.dim) != (other.side, other.modality, other.dim):
            return False
        if self.records.keys() != other.records.keys():
            return False
        return all(
            np.array_equal(r.global_vec, other.records[i].global_vec)
            and np.array_equal(r.local, other.records[i].local)
            for i, r in self.records.items())


def write_bank(bank: FeatureBank, path) -> None:
    """Serialize in float32 storage mode; records ordered by id."""
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<IBBII", BANK_VERSION,
                             MODALITIES.index(bank.modality), SIDES.index(bank.side),
                             bank.dim, len(bank.records)))
        for rid in sorted(bank.records):
            rec = bank.records[rid]
            fh.write(struct.pack("<QI", rid, rec.local.shape[0]))
            fh.write(rec.global_vec.astype("<f4").tobytes())
            fh.write(rec.local.astype("<f4").tobytes())


def load_bank(path) -> FeatureBank:
    """Read and validate a bank file; raises a distinct error per defect."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != BANK_MAGIC:
        raise BadMagicError(f"{path}: not a feature bank (bad magic)")
    if len(blob) < 18:
        raise TruncatedBankError(f"{path}: header truncated")
    version, modality_code, side_code, dim, count = struct.unpack_from("<IBBII", blob, 4)
    if version != BANK_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {BANK_VERSION}")
    if modality_code >= len(MODALITIES) or side_code >= len(SIDES):
        raise BankFormatError(f"{path}: unknown modality/side codes ({modality_code}, {side_code})")
    bank = FeatureBank(side=SIDES[side_code], modality=MODALITIES[modality_code], dim=dim)
    off = 18
    for _ in range(count):
        if off + 12 > len(blob):
            raise TruncatedBankError(f"{path}: record header truncated at byte {off}")
        rid, local_rows = struct.unpack_from("<QI", blob, off)
        off += 12
        need = (local_rows + 1) * dim * 4
        if off + need > len(blob):
            raise TruncatedBankError(
                f"{path}: record {rid} declares {local_rows} local rows but data is truncated")
        global_vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += dim * 4
        local = np.frombuffer(blob, dtype="<f4", count=local_rows * dim,
                              offset=off).astype(np.float64).reshape(local_rows, dim)
        off += local_rows * dim * 4
        if not (np.all(np.isfinite(global_vec)) and np.all(np.isfinite(local))):
            raise NonFiniteBankError(f"{path}: record {rid} holds non-finite values")
        bank.add(EmbeddingRecord(id=rid, global_vec=global_vec, local=local))
    if off != len(blob):
        raise TruncatedBankError(f"{path}: {len(blob) - off} trailing bytes after last record")
    return bank


@dataclass
class MentionManifestEntry:
    mention_id: int
    gold_entity_id: int
    candidates: list[int]
    split: str

    def __post_init__(self):
        if not self.candidates:
            raise DataError(f"mention {self.mention_id}: empty candidate list")
        if self.gold_entity_id not in self.candidates:
            raise DataError(f"mention {self.mention_id}: gold entity not among candidates")
        if self.split not in SPLITS:
            raise DataError(f"mention {self.mention_id}: unknown split {self.split!r}")


def write_manifest(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"mention_id": e.mention_id,
                                 "gold_entity_id": e.gold_entity_id,
                                 "candidates": list(e.candidates),
                                 "split": e.split}) + "\n")


def load_manifest(path) -> list[MentionManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entries.append(MentionManifestEntry(
                    mention_id=int(obj["mention_id"]),
                    gold_entity_id=int(obj["gold_entity_id"]),
                    candidates=[int(c) for c in obj["candidates"]],
                    split=str(obj["split"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest entry: {exc}") from exc
    return entries


@dataclass
class Banks:
    """The four banks one run needs."""

    entity_text: FeatureBank
    entity_vision: FeatureBank
    mention_text: FeatureBank
    mention_vision: FeatureBank

    def validate_manifest(self, entries) -> None:
        """Every referenced id must resolve in all four banks."""
        missing = []
        for e in entries:
            if e.mention_id not in self.mention_text.records or \
               e.mention_id not in self.mention_vision.records:
                missing.append(("mention", e.mention_id))
            for c in e.candidates:
                if c not in self.entity_text.records or c not in self.entity_vision.records:
                    missing.append(("entity", c))
        if missing:
            preview = ", ".join(f"{kind} {mid}" for kind, mid in missing[:5])
            raise DataError(f"{len(missing)} unresolvable ids in manifest: {preview}")


def _fit_rows(local: np.ndarray, max_rows: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncate or zero-pad a local matrix; mask marks the real rows."""
    rows = local.shape[0]
    if rows >= max_rows:
        return local[:max_rows].copy(), np.ones(max_rows, dtype=bool)
    padded = np.zeros((max_rows, local.shape[1]))
    padded[:rows] = local
    mask = np.zeros(max_rows, dtype=bool)
    mask[:rows] = True
    return padded, mask


@dataclass
class FeatureGroup:
    """Aligned global/local features for one (side, modality) across a batch."""

    ids: list[int]
    globals_: np.ndarray   # (u, dim)
    locals_: np.ndarray    # (u, rows, dim), zero-padded
    masks: np.ndarray      # (u, rows) bool


@dataclass
class Batch:
    """u aligned (mention, gold entity) pairs with all four feature groups."""

    mention_ids: list[int]
    gold_ids: list[int]
    entity_text: FeatureGroup
    entity_vision: FeatureGroup
    mention_text: FeatureGroup
    mention_vision: FeatureGroup

    @property
    def size(self) -> int:
        return len(self.mention_ids)


def _group(bank: FeatureBank, ids, max_rows: int) -> FeatureGroup:
    rows = min(max_rows, max(bank.get(i).local.shape[0] for i in ids))
    globals_ = np.stack([bank.get(i).global_vec for i in ids])
    locals_, masks = [], []
    for i in ids:
        padded, mask = _fit_rows(bank.get(i).local, rows)
        locals_.append(padded)
        masks.append(mask)
    return FeatureGroup(ids=list(ids), globals_=globals_,
                        locals_=np.stack(locals_), masks=np.stack(masks))


def assemble_batch(entries, banks: Banks, u: int, rng,
                   max_text_rows: int = 40, max_vision_rows: int = 50) -> Batch:
    """Sample u distinct mentions and gather their aligned feature groups."""
    if u < 1:
        raise ConfigError(f"batch size must be >= 1, got {u}")
    if u > len(entries):
        raise DataError(f"batch size {u} exceeds {len(entries)} available entries")
    chosen = [entries[i] for i in rng.choice(len(entries), size=u, replace=False)] \
        if u < len(entries) else list(entries)
    mention_ids = [e.mention_id for e in chosen]
    gold_ids = [e.gold_entity_id for e in chosen]
    return Batch(
        mention_ids=mention_ids,
        gold_ids=gold_ids,
        entity_text=_group(banks.entity_text, gold_ids, max_text_rows),
        entity_vision=_group(banks.entity_vision, gold_ids, max_vision_rows),
        mention_text=_group(banks.mention_text, mention_ids, max_text_rows),
        mention_vision=_group(banks.mention_vision, mention_ids, max_vision_rows),
    )


def low_resource_subset(train_entries, fraction: float, seed: int):
    """Deterministic floor(fraction * N) sample of the training entries."""
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"low-resource fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(train_entries)
    n = int(fraction * len(train_entries))
    if n < 1:
        raise ConfigError(
            f"fraction {fraction} of {len(train_entries)} entries leaves an empty training set")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(train_entries), size=n, replace=False))
    return [train_entries[i] for i in idx]


@dataclass
class SyntheticSpec:
    """Knobs for the planted-structure generator."""

    num_mentions: int = 64
    num_entities: int | None = None   # default: gold + distractors per mention, all distinct
    d_t: int = 32
    d_v: int = 16
    text_rows: int = 6                # local rows incl. the global-token row
    vision_rows: int = 5              # local rows incl. the class-token row
    noise_sigma: float = 0.01
    distractors: int = 7
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.d_t < 2 or self.d_v < 2:
            raise ConfigError("feature dims must be >= 2")
        if self.num_mentions < 1:
            raise ConfigError("need at least one mention")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.text_rows < 1 or self.vision_rows < 1:
            raise ConfigError("local row counts must be >= 1")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _f32(arr: np.ndarray) -> np.ndarray:
    # Quantize at creation so banks round-trip bit-for-bit through f32 storage.
    return arr.astype(np.float32).astype(np.float64)


def _planted_record(rid, global_vec, rows, sigma, rng) -> EmbeddingRecord:
    local = np.tile(global_vec, (rows, 1))
    if rows > 1 and sigma > 0:
        local[1:] += rng.normal(scale=sigma, size=(rows - 1, global_vec.shape[0]))
    return EmbeddingRecord(id=rid, global_vec=_f32(global_vec), local=_f32(local))


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[Banks, list[MentionManifestEntry]]:
    """Planted retrieval problem: each mention is a noisy copy of its gold entity.

    Gold entities get ids 1..num_mentions; distractor entities are independent
    random unit vectors. All global vectors are unit-normalized.
    """
    rng = np.random.default_rng(seed)
    n_gold = spec.num_mentions
    num_entities = spec.num_entities
    if num_entities is None:
        num_entities = n_gold * (1 + spec.distractors)
    if num_entities < n_gold + (spec.distractors if n_gold else 0):
        raise ConfigError("num_entities too small for the requested distractor count")

    banks = Banks(
        entity_text=FeatureBank("entity", "text", spec.d_t),
        entity_vision=FeatureBank("entity", "vision", spec.d_v),
        mention_text=FeatureBank("mention", "text", spec.d_t),
        mention_vision=FeatureBank("mention", "vision", spec.d_v),
    )

    entity_text_globals = {}
    entity_vision_globals = {}
    for eid in range(1, num_entities + 1):
        tg = _unit(rng.normal(size=spec.d_t))
        vg = _unit(rng.normal(size=spec.d_v))
        entity_text_globals[eid] = tg
        entity_vision_globals[eid] = vg
        banks.entity_text.add(_planted_record(eid, tg, spec.text_rows, spec.noise_sigma, rng))
        banks.entity_vision.add(_planted_record(eid, vg, spec.vision_rows, spec.noise_sigma, rng))

    distractor_pool = np.arange(n_gold + 1, num_entities + 1)
    entries = []
    splits = _assign_splits(n_gold, spec.split_fractions, rng)
    for k in range(n_gold):
        mid = 100_000 + k
        gold = k + 1
        tg = entity_text_globals[gold].copy()
        vg = entity_vision_globals[gold].copy()
        if spec.noise_sigma > 0:
            tg = _unit(tg + rng.normal(scale=spec.noise_sigma, size=spec.d_t))
            vg = _unit(vg + rng.normal(scale=spec.noise_sigma, size=spec.d_v))
        banks.mention_text.add(_planted_record(mid, tg, spec.text_rows, spec.noise_sigma, rng))
        banks.mention_vision.add(_planted_record(mid, vg, spec.vision_rows, spec.noise_sigma, rng))
        if spec.distractors > len(distractor_pool):
            raise ConfigError("distractor pool exhausted; raise num_entities")
        picked = rng.choice(distractor_pool, size=spec.distractors, replace=False) \
            if spec.distractors else np.array([], dtype=int)
        candidates = [gold] + [int(c) for c in picked]
        entries.append(MentionManifestEntry(
            mention_id=mid, gold_entity_id=gold, candidates=candidates, split=splits[k]))
    return banks, entries


def _assign_splits(n, fractions, rng):
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_valid = min(n_valid, n - n_train)
    labels = ["train"] * n_train + ["valid"] * n_valid + ["test"] * (n - n_train - n_valid)
    rng.shuffle(labels)
    return labels


def split_entries(entries, split: str):
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    return [e for e in entries if e.split == split]
