"""Training loop, checkpointing, and parameter/FLOP accounting.

Batches are sampled with a per-step child seed derived from (seed, step), so
resuming from a checkpoint continues the exact stream an uninterrupted run
would have used. Model selection keeps the best validation MRR; the final
optimizer state is kept alongside so a resumed run is bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericError
from .features import Banks, assemble_batch, low_resource_subset, split_entries
from .icl import IclConfig
from .objective import LossConfig, joint_loss
from .params import Dims, ModelParams
from .scoring import batch_score_matrices

CHECKPOINT_MAGIC = b"M3CK"
CHECKPOINT_VERSION = 1

_BATCH_TAG = 0xBA7C


@dataclass(frozen=True)
class TrainConfig:
    """Flat hyperparameter record; None dims are inferred from the banks."""

    lr: float = 1e-5
    batch_size: int = 96
    max_steps: int = 500
    seed: int = 0
    weight_decay: float = 0.01
    d_t: int | None = None
    d_v: int | None = None
    d_s: int = 96
    k_heads: int = 5
    max_text_rows: int = 40
    max_vision_rows: int = 50
    tau: float = 0.03
    beta: float = 0.8
    gamma: float = 1.0
    pooling: str = "mean"
    low_resource_fraction: float = 1.0
    eval_every: int = 50
    grad_clip: float = 5.0
    use_cl: bool = True
    use_union: bool = True
    use_text: bool = True
    use_vision: bool = True
    use_cross: bool = True
    score_text: bool = True
    score_vision: bool = True
    score_cross: bool = True
    enable_t2v: bool = True
    enable_v2t: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max steps must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval interval must be >= 1")
        if self.k_heads < 1:
            raise ConfigError("need at least one attention head")
        if self.max_text_rows < 1 or self.max_vision_rows < 1:
            raise ConfigError("row caps must be >= 1")
        self.loss_config()  # validates tau/beta/gamma/pooling/flags

    def loss_config(self) -> LossConfig:
        return LossConfig(
            use_cl=self.use_cl, use_union=self.use_union, use_text=self.use_text,
            use_vision=self.use_vision, use_cross=self.use_cross,
            score_text=self.score_text, score_vision=self.score_vision,
            score_cross=self.score_cross, enable_t2v=self.enable_t2v,
            enable_v2t=self.enable_v2t, pooling=self.pooling,
            icl=IclConfig(tau=self.tau, beta=self.beta, gamma=self.gamma))

    def resolved(self, banks: Banks) -> "TrainConfig":
        """Fill inferred dims and validate them against all four banks."""
        d_t = self.d_t if self.d_t is not None else banks.entity_text.dim
        d_v = self.d_v if self.d_v is not None else banks.entity_vision.dim
        expected = {
            "entity text": (banks.entity_text.dim, d_t),
            "mention text": (banks.mention_text.dim, d_t),
            "entity vision": (banks.entity_vision.dim, d_v),
            "mention vision": (banks.mention_vision.dim, d_v),
        }
        for name, (actual, want) in expected.items():
            if actual != want:
                raise DataError(f"{name} bank dim {actual} != configured {want}")
        return replace(self, d_t=d_t, d_v=d_v)

    def dims(self) -> Dims:
        if self.d_t is None or self.d_v is None:
            raise ConfigError("dims not resolved; call resolved(banks) first")
        return Dims(d_t=self.d_t, d_v=self.d_v, d_s=self.d_s)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class TrainResult:
    params: ModelParams            # best-on-validation (final when no valid split)
    config: TrainConfig            # resolved config
    log: list[dict]                # one row per step
    best_step: int | None
    best_mrr: float | None
    final_params: ModelParams      # state at the last step, for resuming
    optimizer: ad.OptimizerState   # matches final_params
    steps_done: int


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _BATCH_TAG, step]))


def _snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named().items()}


def _restore(params: ModelParams, snapshot: dict[str, np.ndarray]) -> None:
    for name, t in params.named().items():
        t.data[:] = snapshot[name]


def train(config: TrainConfig, banks: Banks, entries, resume: "Checkpoint | None" = None,
          progress=None) -> TrainResult:
    """Minimize the joint objective; returns the selected checkpointable state."""
    cfg = config.resolved(banks)
    loss_cfg = cfg.loss_config()
    banks.validate_manifest(entries)

    train_entries = split_entries(entries, "train")
    valid_entries = split_entries(entries, "valid")
    if not train_entries:
        raise DataError("manifest has no training entries")
    if cfg.low_resource_fraction < 1.0:
        train_entries = low_resource_subset(train_entries, cfg.low_resource_fraction,
                                            seed=cfg.seed)

    if resume is not None:
        if resume.config.to_dict() != cfg.to_dict():
            raise ConfigError("resume checkpoint was trained with a different config")
        params = resume.build_params()
        opt = resume.build_optimizer(params)
        start_step = resume.step
    else:
        params = ModelParams(cfg.dims(), cfg.k_heads, seed=cfg.seed)
        opt = ad.OptimizerState(params.named(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        start_step = 0

    named = params.named()
    log: list[dict] = []
    best: tuple[float, int, dict[str, np.ndarray]] | None = None

    def evaluate_validation(step: int) -> None:
        nonlocal best
        if not valid_entries:
            return
        from .evaluate import evaluate_split
        report = evaluate_split(params, banks, valid_entries, cfg, split="valid")
        if best is None or report.mrr > best[0]:
            best = (report.mrr, step, _snapshot(params))

    u_available = len(train_entries)
    for step in range(start_step, cfg.max_steps):
        u = min(cfg.batch_size, u_available)
        if loss_cfg.use_cl and u < 2:
            raise ConfigError("contrastive loss needs batches of at least 2 mentions")
        batch = assemble_batch(train_entries, banks, u, _step_rng(cfg.seed, step),
                               max_text_rows=cfg.max_text_rows,
                               max_vision_rows=cfg.max_vision_rows)
        try:
            streams = batch_score_matrices(batch, params, loss_cfg)
            globals_ = (batch.entity_text.globals_, batch.mention_text.globals_,
                        batch.entity_vision.globals_, batch.mention_vision.globals_)
            loss, breakdown = joint_loss(streams, np.arange(u), globals_, loss_cfg)
        except NumericError as exc:
            raise NumericError(f"non-finite loss at step {step}: {exc}") from exc
        params.zero_grads()
        grads = ad.gradients(loss, named)
        grad_norm = ad.clip_gradients(grads, cfg.grad_clip)
        ad.adamw_step(named, grads, opt)
        row = {"step": step, **breakdown.as_dict(), "grad_norm": grad_norm}
        log.append(row)
        if progress is not None:
            progress(row)
        if (step + 1) % cfg.eval_every == 0:
            evaluate_validation(step)

    if cfg.max_steps > start_step and cfg.max_steps % cfg.eval_every != 0:
        evaluate_validation(cfg.max_steps - 1)

    final_params = ModelParams(cfg.dims(), cfg.k_heads, seed=cfg.seed)
    _restore(final_params, _snapshot(params))
    best_step = best_mrr = None
    if best is not None:
        best_mrr, best_step, snapshot = best
        _restore(params, snapshot)
    return TrainResult(params=params, config=cfg, log=log, best_step=best_step,
                       best_mrr=best_mrr, final_params=final_params, optimizer=opt,
                       steps_done=cfg.max_steps)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    tensors: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)

    def build_params(self) -> ModelParams:
        params = ModelParams(self.config.dims(), self.config.k_heads,
                             seed=self.config.seed)
        named = params.named()
        if named.keys() != self.tensors.keys():
            raise DataError("checkpoint parameter names do not match the config")
        for name, tensor in named.items():
            if tensor.data.shape != self.tensors[name].shape:
                raise DataError(f"checkpoint shape mismatch for {name!r}")
            tensor.data[:] = self.tensors[name]
        return params

    def build_optimizer(self, params: ModelParams) -> ad.OptimizerState:
        opt = ad.OptimizerState(params.named(), lr=self.config.lr,
                                weight_decay=self.config.weight_decay)
        opt.step = self.step
        for name in opt.m:
            opt.m[name][:] = self.opt_m[name]
            opt.v[name][:] = self.opt_v[name]
        return opt


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode()
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def save_checkpoint(path, params: ModelParams, config: TrainConfig, step: int,
                    optimizer: ad.OptimizerState | None = None) -> None:
    config_blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(config_blob)) + config_blob
    body += struct.pack("<Q", step)
    named = params.named()
    body += struct.pack("<I", len(named))
    for name in sorted(named):
        body += _pack_array(name, named[name].data)
    body += struct.pack("<B", 1 if optimizer is not None else 0)
    if optimizer is not None:
        for name in sorted(named):
            body += optimizer.m[name].astype("<f8").tobytes()
            body += optimizer.v[name].astype("<f8").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(body) + digest)


def load_checkpoint(path) -> Checkpoint:
    return _parse_checkpoint(Path(path).read_bytes(), str(path))


def _parse_checkpoint(blob: bytes, label: str) -> Checkpoint:
    if len(blob) < 40 or blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{label}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{label}: checksum mismatch, file corrupted")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{label}: unsupported checkpoint version {version}")
    (config_len,) = struct.unpack_from("<I", body, off)
    off += 4
    config = TrainConfig.from_dict(json.loads(body[off:off + config_len]))
    off += config_len
    (step,) = struct.unpack_from("<Q", body, off)
    off += 8
    (n_params,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        off += count * 8
        tensors[name] = arr.astype(np.float64)
    (has_opt,) = struct.unpack_from("<B", body, off)
    off += 1
    opt_m, opt_v = {}, {}
    if has_opt:
        for name in sorted(tensors):
            count = tensors[name].size
            opt_m[name] = np.frombuffer(body, dtype="<f8", count=count,
                                        offset=off).reshape(tensors[name].shape).copy()
            off += count * 8
            opt_v[name] = np.frombuffer(body, dtype="<f8", count=count,
                                        offset=off).reshape(tensors[name].shape).copy()
            off += count * 8
    if off != len(body):
        raise DataError(f"{label}: {len(body) - off} unexpected trailing bytes")
    return Checkpoint(config=config, step=step, tensors=tensors,
                      opt_m=opt_m, opt_v=opt_v)


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

def count_params(params: ModelParams) -> dict[str, int]:
    counts = params.component_counts()
    counts["total"] = params.total_count()
    return counts


# Cost model constants: one flop per elementwise op application, five per
# softmax element (max, subtract, exp, sum, divide), seven per tanh element.
SOFTMAX_COST = 5
TANH_COST = 7


def _flops_matmul(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def _flops_affine(rows: int, d_in: int, d_out: int) -> int:
    return _flops_matmul(rows, d_in, d_out) + rows * d_out


@dataclass(frozen=True)
class BatchShape:
    mentions: int
    candidates: int
    text_rows: int
    vision_rows: int


def estimate_flops(config: TrainConfig, shape: BatchShape) -> int:
    """Analytic forward-pass cost of scoring a batch through the match graph.

    Counts the intra-modal and cross-modal scoring pipelines per mention and
    per (mention, candidate) pair; linear in the number of mentions.
    """
    if config.d_t is None or config.d_v is None:
        raise ConfigError("estimate_flops needs resolved dims (d_t, d_v)")
    u, c = shape.mentions, shape.candidates
    d_s = config.d_s
    total = 0

    def imn_cost(d: int, rows_e: int, rows_m: int) -> int:
        per_mention = 2 * _flops_affine(rows_m, d, d_s)          # keys and values
        per_candidate = _flops_affine(rows_e, d, d_s)            # queries
        per_candidate += _flops_affine(1, d, d_s)                # projected global
        per_pair = _flops_matmul(rows_e, d_s, rows_m)            # attention logits
        per_pair += rows_e * rows_m                              # scale by 1/sqrt(d_s)
        per_pair += SOFTMAX_COST * rows_e * rows_m
        per_pair += _flops_matmul(rows_e, rows_m, d_s)           # attend values
        per_pair += rows_e * d_s                                 # pooling
        per_pair += 2 * d_s                                      # dot with global
        per_pair += 2 * d                                        # coarse dot
        per_pair += 2                                            # averaging the two
        return u * per_mention + u * c * (per_candidate + per_pair)

    if config.score_text:
        total += imn_cost(config.d_t, shape.text_rows, shape.text_rows)
    if config.score_vision:
        total += imn_cost(config.d_v, shape.vision_rows, shape.vision_rows)

    def cmn_object_cost(d_g: int, d_l: int, rows: int, k: int) -> int:
        d_c = d_g
        cost = _flops_affine(1, d_g, d_c)                        # scaled global
        cost += _flops_affine(rows, d_l, d_c)                    # scaled locals
        cost += _flops_matmul(1, d_c, rows) + SOFTMAX_COST * rows
        cost += _flops_matmul(1, rows, d_c) + d_c                # enhanced global + relu
        cost += _flops_matmul(rows, d_c, 1) + SOFTMAX_COST * rows
        cost += _flops_matmul(rows, 1, d_c) + rows * d_c         # enhanced locals + relu
        h_elems = (rows + 1) * d_c
        cost += k * h_elems                                      # temperature scaling
        cost += SOFTMAX_COST * k * h_elems
        cost += 2 * k * h_elems                                  # weight and reduce
        cost += k * d_c                                          # head average
        cost += (TANH_COST + 2) * d_c                            # gate
        return cost

    if config.score_cross:
        directions = []
        if config.enable_t2v:
            directions.append((config.d_t, config.d_v, shape.vision_rows))
        if config.enable_v2t:
            directions.append((config.d_v, config.d_t, shape.text_rows))
        for d_g, d_l, rows in directions:
            per_object = cmn_object_cost(d_g, d_l, rows, config.k_heads)
            total += u * per_object            # mention-side pipeline
            total += u * c * per_object        # candidate-side pipelines
            total += u * c * 2 * d_g           # direction score dot
        if len(directions) == 2:
            total += u * c * 2                 # direction averaging
    total += u * c * 3                         # union average
    return total
