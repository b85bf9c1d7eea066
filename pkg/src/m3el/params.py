"""Trainable parameters: projection maps for both matching networks.

All projections are single affine maps y = x @ W + b with W laid out
(in_dim, out_dim). Head temperatures are stored as free scalars and
exponentiated at use, which keeps them positive by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


@dataclass(frozen=True)
class Dims:
    """Feature widths. d_c per direction equals the gating global's width."""

    d_t: int
    d_v: int
    d_s: int

    def __post_init__(self):
        if min(self.d_t, self.d_v, self.d_s) < 1:
            raise ConfigError(f"dims must be positive, got {self}")


def xavier_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def affine(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """(rows, in) @ (in, out) + bias."""
    return ad.add_bias(ad.matmul(x, w), b)


def affine_vec(v: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """(in,) -> (out,) through the same map."""
    return ad.reshape(affine(ad.as_row(v), w, b), (w.data.shape[1],))


class AttentionTriple:
    """The three local-feature projections of one intra-modal matching head."""

    def __init__(self, prefix: str, in_dim: int, out_dim: int, rng):
        self.prefix = prefix
        self.w1 = ad.tensor(xavier_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.b1 = ad.tensor(np.zeros(out_dim), requires_grad=True)
        self.w2 = ad.tensor(xavier_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.b2 = ad.tensor(np.zeros(out_dim), requires_grad=True)
        self.w3 = ad.tensor(xavier_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.b3 = ad.tensor(np.zeros(out_dim), requires_grad=True)

    def named(self) -> dict[str, ad.Tensor]:
        return {f"{self.prefix}.{k}": getattr(self, k)
                for k in ("w1", "b1", "w2", "b2", "w3", "b3")}

    @property
    def out_dim(self) -> int:
        return self.w1.data.shape[1]

    def frozen(self) -> "AttentionTriple":
        clone = object.__new__(AttentionTriple)
        clone.prefix = self.prefix
        for k in ("w1", "b1", "w2", "b2", "w3", "b3"):
            setattr(clone, k, getattr(self, k).detach())
        return clone


class DirectionParams:
    """One cross-modal direction: global scaler, local scaler, head temperatures.

    Entity-level and mention-level pipelines share these weights.
    """

    def __init__(self, prefix: str, global_dim: int, local_dim: int, k_heads: int, rng):
        if k_heads < 1:
            raise ConfigError(f"need at least one head, got {k_heads}")
        self.prefix = prefix
        self.d_c = global_dim
        self.w4 = ad.tensor(xavier_uniform(rng, global_dim, self.d_c), requires_grad=True)
        self.b4 = ad.tensor(np.zeros(self.d_c), requires_grad=True)
        self.w5 = ad.tensor(xavier_uniform(rng, local_dim, self.d_c), requires_grad=True)
        self.b5 = ad.tensor(np.zeros(self.d_c), requires_grad=True)
        # omega_k = exp(raw_k); zero-initialized raw gives omega = 1
        self.omega_raw = ad.tensor(np.zeros(k_heads), requires_grad=True)

    @property
    def k_heads(self) -> int:
        return self.omega_raw.data.shape[0]

    def omegas(self) -> ad.Tensor:
        return ad.exp(self.omega_raw)

    def named(self) -> dict[str, ad.Tensor]:
        return {f"{self.prefix}.{k}": getattr(self, k)
                for k in ("w4", "b4", "w5", "b5", "omega_raw")}

    def frozen(self) -> "DirectionParams":
        clone = object.__new__(DirectionParams)
        clone.prefix = self.prefix
        clone.d_c = self.d_c
        for k in ("w4", "b4", "w5", "b5", "omega_raw"):
            setattr(clone, k, getattr(self, k).detach())
        return clone


class ModelParams:
    """Every trainable tensor of the matching engine, by structured name."""

    def __init__(self, dims: Dims, k_heads: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
        self.dims = dims
        self.k_heads = k_heads
        self.imn_text = AttentionTriple("imn.text", dims.d_t, dims.d_s, rng)
        self.imn_vision = AttentionTriple("imn.vision", dims.d_v, dims.d_s, rng)
        # T2V gates with the text global, V2T with the vision global
        self.cmn_t2v = DirectionParams("cmn.t2v", dims.d_t, dims.d_v, k_heads, rng)
        self.cmn_v2t = DirectionParams("cmn.v2t", dims.d_v, dims.d_t, k_heads, rng)

    def named(self) -> dict[str, ad.Tensor]:
        out = {}
        for part in (self.imn_text, self.imn_vision, self.cmn_t2v, self.cmn_v2t):
            out.update(part.named())
        return out

    def zero_grads(self) -> None:
        for p in self.named().values():
            p.grad = None

    def frozen(self) -> "ModelParams":
        """Constant view sharing data; scoring through it builds no gradient tape."""
        clone = object.__new__(ModelParams)
        clone.dims = self.dims
        clone.k_heads = self.k_heads
        clone.imn_text = self.imn_text.frozen()
        clone.imn_vision = self.imn_vision.frozen()
        clone.cmn_t2v = self.cmn_t2v.frozen()
        clone.cmn_v2t = self.cmn_v2t.frozen()
        return clone

    def component_counts(self) -> dict[str, int]:
        return {
            "imn_text": sum(p.data.size for p in self.imn_text.named().values()),
            "imn_vision": sum(p.data.size for p in self.imn_vision.named().values()),
            "cmn_t2v": sum(p.data.size for p in self.cmn_t2v.named().values()),
            "cmn_v2t": sum(p.data.size for p in self.cmn_v2t.named().values()),
        }

    def total_count(self) -> int:
        return sum(self.component_counts().values())
