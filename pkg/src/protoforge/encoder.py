"""A small deterministic text encoder with low-rank adapters.

Architecture: hashed token embeddings are mean-pooled, pushed through a
two-layer tanh MLP and emitted unnormalized.  Both weight matrices can carry a
low-rank adapter ``W = W0 + B @ A``; only A and B train, the base stays
frozen.  The backward pass is hand-derived so gradient checks against central
finite differences stay meaningful.

Weight layout convention: a layer computes ``y = x @ W + b`` with W of shape
(d_in, d_out).  An adapter wrapping W stores ``b`` as (d_in, r) and ``a`` as
(r, d_out) so that ``b @ a`` matches W's shape.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyText, RankTooLarge

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")

DESK_VOCAB = 4096
DESK_EMBED = 64
DESK_HIDDEN = 128
DESK_OUT = 64


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; the published tokenizer hash."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        if not self.ids:
            raise EmptyText("token sequence is empty")


def tokenize(text: str, vocab_size: int) -> TokenSequence:
    """Lowercase, split on non-alphanumerics, FNV-1a hash into [0, vocab_size)."""
    if vocab_size < 1:
        raise DimensionMismatch("vocab_size must be >= 1")
    stripped = text.strip()
    if not stripped:
        raise EmptyText("text is empty after trimming")
    tokens = [t for t in _TOKEN_SPLIT.split(stripped.lower()) if t]
    if not tokens:
        raise EmptyText(f"no tokens survive splitting in {text!r}")
    return TokenSequence(tuple(fnv1a64(t.encode("utf-8")) % vocab_size for t in tokens))


@dataclass
class EncoderParams:
    """Frozen base weights of the toy text encoder."""

    vocab_size: int
    embed_dim: int
    hidden_dim: int
    out_dim: int
    token_table: np.ndarray  # (vocab_size, embed_dim)
    w1: np.ndarray           # (embed_dim, hidden_dim)
    b1: np.ndarray           # (hidden_dim,)
    w2: np.ndarray           # (hidden_dim, out_dim)
    b2: np.ndarray           # (out_dim,)
    frozen: bool = True

    def __post_init__(self):
        expected = {
            "token_table": (self.vocab_size, self.embed_dim),
            "w1": (self.embed_dim, self.hidden_dim),
            "b1": (self.hidden_dim,),
            "w2": (self.hidden_dim, self.out_dim),
            "b2": (self.out_dim,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise DimensionMismatch(f"{name} contains non-finite entries")
            if self.frozen:
                arr = arr.copy()
                arr.setflags(write=False)
            setattr(self, name, arr)

    def base_param_count(self) -> int:
        return (
            self.token_table.size + self.w1.size + self.b1.size
            + self.w2.size + self.b2.size
        )

    def base_snapshot(self) -> dict[str, np.ndarray]:
        return {
            name: np.array(getattr(self, name), copy=True)
            for name in ("token_table", "w1", "b1", "w2", "b2")
        }


@dataclass
class LoraAdapter:
    """Low-rank delta for one base matrix: effective weight = base + b @ a."""

    target: str               # "w1" or "w2"
    a: np.ndarray             # (rank, d_out of target)
    b: np.ndarray             # (d_in of target, rank)
    rank: int

    def __post_init__(self):
        if self.target not in ("w1", "w2"):
            raise DimensionMismatch(f"unknown adapter target {self.target!r}")
        self.a = np.array(self.a, dtype=np.float64)
        self.b = np.array(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise DimensionMismatch("adapter factors must be 2-d")
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise DimensionMismatch("adapter factor shapes inconsistent with rank")
        if self.rank < 1 or self.rank >= min(self.b.shape[0], self.a.shape[1]):
            raise RankTooLarge(
                f"rank {self.rank} not in [1, min{self.b.shape[0], self.a.shape[1]})"
            )

    def delta(self) -> np.ndarray:
        return self.b @ self.a

    def param_count(self) -> int:
        return self.a.size + self.b.size


def lora_init(
    shape_in: int, shape_out: int, rank: int, seed: int, target: str = "w1"
) -> LoraAdapter:
    """a ~ N(0, 1/rank), b = 0, so the initial delta vanishes exactly."""
    if rank < 1:
        raise RankTooLarge("rank must be >= 1")
    if rank >= min(shape_in, shape_out):
        raise RankTooLarge(
            f"rank {rank} must be < min(shape_in, shape_out) = {min(shape_in, shape_out)}"
        )
    rng = np.random.default_rng(seed)
    a = rng.normal(scale=1.0 / np.sqrt(rank), size=(rank, shape_out))
    b = np.zeros((shape_in, rank))
    return LoraAdapter(target=target, a=a, b=b, rank=rank)


def default_adapters(params: EncoderParams, rank: int, seed: int) -> list[LoraAdapter]:
    """One adapter on each MLP layer, seeded deterministically."""
    return [
        lora_init(params.embed_dim, params.hidden_dim, rank, seed, target="w1"),
        lora_init(params.hidden_dim, params.out_dim, rank, seed + 1, target="w2"),
    ]


def encoder_init(
    vocab_size: int = DESK_VOCAB,
    embed_dim: int = DESK_EMBED,
    hidden_dim: int = DESK_HIDDEN,
    out_dim: int = DESK_OUT,
    seed: int = 0,
) -> EncoderParams:
    """Seeded random base encoder.

    w2 is scaled so raw outputs land near unit norm, which keeps the
    orthonormality penalty's diagonal term in a sane range at initialization.
    """
    rng = np.random.default_rng(seed)
    token_table = rng.normal(size=(vocab_size, embed_dim))
    w1 = rng.normal(scale=1.0 / np.sqrt(embed_dim), size=(embed_dim, hidden_dim))
    b1 = np.zeros(hidden_dim)
    w2 = rng.normal(
        scale=1.0 / np.sqrt(0.2 * hidden_dim * out_dim), size=(hidden_dim, out_dim)
    )
    b2 = np.zeros(out_dim)
    return EncoderParams(
        vocab_size=vocab_size,
        embed_dim=embed_dim,
        hidden_dim=hidden_dim,
        out_dim=out_dim,
        token_table=token_table,
        w1=w1,
        b1=b1,
        w2=w2,
        b2=b2,
    )


def _adapter_map(adapters: Sequence[LoraAdapter]) -> dict[str, LoraAdapter]:
    seen: dict[str, LoraAdapter] = {}
    for ad in adapters:
        if ad.target in seen:
            raise DimensionMismatch(f"duplicate adapter for target {ad.target!r}")
        seen[ad.target] = ad
    return seen


def effective_weights(
    params: EncoderParams, adapters: Sequence[LoraAdapter]
) -> tuple[np.ndarray, np.ndarray]:
    """(w1 + delta1, w2 + delta2); missing adapters contribute zero."""
    amap = _adapter_map(adapters)
    w1 = params.w1
    w2 = params.w2
    if "w1" in amap:
        ad = amap["w1"]
        if ad.b.shape[0] != params.embed_dim or ad.a.shape[1] != params.hidden_dim:
            raise DimensionMismatch("w1 adapter shape mismatch")
        w1 = w1 + ad.delta()
    if "w2" in amap:
        ad = amap["w2"]
        if ad.b.shape[0] != params.hidden_dim or ad.a.shape[1] != params.out_dim:
            raise DimensionMismatch("w2 adapter shape mismatch")
        w2 = w2 + ad.delta()
    return w1, w2


def pool_tokens(params: EncoderParams, seqs: Sequence[TokenSequence]) -> np.ndarray:
    """Mean-pooled token embeddings, one row per sequence."""
    pooled = np.empty((len(seqs), params.embed_dim))
    for i, seq in enumerate(seqs):
        ids = np.asarray(seq.ids)
        if ids.min() < 0 or ids.max() >= params.vocab_size:
            raise DimensionMismatch("token id out of range")
        pooled[i] = params.token_table[ids].mean(axis=0)
    return pooled


@dataclass
class ForwardCache:
    pooled: np.ndarray    # (S, embed_dim)
    h1: np.ndarray        # (S, hidden_dim), post-tanh
    w1_eff: np.ndarray
    w2_eff: np.ndarray


def encode_batch(
    params: EncoderParams,
    adapters: Sequence[LoraAdapter],
    seqs: Sequence[TokenSequence],
) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass over a batch of sequences; returns raw (S, out_dim) outputs."""
    w1_eff, w2_eff = effective_weights(params, adapters)
    pooled = pool_tokens(params, seqs)
    h1 = np.tanh(pooled @ w1_eff + params.b1)
    out = h1 @ w2_eff + params.b2
    return out, ForwardCache(pooled=pooled, h1=h1, w1_eff=w1_eff, w2_eff=w2_eff)


def encode(
    params: EncoderParams,
    adapters: Sequence[LoraAdapter],
    seq: TokenSequence,
) -> np.ndarray:
    """Encode one token sequence to a raw (unnormalized) d-vector."""
    out, _ = encode_batch(params, adapters, [seq])
    return out[0]


def adapter_backward(
    params: EncoderParams,
    adapters: Sequence[LoraAdapter],
    cache: ForwardCache,
    g_out: np.ndarray,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Gradients of a scalar loss w.r.t. each adapter's (a, b).

    ``g_out`` is dL/d(output), shape (S, out_dim).  Base weights receive no
    gradients by design; they are frozen.
    """
    if g_out.shape != (cache.h1.shape[0], params.out_dim):
        raise DimensionMismatch(
            f"g_out shape {g_out.shape} does not match batch ({cache.h1.shape[0]}, {params.out_dim})"
        )
    amap = _adapter_map(adapters)
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    g_w2 = cache.h1.T @ g_out                       # (hidden, out)
    if "w2" in amap:
        ad = amap["w2"]
        grads["w2"] = (ad.b.T @ g_w2, g_w2 @ ad.a.T)    # (dA, dB)

    g_h1 = g_out @ cache.w2_eff.T                   # (S, hidden)
    g_z1 = g_h1 * (1.0 - cache.h1 * cache.h1)       # tanh'
    g_w1 = cache.pooled.T @ g_z1                    # (embed, hidden)
    if "w1" in amap:
        ad = amap["w1"]
        grads["w1"] = (ad.b.T @ g_w1, g_w1 @ ad.a.T)
    return grads


def trainable_fraction(
    params: EncoderParams, adapters: Sequence[LoraAdapter]
) -> float:
    """Adapter parameters over total (base + adapter) parameters."""
    adapter_total = sum(ad.param_count() for ad in adapters)
    return adapter_total / (params.base_param_count() + adapter_total)


# -- checkpoint io -------------------------------------------------------------

CHECKPOINT_FORMAT = "protoforge-encoder"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    params: EncoderParams,
    adapters: Sequence[LoraAdapter],
    seed: int,
) -> None:
    """Write a JSON checkpoint; float64 values round-trip bit-exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "dims": {
            "vocab_size": params.vocab_size,
            "embed_dim": params.embed_dim,
            "hidden_dim": params.hidden_dim,
            "out_dim": params.out_dim,
        },
        "frozen": params.frozen,
        "token_table": params.token_table.tolist(),
        "w1": params.w1.tolist(),
        "b1": params.b1.tolist(),
        "w2": params.w2.tolist(),
        "b2": params.b2.tolist(),
        "adapters": [
            {
                "target": ad.target,
                "rank": ad.rank,
                "a": ad.a.tolist(),
                "b": ad.b.tolist(),
            }
            for ad in adapters
        ],
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(
    path: str | Path,
) -> tuple[EncoderParams, list[LoraAdapter], int]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DimensionMismatch(f"not an encoder checkpoint: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DimensionMismatch(f"unsupported checkpoint version {doc.get('version')}")
    dims = doc["dims"]
    params = EncoderParams(
        vocab_size=dims["vocab_size"],
        embed_dim=dims["embed_dim"],
        hidden_dim=dims["hidden_dim"],
        out_dim=dims["out_dim"],
        token_table=np.array(doc["token_table"], dtype=np.float64),
        w1=np.array(doc["w1"], dtype=np.float64),
        b1=np.array(doc["b1"], dtype=np.float64),
        w2=np.array(doc["w2"], dtype=np.float64),
        b2=np.array(doc["b2"], dtype=np.float64),
        frozen=doc.get("frozen", True),
    )
    adapters = [
        LoraAdapter(
            target=a["target"],
            a=np.array(a["a"], dtype=np.float64),
            b=np.array(a["b"], dtype=np.float64),
            rank=a["rank"],
        )
        for a in doc["adapters"]
    ]
    return params, adapters, doc["seed"]
