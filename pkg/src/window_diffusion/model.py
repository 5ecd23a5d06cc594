"""Toy bidirectional transformer and the backend interface shared with the oracle.

Two forward paths exist on purpose.  ``forward_full`` is the plain
whole-sequence pass used by the baseline engine.  ``forward_subset`` computes
hidden states only for the positions marked ``COMPUTE`` in a context and lets
them attend to fresh K/V plus externally supplied K/V for ``CACHED`` positions.
Positions missing from the context are simply not attended to.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import CacheMissError, ConfigError, ContractError, InputError
from .tensor import DTYPE, gelu, matmul, rms_norm, softmax_rows

NORM_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 97
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 1024
    mask_token_id: int = 96
    eos_token_id: int = 95
    rng_seed: int = 0

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.max_seq_len < 1 or self.vocab_size < 2:
            raise ConfigError("n_layers, max_seq_len must be >= 1 and vocab_size >= 2")
        if self.mask_token_id == self.eos_token_id:
            raise ConfigError("mask_token_id and eos_token_id must differ")
        for name in ("mask_token_id", "eos_token_id"):
            v = getattr(self, name)
            if not 0 <= v < self.vocab_size:
                raise ConfigError(f"{name}={v} outside vocabulary of size {self.vocab_size}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        try:
            return cls(**{k: int(v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


class Source(Enum):
    COMPUTE = "compute"
    CACHED = "cached"


@dataclass(frozen=True)
class ContextEntry:
    position: int
    source: Source
    token_id: int | None = None


@dataclass
class Context:
    """Array form of a context specification (sorted, unique positions).

    ``tokens`` holds the current token at every position, including cached
    ones; backends that recompute nothing for cached rows simply ignore them.
    """

    positions: np.ndarray
    compute: np.ndarray
    tokens: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.compute = np.asarray(self.compute, dtype=bool)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.positions.size == 0:
            raise InputError("context is empty")
        if not (self.positions.shape == self.compute.shape == self.tokens.shape):
            raise InputError("context arrays have mismatched lengths")
        if np.any(np.diff(self.positions) <= 0):
            raise InputError("context positions must be unique and strictly increasing")

    @classmethod
    def from_entries(cls, entries: Sequence[ContextEntry]) -> Context:
        for e in entries:
            if e.source is Source.COMPUTE and e.token_id is None:
                raise InputError(f"compute entry at position {e.position} has no token id")
        return cls(
            positions=[e.position for e in entries],
            compute=[e.source is Source.COMPUTE for e in entries],
            tokens=[-1 if e.token_id is None else e.token_id for e in entries],
        )

    @classmethod
    def all_compute(cls, tokens) -> Context:
        tokens = np.asarray(tokens, dtype=np.int64)
        return cls(np.arange(tokens.size), np.ones(tokens.size, bool), tokens)

    @property
    def compute_positions(self) -> np.ndarray:
        return self.positions[self.compute]

    @property
    def cached_positions(self) -> np.ndarray:
        return self.positions[~self.compute]


class KvProvider(Protocol):
    def read(self, layer: int, positions: Sequence[int]) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class FullForwardResult:
    logits: np.ndarray  # (S, vocab)
    keys: np.ndarray  # (n_layers, S, d_model)
    values: np.ndarray


@dataclass
class SubsetForwardResult:
    query_positions: np.ndarray
    logits: np.ndarray  # (n_query, vocab), rows aligned with query_positions
    compute_positions: np.ndarray
    fresh_keys: np.ndarray  # (n_layers, n_compute, d_model)
    fresh_values: np.ndarray
    attended: list[np.ndarray] | None = None  # per layer, when audit requested

    def logits_map(self) -> dict[int, np.ndarray]:
        return {int(p): self.logits[i] for i, p in enumerate(self.query_positions)}

    def fresh_kv(self) -> list[dict[int, tuple[np.ndarray, np.ndarray]]]:
        return [
            {int(p): (self.fresh_keys[l, i], self.fresh_values[l, i]) for i, p in enumerate(self.compute_positions)}
            for l in range(self.fresh_keys.shape[0])
        ]


class ModelBackend(Protocol):
    """What the engines need from a model.

    ``vocab_size`` is the length of emitted score vectors.
    """

    n_layers: int
    d_model: int
    vocab_size: int
    max_seq_len: int
    mask_token_id: int
    eos_token_id: int

    def forward_full(self, tokens: Sequence[int]) -> FullForwardResult: ...

    def forward_subset(
        self,
        query_positions: Sequence[int],
        context: Context,
        cached_kv: KvProvider | None = None,
        audit: bool = False,
    ) -> SubsetForwardResult: ...


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_gain: np.ndarray
    ffn_gain: np.ndarray


@dataclass
class ModelWeights:
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    final_gain: np.ndarray
    unembed: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, lw in enumerate(self.layers):
            for f in fields(LayerWeights):
                out[f"layers.{i}.{f.name}"] = getattr(lw, f.name)
        out["final_gain"] = self.final_gain
        out["unembed"] = self.unembed
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray], config: ModelConfig) -> ModelWeights:
        layers = [
            LayerWeights(**{f.name: t[f"layers.{i}.{f.name}"] for f in fields(LayerWeights)})
            for i in range(config.n_layers)
        ]
        w = cls(t["tok_emb"], t["pos_emb"], layers, t["final_gain"], t["unembed"])
        w.check(config)
        return w

    def check(self, config: ModelConfig) -> None:
        d, v, s = config.d_model, config.vocab_size, config.max_seq_len
        expected = {"tok_emb": (v, d), "pos_emb": (s, d), "final_gain": (d,), "unembed": (d, v)}
        for i in range(config.n_layers):
            p = f"layers.{i}."
            expected.update({
                p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
                p + "w_up": (d, 4 * d), p + "w_down": (4 * d, d),
                p + "attn_gain": (d,), p + "ffn_gain": (d,),
            })
        t = self.tensors()
        if len(self.layers) != config.n_layers:
            raise InputError(f"expected {config.n_layers} layers, got {len(self.layers)}")
        for name, shape in expected.items():
            if t[name].shape != shape:
                raise InputError(f"tensor {name} has shape {t[name].shape}, expected {shape}")

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=DTYPE).tobytes())
        return h.hexdigest()


def init_weights(config: ModelConfig) -> ModelWeights:
    rng = np.random.default_rng(config.rng_seed)
    d, v = config.d_model, config.vocab_size

    def normal(*shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(DTYPE)

    tok_emb = normal(v, d)
    pos_emb = normal(config.max_seq_len, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=normal(d, d), wk=normal(d, d), wv=normal(d, d), wo=normal(d, d),
            w_up=normal(d, 4 * d), w_down=normal(4 * d, d),
            attn_gain=np.ones(d, DTYPE), ffn_gain=np.ones(d, DTYPE),
        ))
    return ModelWeights(tok_emb, pos_emb, layers, np.ones(d, DTYPE), normal(d, v))


def save_weights(path, weights: ModelWeights, config: ModelConfig) -> None:
    doc = {
        "config": config.to_dict(),
        "tensors": {name: arr.tolist() for name, arr in weights.tensors().items()},
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_weights(path) -> tuple[ModelWeights, ModelConfig]:
    try:
        doc = json.loads(Path(path).read_text())
        config = ModelConfig.from_dict(doc["config"])
        tensors = {k: np.asarray(v, dtype=DTYPE) for k, v in doc["tensors"].items()}
        return ModelWeights.from_tensors(tensors, config), config
    except (KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"malformed weights file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int) -> np.ndarray:
    """Unmasked multi-head attention of query rows over key/value rows."""
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    scale = DTYPE(1.0 / np.sqrt(qh.shape[-1]))
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    probs = softmax_rows(scores.reshape(-1, scores.shape[-1])).reshape(scores.shape)
    out = probs @ vh
    return out.transpose(1, 0, 2).reshape(q.shape[0], -1)


def _ffn(x: np.ndarray, lw: LayerWeights) -> np.ndarray:
    return matmul(gelu(matmul(rms_norm(x, lw.ffn_gain, NORM_EPS), lw.w_up)), lw.w_down)


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> None:
    if tokens.size > config.max_seq_len:
        raise InputError(f"sequence length {tokens.size} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InputError("token id outside vocabulary")


def forward_full(weights: ModelWeights, config: ModelConfig, tokens) -> FullForwardResult:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise InputError("empty sequence")
    _check_tokens(tokens, config)
    s = tokens.size
    x = weights.tok_emb[tokens] + weights.pos_emb[:s]
    keys = np.empty((config.n_layers, s, config.d_model), DTYPE)
    values = np.empty_like(keys)
    for l, lw in enumerate(weights.layers):
        xn = rms_norm(x, lw.attn_gain, NORM_EPS)
        q, k, v = matmul(xn, lw.wq), matmul(xn, lw.wk), matmul(xn, lw.wv)
        keys[l], values[l] = k, v
        x = x + matmul(_attend(q, k, v, config.n_heads), lw.wo)
        x = x + _ffn(x, lw)
    logits = matmul(rms_norm(x, weights.final_gain, NORM_EPS), weights.unembed)
    return FullForwardResult(logits, keys, values)


def forward_subset(
    weights: ModelWeights,
    config: ModelConfig,
    query_positions,
    context: Context,
    cached_kv: KvProvider | None = None,
    audit: bool = False,
) -> SubsetForwardResult:
    query = np.asarray(sorted(int(p) for p in query_positions), dtype=np.int64)
    if np.any(np.diff(query) == 0):
        raise InputError("duplicate query positions")
    comp_pos = context.compute_positions
    cached_pos = context.cached_positions
    if query.size and not np.isin(query, comp_pos).all():
        bad = query[~np.isin(query, comp_pos)]
        raise ContractError(f"query positions {bad.tolist()} are not compute positions")
    if context.positions.max() >= config.max_seq_len:
        raise InputError("context position beyond max_seq_len")
    comp_tokens = context.tokens[context.compute]
    _check_tokens(comp_tokens, config)
    if cached_pos.size and cached_kv is None:
        raise CacheMissError(0, int(cached_pos[0]))

    # row indices of compute / cached entries inside the merged key order
    comp_slot = np.flatnonzero(context.compute)
    cached_slot = np.flatnonzero(~context.compute)
    query_rows = np.searchsorted(comp_pos, query)

    n_ctx = context.positions.size
    x = weights.tok_emb[comp_tokens] + weights.pos_emb[comp_pos]
    fresh_k = np.empty((config.n_layers, comp_pos.size, config.d_model), DTYPE)
    fresh_v = np.empty_like(fresh_k)
    attended = [] if audit else None
    for l, lw in enumerate(weights.layers):
        xn = rms_norm(x, lw.attn_gain, NORM_EPS)
        q, k, v = matmul(xn, lw.wq), matmul(xn, lw.wk), matmul(xn, lw.wv)
        fresh_k[l], fresh_v[l] = k, v
        k_all = np.empty((n_ctx, config.d_model), DTYPE)
        v_all = np.empty_like(k_all)
        k_all[comp_slot], v_all[comp_slot] = k, v
        if cached_pos.size:
            ck, cv = cached_kv.read(l, cached_pos)
            k_all[cached_slot], v_all[cached_slot] = ck, cv
        if audit:
            attended.append(context.positions.copy())
        x = x + matmul(_attend(q, k_all, v_all, config.n_heads), lw.wo)
        x = x + _ffn(x, lw)
    if query.size:
        logits = matmul(rms_norm(x[query_rows], weights.final_gain, NORM_EPS), weights.unembed)
    else:
        logits = np.empty((0, config.vocab_size), DTYPE)
    return SubsetForwardResult(query, logits, comp_pos.copy(), fresh_k, fresh_v, attended)


class ToyTransformer:
    """``ModelBackend`` over a weight set."""

    def __init__(self, weights: ModelWeights, config: ModelConfig):
        weights.check(config)
        self.weights = weights
        self.config = config
        self.n_layers = config.n_layers
        self.d_model = config.d_model
        self.vocab_size = config.vocab_size
        self.max_seq_len = config.max_seq_len
        self.mask_token_id = config.mask_token_id
        self.eos_token_id = config.eos_token_id

    @classmethod
    def from_config(cls, config: ModelConfig) -> ToyTransformer:
        return cls(init_weights(config), config)

    def forward_full(self, tokens) -> FullForwardResult:
        return forward_full(self.weights, self.config, tokens)

    def forward_subset(self, query_positions, context, cached_kv=None, audit=False) -> SubsetForwardResult:
        return forward_subset(self.weights, self.config, query_positions, context, cached_kv, audit)
