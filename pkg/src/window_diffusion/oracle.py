"""Synthetic backend with planted prefix locality.

The target token at position ``p`` is ``(a * p + b) % vocab_size`` and its
logit is ``10 * decay**d`` where ``d`` counts the undecoded positions strictly
left of ``p``; every other token scores 0.  Confidence therefore falls off
strictly with distance from the decoding frontier, and greedy frontier
decoding reproduces the closed-form transcript no matter how the context is
windowed.

Score vectors have ``vocab_size + 2`` entries: the two extra ids are the mask
and end-of-sequence tokens, so a target can never collide with either.
Logits are float64 so the decay stays strictly monotone over long distances.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import CacheMissError, ConfigError, ContractError
from .model import Context, FullForwardResult, SubsetForwardResult
from .tensor import DTYPE

TARGET_LOGIT = 10.0


@dataclass(frozen=True)
class OracleConfig:
    vocab_size: int = 97
    d_model: int = 64
    n_layers: int = 2
    decay: float = 0.9
    target_a: int = 7
    target_b: int = 3
    eos_position: int | None = None
    rng_seed: int = 0
    max_seq_len: int = 1024

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ConfigError(f"decay must lie strictly inside (0, 1), got {self.decay}")
        if self.vocab_size < 1 or self.d_model < 1 or self.n_layers < 1:
            raise ConfigError("vocab_size, d_model and n_layers must be positive")
        if self.eos_position is not None and not 0 <= self.eos_position < self.max_seq_len:
            raise ConfigError(f"eos_position {self.eos_position} outside [0, {self.max_seq_len})")

    @property
    def mask_token_id(self) -> int:
        return self.vocab_size

    @property
    def eos_token_id(self) -> int:
        return self.vocab_size + 1

    def target(self, position: int) -> int:
        if self.eos_position is not None and position == self.eos_position:
            return self.eos_token_id
        return (self.target_a * position + self.target_b) % self.vocab_size

    @classmethod
    def from_dict(cls, d: dict) -> OracleConfig:
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown oracle config fields: {sorted(set(d) - known)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad oracle config: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


def closed_form_transcript(config: OracleConfig, positions) -> list[int]:
    return [config.target(int(p)) for p in positions]


def _target_logit(decay: float, undecoded_left) -> np.ndarray:
    # one code path for scalar and batched callers so both agree bit for bit
    return TARGET_LOGIT * np.power(np.float64(decay), np.asarray(undecoded_left, dtype=np.float64))


def _scores(config: OracleConfig, position: int, undecoded_left: int) -> np.ndarray:
    out = np.zeros(config.vocab_size + 2, dtype=np.float64)
    out[config.target(position)] = _target_logit(config.decay, [undecoded_left])[0]
    return out


def oracle_logits(config: OracleConfig, state, position: int) -> np.ndarray:
    """Score vector for an undecoded position of a ``SequenceState``."""
    if state.decoded[position]:
        raise ContractError(f"position {position} is already decoded")
    d = int(np.count_nonzero(~state.decoded[:position]))
    return _scores(config, position, d)


def oracle_kv(config: OracleConfig, token_id: int, position: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
    # blake2b of the arguments seeds the generator, so vectors are stable across runs
    seed = hashlib.blake2b(
        f"{config.rng_seed}:{token_id}:{position}:{layer}".encode(), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(seed, "little"))
    kv = rng.standard_normal((2, config.d_model))
    kv /= np.linalg.norm(kv, axis=1, keepdims=True)
    return kv[0].astype(DTYPE), kv[1].astype(DTYPE)


class SyntheticOracle:
    """``ModelBackend`` whose logits ignore attention entirely.

    Undecoded positions left of a query are identified from the context as
    entries carrying the mask token.  Every scheduler in this package keeps
    those positions inside the context (they are the active set or the
    internal window's left part), so this matches ``oracle_logits`` on the
    full state.
    """

    def __init__(self, config: OracleConfig):
        self.config = config
        self.n_layers = config.n_layers
        self.d_model = config.d_model
        self.vocab_size = config.vocab_size + 2
        self.max_seq_len = config.max_seq_len
        self.mask_token_id = config.mask_token_id
        self.eos_token_id = config.eos_token_id
        self._kv_memo: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] = {}

    def _kv(self, token_id: int, position: int, layer: int):
        key = (token_id, position, layer)
        kv = self._kv_memo.get(key)
        if kv is None:
            kv = self._kv_memo[key] = oracle_kv(self.config, token_id, position, layer)
        return kv

    def _logits_for(self, positions: np.ndarray, tokens: np.ndarray, query) -> np.ndarray:
        query = np.asarray(query, dtype=np.int64)
        masked = (tokens == self.mask_token_id).astype(np.int64)
        left_counts = np.cumsum(masked) - masked
        left = left_counts[np.searchsorted(positions, query)]
        targets = [self.config.target(int(p)) for p in query]
        out = np.zeros((query.size, self.vocab_size), dtype=np.float64)
        out[np.arange(query.size), targets] = _target_logit(self.config.decay, left)
        return out

    def _fresh(self, positions, tokens):
        keys = np.empty((self.n_layers, len(positions), self.d_model), DTYPE)
        values = np.empty_like(keys)
        for l in range(self.n_layers):
            for i, (p, t) in enumerate(zip(positions, tokens)):
                keys[l, i], values[l, i] = self._kv(int(t), int(p), l)
        return keys, values

    def forward_full(self, tokens) -> FullForwardResult:
        tokens = np.asarray(tokens, dtype=np.int64)
        pos = np.arange(tokens.size)
        keys, values = self._fresh(pos, tokens)
        return FullForwardResult(self._logits_for(pos, tokens, pos), keys, values)

    def forward_subset(self, query_positions, context: Context, cached_kv=None, audit=False) -> SubsetForwardResult:
        query = np.asarray(sorted(int(p) for p in query_positions), dtype=np.int64)
        comp_pos = context.compute_positions
        if query.size and not np.isin(query, comp_pos).all():
            raise ContractError("query positions must be compute positions")
        cached_pos = context.cached_positions
        if cached_pos.size:
            if cached_kv is None:
                raise CacheMissError(0, int(cached_pos[0]))
            for l in range(self.n_layers):
                cached_kv.read(l, cached_pos)  # surfaces misses exactly like the toy model
        keys, values = self._fresh(comp_pos, context.tokens[context.compute])
        attended = [context.positions.copy() for _ in range(self.n_layers)] if audit else None
        logits = self._logits_for(context.positions, context.tokens, query)
        return SubsetForwardResult(query, logits, comp_pos.copy(), keys, values, attended)
