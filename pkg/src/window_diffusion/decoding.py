"""Sequence state, generation config and the confidence-driven decode rule.

Both engines commit tokens through ``select_and_commit`` so their decoding
behaviour can only differ through the logits they feed it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, ContractError, InvariantError
from .tensor import softmax_rows


@dataclass(frozen=True)
class GenerationConfig:
    total_steps: int = 64
    gen_len: int = 64
    tokens_per_step: int | None = None
    w_ex_len: int = 128
    w_in_len: int = 16
    refresh_cycle: int = 32
    adaptive_termination: bool = False
    backend: str = "toy"

    @property
    def k(self) -> int:
        if self.tokens_per_step is not None:
            return self.tokens_per_step
        return math.ceil(self.gen_len / self.total_steps)

    def validate(self, max_seq_len: int, prompt_len: int) -> None:
        if self.total_steps < 1 or self.gen_len < 1:
            raise ConfigError("total_steps and gen_len must be >= 1")
        if self.tokens_per_step is not None and self.tokens_per_step < 1:
            raise ConfigError("tokens_per_step must be >= 1")
        # w_ex_len may exceed the sequence; the window then covers every undecoded position
        if not 1 <= self.w_in_len <= self.w_ex_len:
            raise ConfigError(f"need 1 <= w_in_len ({self.w_in_len}) <= w_ex_len ({self.w_ex_len})")
        if self.refresh_cycle < 1:
            raise ConfigError("refresh_cycle must be >= 1")
        if prompt_len >= max_seq_len:
            raise ConfigError(f"prompt length {prompt_len} must be < max_seq_len {max_seq_len}")
        if prompt_len + self.gen_len > max_seq_len:
            raise ConfigError(
                f"prompt ({prompt_len}) + gen_len ({self.gen_len}) exceeds max_seq_len ({max_seq_len})"
            )
        if self.backend not in ("toy", "oracle"):
            raise ConfigError(f"unknown backend {self.backend!r}")

    @classmethod
    def from_dict(cls, d: dict) -> GenerationConfig:
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown generation config fields: {sorted(set(d) - known)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad generation config: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


class SequenceState:
    """Token buffer with per-position decode status.

    Prompt positions are decoded at step 0; diffusion steps are numbered from 1.
    """

    def __init__(self, prompt, gen_len: int, mask_token_id: int):
        prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
        self.prompt_len = prompt.size
        self.mask_token_id = mask_token_id
        n = self.prompt_len + gen_len
        self.tokens = np.full(n, mask_token_id, np.int64)
        self.tokens[: self.prompt_len] = prompt
        self.decoded = np.zeros(n, bool)
        self.decoded[: self.prompt_len] = True
        self.decoded_at = np.full(n, -1, np.int64)
        self.decoded_at[: self.prompt_len] = 0
        if np.any(prompt == mask_token_id):
            raise ConfigError("prompt contains the mask token")

    def __len__(self) -> int:
        return self.tokens.size

    def copy(self) -> SequenceState:
        new = object.__new__(SequenceState)
        new.prompt_len = self.prompt_len
        new.mask_token_id = self.mask_token_id
        new.tokens = self.tokens.copy()
        new.decoded = self.decoded.copy()
        new.decoded_at = self.decoded_at.copy()
        return new

    @property
    def n_undecoded(self) -> int:
        return int(self.tokens.size - np.count_nonzero(self.decoded))

    def undecoded_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.decoded)

    def commit(self, positions, token_ids, step: int) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if np.any(self.decoded[positions]):
            raise ContractError(f"re-decoding positions {positions[self.decoded[positions]].tolist()}")
        if np.any(token_ids == self.mask_token_id):
            raise InvariantError("attempted to commit the mask token")
        self.tokens[positions] = token_ids
        self.decoded[positions] = True
        self.decoded_at[positions] = step

    def leftmost_eos(self, eos_token_id: int) -> int | None:
        hits = np.flatnonzero(self.decoded & (self.tokens == eos_token_id))
        hits = hits[hits >= self.prompt_len]
        return int(hits[0]) if hits.size else None

    def check(self) -> None:
        if not np.all(self.decoded[: self.prompt_len]) or np.any(self.decoded_at[: self.prompt_len] != 0):
            raise InvariantError("prompt positions must be decoded at step 0")
        if np.any((self.tokens == self.mask_token_id) == self.decoded):
            raise InvariantError("mask token must appear exactly at undecoded positions")


@dataclass
class StepOutcome:
    step: int
    decoded_positions: np.ndarray
    committed_tokens: np.ndarray
    confidences: dict[int, float] = field(default_factory=dict)
    terminated: bool = False


def confidence_and_argmax(logits: np.ndarray, mask_token_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Top softmax probability and argmax token per row.

    The mask token is never a valid prediction, so its score is removed
    before the softmax.
    """
    scores = np.array(logits, copy=True)
    if scores.ndim == 1:
        scores = scores[None, :]
    if 0 <= mask_token_id < scores.shape[1]:
        scores[:, mask_token_id] = -np.inf
    probs = softmax_rows(scores)
    top = probs.argmax(axis=1)
    return probs[np.arange(top.size), top], top


def select_and_commit(
    positions,
    logits: np.ndarray,
    k: int,
    state: SequenceState,
    step: int,
) -> StepOutcome:
    """Commit the ``k`` most confident positions (ties go to the lower index)."""
    if k <= 0:
        raise ConfigError(f"tokens per step must be positive, got {k}")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return StepOutcome(step, positions, positions.copy())
    if np.any(state.decoded[positions]):
        raise ContractError("logits supplied for already-decoded positions")
    conf, tokens = confidence_and_argmax(logits, state.mask_token_id)
    order = np.lexsort((positions, -conf))[:k]
    order = order[np.argsort(positions[order])]
    chosen, chosen_tokens = positions[order], tokens[order].astype(np.int64)
    state.commit(chosen, chosen_tokens, step)
    confs = {int(p): float(c) for p, c in zip(positions, conf)}
    return StepOutcome(step, chosen, chosen_tokens, confs)


def check_termination(state: SequenceState, eos_token_id: int, adaptive_termination: bool) -> bool:
    """True once a decoded eos has no undecoded position to its left."""
    if not adaptive_termination:
        return False
    eos = state.leftmost_eos(eos_token_id)
    if eos is None:
        return False
    return bool(np.all(state.decoded[:eos]))
