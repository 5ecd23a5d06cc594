"""Full-sequence reference engine and truncated-context replays."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .decoding import GenerationConfig, SequenceState, confidence_and_argmax, select_and_commit
from .errors import InputError
from .flops import FlopLedger, step_flops
from .model import Context, ModelBackend
from .scheduler import GenerationResult, StepTrace
from .tensor import softmax_rows


@dataclass
class BaselineArchive:
    """Per-step snapshots keyed by step number (1-based).

    ``states[t]`` is the sequence before step ``t`` commits; ``logits[t]`` and
    ``keys[t]``/``values[t]`` come from the forward pass run at step ``t``.
    """

    states: dict[int, SequenceState] = field(default_factory=dict)
    logits: dict[int, np.ndarray] = field(default_factory=dict)
    keys: dict[int, np.ndarray] = field(default_factory=dict)
    values: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class BaselineResult(GenerationResult):
    archive: BaselineArchive | None = None


def run_baseline(
    backend: ModelBackend,
    prompt,
    config: GenerationConfig,
    archive: bool = True,
    record_logits: bool = False,
) -> BaselineResult:
    """Recompute the whole sequence every step and decode the top-k undecoded positions."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    config.validate(backend.max_seq_len, prompt.size)
    k = config.k
    state = SequenceState(prompt, config.gen_len, backend.mask_token_id)
    s = len(state)
    ledger = FlopLedger()
    traces: list[StepTrace] = []
    arch = BaselineArchive() if archive else None
    start = time.perf_counter()

    for step in range(1, config.total_steps + 1):
        undecoded = state.undecoded_positions()
        if undecoded.size == 0:
            break
        out = backend.forward_full(state.tokens)
        if arch is not None:
            arch.states[step] = state.copy()
            arch.logits[step] = out.logits
            arch.keys[step] = out.keys
            arch.values[step] = out.values
        rec = ledger.add(step_flops(step, s, s, s, backend.d_model, backend.n_layers, backend.vocab_size))
        outcome = select_and_commit(undecoded, out.logits[undecoded], k, state, step)
        traces.append(StepTrace(
            step=step,
            phase=0,
            kind="full",
            role_counts={"prompt": state.prompt_len, "undecoded": int(undecoded.size)},
            decoded_positions=outcome.decoded_positions,
            committed_tokens=outcome.committed_tokens,
            confidences=outcome.confidences,
            flops=rec,
            logits_positions=undecoded if record_logits else None,
            logits=out.logits[undecoded] if record_logits else None,
        ))

    wall_ms = (time.perf_counter() - start) * 1e3
    return BaselineResult(state.tokens.copy(), traces, ledger, state, False, wall_ms, 0, arch)


class CacheMode(str, Enum):
    NO_CACHE = "NoCache"
    CACHE = "Cache"


class _ArchivedKv:
    def __init__(self, keys: np.ndarray, values: np.ndarray):
        self.keys = keys
        self.values = values

    def read(self, layer, positions):
        idx = np.asarray(positions, dtype=np.int64)
        return self.keys[layer, idx], self.values[layer, idx]


@dataclass
class TruncatedReference:
    t0: int
    W: int
    cache_mode: CacheMode
    active_positions: np.ndarray
    reference: np.ndarray  # (n_active, vocab) probabilities, full context, no cache
    truncated: np.ndarray


def prediction_distribution(logits: np.ndarray, mask_token_id: int) -> np.ndarray:
    scores = np.array(logits, dtype=np.float64, copy=True)
    scores = np.atleast_2d(scores)
    if 0 <= mask_token_id < scores.shape[1]:
        scores[:, mask_token_id] = -np.inf
    return softmax_rows(scores)


def run_truncated_reference(
    backend: ModelBackend,
    baseline: BaselineResult,
    t0: int,
    W: int,
    cache_mode: CacheMode | str,
    active_count: int = 16,
    cache_step: int | None = None,
) -> TruncatedReference:
    """Replay step ``t0`` keeping all decoded tokens and only the first ``W`` undecoded ones.

    In ``Cache`` mode the retained non-active undecoded positions reuse K/V
    archived at ``cache_step`` (default ``t0 - 1``).
    """
    cache_mode = CacheMode(cache_mode)
    arch = baseline.archive
    if arch is None:
        raise InputError("baseline run has no archive")
    if t0 not in arch.states or (t0 - 1) not in arch.states:
        raise InputError(f"t0={t0} outside archived steps 2..{max(arch.states, default=0)}")
    if W < active_count:
        raise InputError(f"W={W} smaller than active_count={active_count}")
    state = arch.states[t0]
    undecoded = state.undecoded_positions()
    active = undecoded[:active_count]
    retained_undecoded = undecoded[:W]
    positions = np.sort(np.concatenate([np.flatnonzero(state.decoded), retained_undecoded]))
    if cache_mode is CacheMode.NO_CACHE:
        compute = np.ones(positions.size, bool)
        provider = None
    else:
        kv_step = t0 - 1 if cache_step is None else cache_step
        compute = state.decoded[positions] | np.isin(positions, active)
        provider = _ArchivedKv(arch.keys[kv_step], arch.values[kv_step])
    ctx = Context(positions, compute, state.tokens[positions])
    res = backend.forward_subset(active, ctx, provider)
    ref = prediction_distribution(arch.logits[t0][active], backend.mask_token_id)
    trunc = prediction_distribution(res.logits, backend.mask_token_id)
    return TruncatedReference(t0, W, cache_mode, active, ref, trunc)


def confidence_map(logits: np.ndarray, positions, mask_token_id: int) -> dict[int, float]:
    conf, _ = confidence_and_argmax(logits, mask_token_id)
    return {int(p): float(c) for p, c in zip(positions, conf)}
