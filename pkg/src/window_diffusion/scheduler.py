"""Dual-window scheduling with phase-level KV reuse.

A run is a sequence of phases.  Each phase opens with a refresh step that
recomputes every decoded position plus the external window and rewrites the
cache, then continues with normal steps that recompute only the active
positions and the positions decoded inside the phase.  Everything else in the
window is read from the cache, and undecoded positions beyond the window are
left out of the forward pass altogether.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

import numpy as np

from .decoding import GenerationConfig, SequenceState, StepOutcome, check_termination, select_and_commit
from .errors import InvariantError
from .flops import FlopLedger, FlopRecord, step_flops
from .kvcache import KvCache
from .model import Context, ModelBackend, SubsetForwardResult


class Role(IntEnum):
    PROMPT = 0
    DECODED_PRE_PHASE = 1
    DECODED_IN_PHASE = 2
    ACTIVE = 3
    BUFFER = 4
    FAR_FIELD = 5


ROLE_NAMES = {
    Role.PROMPT: "prompt",
    Role.DECODED_PRE_PHASE: "decoded_pre",
    Role.DECODED_IN_PHASE: "decoded_phase",
    Role.ACTIVE: "active",
    Role.BUFFER: "buffer",
    Role.FAR_FIELD: "far_field",
}


@dataclass
class PhaseState:
    phase_index: int
    phase_start_step: int
    w_ex_positions: np.ndarray
    steps_into_phase: int = 0


@dataclass
class RolePartition:
    roles: np.ndarray  # int8 role per position
    w_ex: np.ndarray  # external window, ascending

    def of(self, role: Role) -> np.ndarray:
        return np.flatnonzero(self.roles == role)

    @property
    def prompt(self):
        return self.of(Role.PROMPT)

    @property
    def d_pre(self):
        return self.of(Role.DECODED_PRE_PHASE)

    @property
    def d_phase(self):
        return self.of(Role.DECODED_IN_PHASE)

    @property
    def active(self):
        return self.of(Role.ACTIVE)

    @property
    def w_in(self):
        return self.active

    @property
    def buffer(self):
        return self.of(Role.BUFFER)

    @property
    def far_field(self):
        return self.of(Role.FAR_FIELD)

    def role_counts(self) -> dict[str, int]:
        counts = np.bincount(self.roles, minlength=len(Role))
        return {ROLE_NAMES[r]: int(counts[r]) for r in Role}

    def check(self, state: SequenceState) -> None:
        """Assert every structural property of a partition."""
        s = len(state)
        if self.roles.shape != (s,) or self.roles.min() < 0 or self.roles.max() >= len(Role):
            raise InvariantError("roles do not label every position exactly once")
        active, buffer, d_phase = self.active, self.buffer, self.d_phase
        w_ex = set(self.w_ex.tolist())
        if not set(active.tolist()) <= w_ex or not set(buffer.tolist()) <= w_ex:
            raise InvariantError("active and buffer positions must lie in the external window")
        expected_buffer = w_ex - set(active.tolist()) - set(d_phase.tolist())
        if set(buffer.tolist()) != expected_buffer:
            raise InvariantError("buffer set differs from W_ex minus (active and in-phase decoded)")
        if np.any(state.decoded[active]) or np.any(state.decoded[buffer]) or np.any(state.decoded[self.far_field]):
            raise InvariantError("active, buffer and far-field positions must be undecoded")
        if not np.all(state.decoded[self.prompt]) or not np.all(state.decoded[self.d_pre]) or not np.all(state.decoded[d_phase]):
            raise InvariantError("decoded roles must hold decoded positions")
        if not np.array_equal(self.prompt, np.arange(state.prompt_len)):
            raise InvariantError("prompt role must be exactly [0, prompt_len)")
        ff = self.far_field
        if ff.size and self.w_ex.size and ff.min() < self.w_ex.max():
            raise InvariantError("far-field positions must all lie right of the external window")


def compute_external_window(state: SequenceState, w_ex_len: int, limit: int | None = None) -> np.ndarray:
    """First ``w_ex_len`` undecoded positions (empty when nothing is left).

    ``limit`` excludes positions at or beyond it (used after an eos commit).
    """
    undecoded = state.undecoded_positions()
    if limit is not None:
        undecoded = undecoded[undecoded < limit]
    return undecoded[:w_ex_len]


def partition_roles(
    state: SequenceState,
    phase: PhaseState,
    w_in_len: int,
    phase_decoded=(),
    limit: int | None = None,
) -> RolePartition:
    w_ex = np.asarray(phase.w_ex_positions, dtype=np.int64)
    phase_decoded = np.asarray(sorted(int(p) for p in phase_decoded), dtype=np.int64)
    s = len(state)
    in_wex = np.zeros(s, bool)
    in_wex[w_ex] = True
    if phase_decoded.size:
        if not np.all(in_wex[phase_decoded]) or not np.all(state.decoded[phase_decoded]):
            raise InvariantError("in-phase decoded positions must be decoded members of W_ex")
        if np.any(state.decoded_at[phase_decoded] < phase.phase_start_step):
            raise InvariantError("in-phase decoded position stamped before the phase started")
    decoded_in_wex = np.flatnonzero(in_wex & state.decoded)
    if not np.array_equal(decoded_in_wex, phase_decoded):
        raise InvariantError("decode stamps inside W_ex disagree with the in-phase decoded set")

    roles = np.full(s, Role.FAR_FIELD, np.int8)
    roles[state.decoded] = Role.DECODED_PRE_PHASE
    roles[: state.prompt_len] = Role.PROMPT
    roles[phase_decoded] = Role.DECODED_IN_PHASE
    candidates = w_ex[~state.decoded[w_ex]]
    if limit is not None:
        candidates_active = candidates[candidates < limit]
    else:
        candidates_active = candidates
    roles[candidates] = Role.BUFFER
    roles[candidates_active[:w_in_len]] = Role.ACTIVE
    return RolePartition(roles, w_ex)


def advance_internal_window(
    partition: RolePartition,
    state: SequenceState,
    w_in_len: int,
    phase: PhaseState,
    limit: int | None = None,
) -> RolePartition:
    """Move just-decoded active positions into the in-phase set and refill from the buffer."""
    w_ex = partition.w_ex
    phase_decoded = w_ex[state.decoded[w_ex]]
    return partition_roles(state, phase, w_in_len, phase_decoded, limit)


def _context(state: SequenceState, partition: RolePartition, compute_roles) -> Context:
    roles = partition.roles
    in_ctx = roles != Role.FAR_FIELD
    positions = np.flatnonzero(in_ctx)
    compute = np.isin(roles[positions], list(compute_roles))
    return Context(positions, compute, state.tokens[positions])


def refresh_step(
    state: SequenceState,
    phase: PhaseState,
    partition: RolePartition,
    backend: ModelBackend,
    cache: KvCache,
    step: int,
    audit: bool = False,
) -> tuple[SubsetForwardResult, FlopRecord]:
    """Recompute decoded context plus W_ex, rewrite the cache, return active logits."""
    if partition.d_phase.size:
        raise InvariantError("refresh step must open a phase")
    ctx = _context(state, partition, [r for r in Role if r is not Role.FAR_FIELD])
    res = backend.forward_subset(partition.active, ctx, None, audit)
    cache.invalidate_except(ctx.positions)
    cache.refresh_from_forward(res.compute_positions, res.fresh_keys, res.fresh_values, step)
    n = ctx.positions.size
    rec = step_flops(step, n, n, res.query_positions.size, backend.d_model, backend.n_layers, backend.vocab_size)
    return res, rec


def normal_step(
    state: SequenceState,
    phase: PhaseState,
    partition: RolePartition,
    backend: ModelBackend,
    cache: KvCache,
    step: int,
    audit: bool = False,
) -> tuple[SubsetForwardResult, FlopRecord]:
    """Recompute active and in-phase decoded positions; read the rest from the cache.

    The cache is not written.
    """
    ctx = _context(state, partition, (Role.ACTIVE, Role.DECODED_IN_PHASE))
    res = backend.forward_subset(partition.active, ctx, cache, audit)
    rec = step_flops(
        step,
        int(np.count_nonzero(ctx.compute)),
        ctx.positions.size,
        res.query_positions.size,
        backend.d_model,
        backend.n_layers,
        backend.vocab_size,
    )
    return res, rec


@dataclass
class StepTrace:
    step: int
    phase: int
    kind: str  # "refresh" | "normal"
    role_counts: dict[str, int]
    decoded_positions: np.ndarray
    committed_tokens: np.ndarray
    confidences: dict[int, float]
    flops: FlopRecord
    cache_digest: int | None = None
    roles: np.ndarray | None = None
    attended: list[np.ndarray] | None = None
    logits_positions: np.ndarray | None = None
    logits: np.ndarray | None = None


@dataclass
class GenerationResult:
    tokens: np.ndarray
    traces: list[StepTrace]
    ledger: FlopLedger
    state: SequenceState
    terminated_early: bool
    wall_ms: float
    n_phases: int = 0

    @property
    def steps_executed(self) -> int:
        return len(self.traces)

    @property
    def n_decoded(self) -> int:
        return int(sum(t.decoded_positions.size for t in self.traces))

    def generated_tokens(self) -> np.ndarray:
        return self.tokens[self.state.prompt_len:]


RefreshHook = Callable[[KvCache, int, SequenceState], None]


@dataclass
class RunOptions:
    audit: bool = False  # record roles and attended key sets per step
    record_logits: bool = False
    record_digests: bool = False
    check_partitions: bool = False
    refresh_hooks: list[RefreshHook] = field(default_factory=list)


def run_generation(
    backend: ModelBackend,
    prompt,
    config: GenerationConfig,
    options: RunOptions | None = None,
) -> GenerationResult:
    opts = options or RunOptions()
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    config.validate(backend.max_seq_len, prompt.size)
    k = config.k
    state = SequenceState(prompt, config.gen_len, backend.mask_token_id)
    cache = KvCache(backend.n_layers, len(state), backend.d_model)
    ledger = FlopLedger()
    traces: list[StepTrace] = []
    phase: PhaseState | None = None
    partition: RolePartition | None = None
    n_phases = 0
    terminated = False
    start = time.perf_counter()

    step = 0
    while step < config.total_steps:
        limit = state.leftmost_eos(backend.eos_token_id) if config.adaptive_termination else None
        start_phase = (
            phase is None
            or phase.steps_into_phase >= config.refresh_cycle
            or partition.active.size == 0  # window exhausted: end the phase early
        )
        if start_phase:
            w_ex = compute_external_window(state, config.w_ex_len, limit)
            if w_ex.size == 0:
                break
            phase = PhaseState(n_phases, step + 1, w_ex)
            n_phases += 1
            partition = partition_roles(state, phase, config.w_in_len, (), limit)
        step += 1
        if opts.check_partitions:
            partition.check(state)

        if start_phase:
            res, rec = refresh_step(state, phase, partition, backend, cache, step, opts.audit)
            for hook in opts.refresh_hooks:
                hook(cache, step, state)
        else:
            res, rec = normal_step(state, phase, partition, backend, cache, step, opts.audit)
        ledger.add(rec)
        outcome: StepOutcome = select_and_commit(res.query_positions, res.logits, k, state, step)
        phase.steps_into_phase += 1
        terminated = check_termination(state, backend.eos_token_id, config.adaptive_termination)
        outcome.terminated = terminated

        traces.append(StepTrace(
            step=step,
            phase=phase.phase_index,
            kind="refresh" if start_phase else "normal",
            role_counts=partition.role_counts(),
            decoded_positions=outcome.decoded_positions,
            committed_tokens=outcome.committed_tokens,
            confidences=outcome.confidences,
            flops=rec,
            cache_digest=cache.snapshot_digest() if opts.record_digests else None,
            roles=partition.roles.copy() if opts.audit else None,
            attended=res.attended,
            logits_positions=res.query_positions if opts.record_logits else None,
            logits=res.logits if opts.record_logits else None,
        ))
        if terminated:
            break
        limit = state.leftmost_eos(backend.eos_token_id) if config.adaptive_termination else None
        partition = advance_internal_window(partition, state, config.w_in_len, phase, limit)

    wall_ms = (time.perf_counter() - start) * 1e3
    return GenerationResult(state.tokens.copy(), traces, ledger, state, terminated, wall_ms, n_phases)


def far_field_violations(traces: list[StepTrace]) -> int:
    """Count attended key positions that were far-field at their step (needs ``audit``)."""
    bad = 0
    for t in traces:
        if t.roles is None or t.attended is None:
            raise ValueError("traces were recorded without audit")
        far = t.roles == Role.FAR_FIELD
        for keys in t.attended:
            bad += int(np.count_nonzero(far[keys]))
    return bad
