"""Token-level analysis harnesses driven by archived baseline runs.

obs1: confidence of every undecoded position at chosen steps.
obs2: KL between full-context predictions and truncated-context predictions
      of the leading undecoded positions, with and without reused K/V.
obs3: adjacent-step cosine similarity of decoded tokens' value vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baseline import BaselineResult, CacheMode, run_truncated_reference
from .decoding import confidence_and_argmax
from .errors import InputError
from .metrics import Q_FLOOR, kl_divergence, summarize
from .model import ModelBackend
from .reporting import Obs1Row, Obs2Row, Obs3Row
from .tensor import cosine_similarity

KL_DIRECTION = "KL(reference || truncated)"

RECENT = "RecentlyDecoded"
EARLIER = "EarlierDecoded"


def _archive(baseline: BaselineResult):
    if baseline.archive is None:
        raise InputError("harnesses need a baseline run with archive=True")
    return baseline.archive


def run_obs1(backend: ModelBackend, baseline: BaselineResult, steps=None) -> list[Obs1Row]:
    """One row per position per requested step; decoded positions carry no confidence."""
    arch = _archive(baseline)
    n_steps = baseline.steps_executed
    if steps is None:
        steps = sorted({max(1, round(n_steps * f)) for f in (0.25, 0.5, 0.75)})
    rows = []
    for t in steps:
        if not 1 <= t <= n_steps:
            raise InputError(f"step {t} outside the run (1..{n_steps})")
        state = arch.states[t]
        undecoded = state.undecoded_positions()
        conf = np.zeros(len(state))
        if undecoded.size:
            conf[undecoded], _ = confidence_and_argmax(arch.logits[t][undecoded], backend.mask_token_id)
        for p in range(len(state)):
            if state.decoded[p]:
                rows.append(Obs1Row(t, p, None, 1))
            else:
                rows.append(Obs1Row(t, p, float(conf[p]), 0))
    return rows


@dataclass
class KlRecord:
    t0: int
    W: int
    cache_mode: str
    kl_values: list[float]
    mean: float
    p25: float
    p75: float

    def row(self) -> Obs2Row:
        return Obs2Row(self.t0, self.W, self.cache_mode, self.mean, self.p25, self.p75)


def run_obs2(
    backend: ModelBackend,
    baseline: BaselineResult,
    t0: int,
    W_sweep,
    active_count: int = 16,
) -> list[KlRecord]:
    W_sweep = [int(w) for w in W_sweep]
    if W_sweep != sorted(W_sweep):
        raise InputError("W sweep must be sorted ascending")
    records = []
    for W in W_sweep:
        for mode in (CacheMode.NO_CACHE, CacheMode.CACHE):
            tr = run_truncated_reference(backend, baseline, t0, W, mode, active_count)
            kls = [kl_divergence(p, q) for p, q in zip(tr.reference, tr.truncated)]
            s = summarize(kls)
            records.append(KlRecord(t0, W, mode.value, kls, s["mean"], s["p25"], s["p75"]))
    return records


def obs2_metadata() -> dict:
    return {"kl_direction": KL_DIRECTION, "q_floor": Q_FLOOR, "q_renormalized": True, "mask_token_excluded": True}


@dataclass
class SimRecord:
    cohort: str
    offset: int
    mean_v_similarity: float
    n_tokens: int

    def row(self) -> Obs3Row:
        return Obs3Row(self.cohort, self.offset, self.mean_v_similarity, self.n_tokens)


def _cohort_similarity(arch, layer: int, origins: dict[int, int], horizon: int, cohort: str) -> list[SimRecord]:
    """Offset 0 compares the origin step with itself; offset k compares steps o+k-1 and o+k."""
    out = []
    for k in range(horizon):
        sims = []
        for pos, origin in origins.items():
            a, b = origin + max(k - 1, 0), origin + k
            if a not in arch.values or b not in arch.values:
                continue
            sims.append(cosine_similarity(arch.values[a][layer, pos], arch.values[b][layer, pos]))
        if sims:
            out.append(SimRecord(cohort, k, float(np.mean(sims)), len(sims)))
    return out


def run_obs3(
    backend: ModelBackend,
    baseline: BaselineResult,
    tracked_positions,
    t0: int,
    horizon: int,
    cohort_size: int = 16,
    layer: int = -1,
) -> list[SimRecord]:
    """Value-vector stability for just-decoded and long-decoded tokens.

    A recently decoded token's origin is the first step whose forward pass sees
    it decoded (its commit step + 1).  Tracked positions that never decode in
    the run are skipped.
    """
    arch = _archive(baseline)
    layer = layer % backend.n_layers
    if t0 not in arch.states:
        raise InputError(f"t0={t0} outside the archived run")
    final = baseline.state
    recent = {}
    for p in tracked_positions:
        p = int(p)
        if 0 <= p < len(final) and final.decoded[p] and final.decoded_at[p] >= 1:
            recent[p] = int(final.decoded_at[p]) + 1
    state = arch.states[t0]
    earlier_pos = np.flatnonzero(state.decoded)
    earlier_pos = earlier_pos[earlier_pos >= state.prompt_len][:cohort_size]
    earlier = {int(p): t0 for p in earlier_pos}
    return (
        _cohort_similarity(arch, layer, recent, horizon, RECENT)
        + _cohort_similarity(arch, layer, earlier, horizon, EARLIER)
    )
