"""CSV schemas, run reports and their parsers.

Every CSV written here can be read back into the same row objects;
floats are written with ``repr`` so the round trip is exact.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, TypeVar

from .errors import InputError
from .flops import FlopLedger, FlopRecord


@dataclass(frozen=True)
class Obs1Row:
    step: int
    position: int
    confidence: float | None  # None for decoded positions
    decoded: int


@dataclass(frozen=True)
class Obs2Row:
    t0: int
    W: int
    cache_mode: str
    kl_mean: float
    kl_p25: float
    kl_p75: float


@dataclass(frozen=True)
class Obs3Row:
    cohort: str
    offset: int
    mean_v_similarity: float
    n_tokens: int


@dataclass(frozen=True)
class LedgerRow:
    step: int
    attn_flops: int
    ffn_flops: int
    proj_flops: int
    total: int


@dataclass(frozen=True)
class TraceRow:
    step: int
    phase: int
    role_counts: dict
    decoded_positions: tuple
    confidences_topk: tuple  # ((position, confidence), ...) highest first
    flops: int


@dataclass(frozen=True)
class BenchRow:
    value: int
    tokens_per_s: float
    total_flops: int
    flop_ratio_vs_baseline: float
    wall_ms: float
    baseline_tokens_per_s: float
    baseline_wall_ms: float


HEADERS = {
    Obs1Row: "step,position,confidence,decoded",
    Obs2Row: "t0,W,cache_mode,kl_mean,kl_p25,kl_p75",
    Obs3Row: "cohort,offset,mean_v_similarity,n_tokens",
    LedgerRow: "step,attn_flops,ffn_flops,proj_flops,total",
    TraceRow: "step,phase,role_counts,decoded_positions,confidences_topk,flops",
    BenchRow: "value,tokens_per_s,total_flops,flop_ratio_vs_baseline,wall_ms,baseline_tokens_per_s,baseline_wall_ms",
}

R = TypeVar("R")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return ";".join(f"{k}={n}" for k, n in v.items())
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ";".join(f"{p}:{c!r}" for p, c in v)
        return ";".join(str(x) for x in v)
    return str(v)


def _parse_field(name: str, raw: str, row_type):
    if row_type is TraceRow and name == "role_counts":
        return {k: int(n) for k, n in (kv.split("=") for kv in raw.split(";") if kv)}
    if row_type is TraceRow and name == "decoded_positions":
        return tuple(int(x) for x in raw.split(";") if x)
    if row_type is TraceRow and name == "confidences_topk":
        return tuple((int(p), float(c)) for p, c in (kv.split(":") for kv in raw.split(";") if kv))
    ftype = {f.name: f.type for f in fields(row_type)}[name]
    if raw == "" and "None" in str(ftype):
        return None
    if "float" in str(ftype):
        return float(raw)
    if "int" in str(ftype):
        return int(raw)
    return raw


def write_rows(rows: Iterable, row_type, dest=None) -> str:
    """Write rows under the schema's exact header; returns the CSV text."""
    buf = io.StringIO()
    buf.write(HEADERS[row_type] + "\n")
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(row_type)]
    for r in rows:
        w.writerow([_fmt(getattr(r, n)) for n in names])
    text = buf.getvalue()
    if dest is not None:
        Path(dest).write_text(text)
    return text


def read_rows(source, row_type: type[R]) -> list[R]:
    """Parse CSV text (or a path) produced by ``write_rows``."""
    text = source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != HEADERS[row_type]:
        raise InputError(f"bad CSV header: expected {HEADERS[row_type]!r}")
    names = [f.name for f in fields(row_type)]
    out = []
    for rec in csv.reader(lines[1:]):
        if len(rec) != len(names):
            raise InputError(f"row has {len(rec)} fields, expected {len(names)}")
        out.append(row_type(**{n: _parse_field(n, raw, row_type) for n, raw in zip(names, rec)}))
    return out


def ledger_rows(ledger: FlopLedger) -> list[LedgerRow]:
    return [LedgerRow(r.step, r.attn_flops, r.ffn_flops, r.proj_flops, r.total) for r in ledger.records]


def ledger_from_rows(rows: list[LedgerRow]) -> FlopLedger:
    ledger = FlopLedger()
    for r in rows:
        rec = FlopRecord(r.step, r.attn_flops, r.ffn_flops, r.proj_flops)
        if rec.total != r.total:
            raise InputError(f"ledger row {r.step}: components do not sum to total")
        ledger.add(rec)
    return ledger


def trace_rows(traces, topk: int = 5) -> list[TraceRow]:
    rows = []
    for t in traces:
        top = sorted(t.confidences.items(), key=lambda kv: (-kv[1], kv[0]))[:topk]
        rows.append(TraceRow(
            step=t.step,
            phase=t.phase,
            role_counts=dict(t.role_counts),
            decoded_positions=tuple(int(p) for p in t.decoded_positions),
            confidences_topk=tuple((int(p), float(c)) for p, c in top),
            flops=t.flops.total,
        ))
    return rows


def run_report(config: dict, result, engine: str) -> dict:
    return {
        "config": config,
        "engine": engine,
        "final_tokens": [int(t) for t in result.tokens],
        "steps_executed": result.steps_executed,
        "terminated_early": bool(result.terminated_early),
        "flops_total": int(result.ledger.total),
        "wall_ms": float(result.wall_ms),
    }


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
