"""Command line entry point (``wdiff``).

Exit codes: 0 success, 2 usage or configuration error, 3 invariant or
equivalence failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baseline import run_baseline
from .config import RunConfig, load_config
from .errors import ConfigError, InputError, InvariantError, WindowDiffusionError
from .harness import obs2_metadata, run_obs1, run_obs2, run_obs3
from .metrics import max_relative_deviation
from .model import ModelConfig, ToyTransformer, init_weights, save_weights
from .reporting import (
    BenchRow,
    LedgerRow,
    Obs1Row,
    Obs2Row,
    Obs3Row,
    TraceRow,
    ledger_rows,
    run_report,
    trace_rows,
    write_json,
    write_rows,
)
from .scheduler import RunOptions, run_generation

log = logging.getLogger("window_diffusion")

EQUIVALENCE_TOL = 1e-5


class UsageError(Exception):
    pass


def _ints(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc
    return vals


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    gen = {}
    for flag, name in (
        ("steps", "total_steps"),
        ("gen_len", "gen_len"),
        ("k", "tokens_per_step"),
        ("w_ex", "w_ex_len"),
        ("w_in", "w_in_len"),
        ("refresh", "refresh_cycle"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            gen[name] = v
    if getattr(args, "adaptive", None) is not None:
        gen["adaptive_termination"] = args.adaptive
    if gen:
        cfg.generation = replace(cfg.generation, **gen)
    if getattr(args, "seed", None) is not None:
        cfg.model = replace(cfg.model, rng_seed=args.seed)
        cfg.oracle = replace(cfg.oracle, rng_seed=args.seed)
    if getattr(args, "prompt", None) is not None:
        cfg.prompt = _ints(args.prompt)
    return cfg


def _load(args) -> RunConfig:
    return _apply_overrides(load_config(args.config), args)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_make_weights(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model config {args.config}: {exc}") from exc
    model_doc = doc.get("model", doc) if isinstance(doc, dict) else None
    if not isinstance(model_doc, dict):
        raise ConfigError("model config must be a JSON object")
    if "rng_seed" not in model_doc:
        raise ConfigError("model config is missing rng_seed")
    config = ModelConfig.from_dict(model_doc)
    weights = init_weights(config)
    save_weights(args.out, weights, config)
    print(f"wrote {args.out} (sha256 {weights.digest()[:16]})")
    return 0


def cmd_generate(args) -> int:
    cfg = _load(args)
    backend = cfg.build_backend()
    gen = cfg.generation
    if args.engine == "baseline":
        result = run_baseline(backend, cfg.prompt, gen, archive=False)
        cache_dump = None
    else:
        dumped = {}
        opts = RunOptions()
        if args.dump_cache:
            opts.refresh_hooks.append(lambda cache, step, state: dumped.__setitem__("cache", cache))
        result = run_generation(backend, cfg.prompt, gen, opts)
        cache_dump = dumped.get("cache")
    report = run_report(cfg.to_dict(), result, args.engine)
    write_json(args.out, report)
    trace_path = args.trace or str(Path(args.out).with_suffix(".trace.csv"))
    write_rows(trace_rows(result.traces), TraceRow, trace_path)
    if args.ledger:
        write_rows(ledger_rows(result.ledger), LedgerRow, args.ledger)
    if cache_dump is not None:
        Path(args.dump_cache).write_text(cache_dump.dump_json())
    secs = max(result.wall_ms / 1e3, 1e-9)
    print(f"engine={args.engine} steps={result.steps_executed} tokens/s={result.n_decoded / secs:.1f} "
          f"flops={result.ledger.total} terminated_early={result.terminated_early}")
    return 0


def compare_seed(cfg: RunConfig, seed: int, inject_cache_fault: bool = False) -> dict:
    """Baseline vs the degenerate window config (every step a full refresh)."""
    model = replace(cfg.model, rng_seed=seed)
    backend = ToyTransformer(init_weights(model), model)
    gen = cfg.generation
    degenerate = replace(gen, w_ex_len=gen.gen_len, w_in_len=gen.gen_len, refresh_cycle=1)
    base = run_baseline(backend, cfg.prompt, degenerate, archive=True, record_logits=True)

    cache_devs = []

    def corrupt(cache, step, state):
        cache.values[:, cache.valid[0]] += 1.0

    def check_cache(cache, step, state):
        if step not in base.archive.keys:
            return
        pos = cache.valid_positions(0)
        dk = max_relative_deviation(cache.keys[:, pos], base.archive.keys[step][:, pos])
        dv = max_relative_deviation(cache.values[:, pos], base.archive.values[step][:, pos])
        cache_devs.append(max(dk, dv))

    hooks = ([corrupt] if inject_cache_fault else []) + [check_cache]
    win = run_generation(backend, cfg.prompt, degenerate, RunOptions(record_logits=True, refresh_hooks=hooks))

    per_step = []
    for tb, tw in zip(base.traces, win.traces):
        if not np.array_equal(tb.logits_positions, tw.logits_positions):
            per_step.append(math.inf)
            continue
        per_step.append(max_relative_deviation(tw.logits, tb.logits))
    same = bool(np.array_equal(base.tokens, win.tokens)) and base.steps_executed == win.steps_executed
    max_dev = max(per_step, default=0.0)
    max_cache = max(cache_devs, default=0.0)
    return {
        "seed": seed,
        "transcripts_equal": same,
        "max_rel_logit_deviation": max_dev,
        "max_rel_cache_deviation": max_cache,
        "per_step_deviation": per_step,
        "passed": same and max_dev <= EQUIVALENCE_TOL and max_cache <= EQUIVALENCE_TOL,
    }


def cmd_compare(args) -> int:
    cfg = _load(args)
    if cfg.backend != "toy":
        raise ConfigError("compare needs the toy transformer backend")
    cfg.generation.validate(cfg.model.max_seq_len, len(cfg.prompt))
    seeds = _ints(args.seeds) if args.seeds else [cfg.model.rng_seed]
    results = [compare_seed(cfg, s, args.inject_cache_fault) for s in seeds]
    doc = {
        "config": cfg.to_dict(),
        "tolerance": EQUIVALENCE_TOL,
        "transcripts_equal": all(r["transcripts_equal"] for r in results),
        "passed": all(r["passed"] for r in results),
        "seeds": results,
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    for r in results:
        print(f"seed={r['seed']} transcripts_equal={r['transcripts_equal']} "
              f"max_rel_logit_dev={r['max_rel_logit_deviation']:.3e} "
              f"max_rel_cache_dev={r['max_rel_cache_deviation']:.3e}")
    return 0 if doc["passed"] else 3


def _tokens_per_s(result) -> float:
    return result.n_decoded / max(result.wall_ms / 1e3, 1e-9)


def bench_rows(cfg: RunConfig, axis: str, values: list[int], jobs: int = 1) -> list[BenchRow]:
    backend = cfg.build_backend()
    gen = cfg.generation
    k = gen.k
    configs = []
    for v in values:
        if axis == "w_ex":
            configs.append(replace(gen, w_ex_len=v, w_in_len=min(gen.w_in_len, v)))
        elif axis == "refresh":
            configs.append(replace(gen, refresh_cycle=v))
        elif axis == "gen_len":
            configs.append(replace(gen, gen_len=v, tokens_per_step=k, total_steps=math.ceil(v / k)))
        else:
            raise UsageError(f"unknown sweep axis {axis!r}")
    for c in configs:
        c.validate(backend.max_seq_len, len(cfg.prompt))

    baselines = {}
    if axis == "gen_len":
        for c in configs:
            baselines[c.gen_len] = run_baseline(backend, cfg.prompt, c, archive=False)
    else:
        shared = run_baseline(backend, cfg.prompt, gen, archive=False)
        baselines = {c.gen_len: shared for c in configs}

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda c: run_generation(backend, cfg.prompt, c), configs))

    rows = []
    for v, c, res in zip(values, configs, results):
        base = baselines[c.gen_len]
        rows.append(BenchRow(
            value=v,
            tokens_per_s=_tokens_per_s(res),
            total_flops=res.ledger.total,
            flop_ratio_vs_baseline=res.ledger.total / base.ledger.total,
            wall_ms=res.wall_ms,
            baseline_tokens_per_s=_tokens_per_s(base),
            baseline_wall_ms=base.wall_ms,
        ))
    return rows


def cmd_bench(args) -> int:
    cfg = _load(args)
    values = _ints(args.values)
    if not values:
        raise UsageError("--values must list at least one value")
    rows = bench_rows(cfg, args.sweep, values, args.jobs)
    text = write_rows(rows, BenchRow, args.out)
    if not args.out:
        sys.stdout.write(text)
    return 0


def cmd_obs(args) -> int:
    cfg = _load(args)
    obs = dict(cfg.obs)
    backend = cfg.build_backend()
    base = run_baseline(backend, cfg.prompt, cfg.generation, archive=True)
    meta = {"config": cfg.to_dict(), "which": args.which}
    if args.which == 1:
        steps = _ints(args.obs_steps) if args.obs_steps else obs.get("steps")
        rows = run_obs1(backend, base, steps)
        text = write_rows(rows, Obs1Row, args.out)
    elif args.which == 2:
        t0 = args.t0 if args.t0 is not None else obs.get("t0", max(2, base.steps_executed // 2))
        W = _ints(args.W) if args.W else obs.get("W", [8, 16, 32, 64])
        active = args.active_count if args.active_count is not None else obs.get("active_count", 16)
        records = run_obs2(backend, base, t0, W, active)
        text = write_rows([r.row() for r in records], Obs2Row, args.out)
        meta.update(obs2_metadata())
    else:
        tracked = _ints(args.tracked) if args.tracked else obs.get("tracked")
        if tracked is None:
            lo = len(cfg.prompt) + cfg.generation.gen_len // 4
            tracked = list(range(lo, lo + 8))
        t0 = args.t0 if args.t0 is not None else obs.get("t0", max(2, base.steps_executed // 4))
        horizon = args.horizon if args.horizon is not None else obs.get("horizon", 16)
        layer = args.layer if args.layer is not None else obs.get("layer", -1)
        records = run_obs3(backend, base, tracked, t0, horizon, layer=layer)
        text = write_rows([r.row() for r in records], Obs3Row, args.out)
    if args.out:
        Path(str(args.out) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="total diffusion steps")
    p.add_argument("--gen-len", type=int)
    p.add_argument("--k", type=int, help="tokens committed per step")
    p.add_argument("--w-ex", type=int, help="external window length")
    p.add_argument("--w-in", type=int, help="internal window length")
    p.add_argument("--refresh", type=int, help="refresh cycle (phase length in steps)")
    p.add_argument("--adaptive", dest="adaptive", action="store_true", default=None)
    p.add_argument("--no-adaptive", dest="adaptive", action="store_false")
    p.add_argument("--seed", type=int)
    p.add_argument("--prompt", help="comma-separated prompt token ids")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-weights", help="write a seeded toy-transformer weights file")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_weights)

    p = sub.add_parser("generate", help="run one generation and write a report")
    p.add_argument("config")
    p.add_argument("--engine", choices=["window", "baseline"], default="window")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--trace", help="step-trace CSV path (default: <out>.trace.csv)")
    p.add_argument("--ledger", help="FLOP ledger CSV path")
    p.add_argument("--dump-cache", help="write the final KV cache state as JSON")
    _add_overrides(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("compare", help="baseline vs degenerate window equivalence check")
    p.add_argument("config")
    p.add_argument("--seeds", help="comma-separated model seeds")
    p.add_argument("--out")
    p.add_argument("--inject-cache-fault", action="store_true", help=argparse.SUPPRESS)
    _add_overrides(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="sweep one scheduler parameter")
    p.add_argument("config")
    p.add_argument("--sweep", choices=["w_ex", "refresh", "gen_len"], required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    _add_overrides(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("obs", help="token-level analysis harnesses")
    p.add_argument("config")
    p.add_argument("--which", type=int, choices=[1, 2, 3], required=True)
    p.add_argument("--out")
    p.add_argument("--obs-steps", help="obs1: comma-separated steps to report")
    p.add_argument("--t0", type=int)
    p.add_argument("--W", help="obs2: comma-separated truncation lengths")
    p.add_argument("--active-count", type=int)
    p.add_argument("--tracked", help="obs3: comma-separated positions")
    p.add_argument("--horizon", type=int)
    p.add_argument("--layer", type=int)
    _add_overrides(p)
    p.set_defaults(func=cmd_obs)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("WD_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, InputError) as exc:
        print(f"wdiff: error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"wdiff: invariant failure: {exc}", file=sys.stderr)
        return 3
    except WindowDiffusionError as exc:
        log.debug("unhandled", exc_info=True)
        print(f"wdiff: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
