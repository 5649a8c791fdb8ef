"""Command line front end: run / sweep / check / replay.

`run` executes one experiment from a JSON config (flags override fields) and
writes history + summary artifacts; `sweep` repeats a run across parameter
values; `check` re-runs the checkers on a saved history; `replay` re-executes
a saved run and verifies the outputs are bit-identical.  Any checker failure
exits nonzero with the counterexample.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import checker as chk
from .experiment import (ExperimentConfig, load_history, record_to_json, run,
                         sweep, write_outputs)

OUT_ENV = "GEOTXN_OUT_DIR"


def _load_config(path, overrides) -> ExperimentConfig:
    data = {}
    if path:
        data = json.loads(Path(path).read_text())
    cfg = ExperimentConfig.from_dict(data)
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    clean = {}
    for name, value in overrides.items():
        if value is None or name not in fields:
            continue
        clean[name] = value
    if clean:
        cfg = dataclasses.replace(cfg, **clean)
    if cfg.output_dir is None and os.environ.get(OUT_ENV):
        cfg = dataclasses.replace(cfg, output_dir=os.environ[OUT_ENV])
    return cfg


def _add_common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--f", type=int, dest="f")
    p.add_argument("--shards", type=int, dest="n_shards")
    p.add_argument("--mode", choices=["auto", "preventive", "detective"])
    p.add_argument("--leader-layout", dest="leader_layout",
                   choices=["colocated", "rotated"])
    p.add_argument("--owd-ms", type=float, dest="owd_ms")
    p.add_argument("--jitter-mean-ms", type=float, dest="jitter_mean_ms")
    p.add_argument("--drop", type=float, dest="drop_probability")
    p.add_argument("--clock-error-ms", type=float, dest="clock_error_ms")
    p.add_argument("--delta-ms", type=float, dest="delta_ms")
    p.add_argument("--headroom-delta-ms", type=float, dest="headroom_delta_ms")
    p.add_argument("--hash-mode", dest="hash_mode",
                   choices=["whole-log", "per-key"])
    p.add_argument("--skew", type=float)
    p.add_argument("--rate", type=float, dest="rate_per_coord")
    p.add_argument("--duration-ms", type=float, dest="duration_ms")
    p.add_argument("--read-fraction", type=float, dest="read_fraction")
    p.add_argument("--no-checker", dest="checker", action="store_false",
                   default=None)


def _print_result(value, result):
    s = result.stats
    tag = f"[{value}] " if value is not None else ""
    print(f"{tag}committed={s.committed} thpt={s.throughput:.1f}/s "
          f"p50={s.p50_ms:.1f}ms p90={s.p90_ms:.1f}ms "
          f"fast={s.fast_fraction:.2%} rollbacks={s.rollbacks} "
          f"retries={s.retries} undrained={s.undrained}")
    for name, verdict in result.verdicts.items():
        mark = "ok" if verdict.ok else f"FAIL {verdict.kind} {verdict.witness}"
        print(f"  {name}: {mark}")
        if not verdict.ok:
            print(f"    {verdict.detail}")


def cmd_run(args) -> int:
    cfg = _load_config(args.config, vars(args))
    result = run(cfg)
    _print_result(None, result)
    return 0 if result.ok else 1


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config, vars(args))
    values = [json.loads(v) for v in args.values.split(",")]
    rows = sweep(args.param, values, cfg)
    bad = False
    for value, result in rows:
        _print_result(value, result)
        bad = bad or not result.ok
    return 1 if bad else 0


def cmd_check(args) -> int:
    history = load_history(Path(args.history))
    shard_logs = None
    stores = None
    n_shards = args.shards or 1
    run_dir = Path(args.history).parent
    logs_path = run_dir / "shard_logs.json"
    if logs_path.exists():
        raw = json.loads(logs_path.read_text())
        from .types import TxnId
        shard_logs = {int(s): [(TxnId(c, q), t) for c, q, t in order]
                      for s, order in raw.items()}
        n_shards = max(n_shards, len(shard_logs))
    stores_path = run_dir / "final_stores.json"
    if stores_path.exists():
        raw = json.loads(stores_path.read_text())
        stores = {int(s): {int(k): v for k, v in kv.items()}
                  for s, kv in raw.items()}
    verdict = chk.check_strict_serializability(history, shard_logs, stores,
                                               n_shards)
    lin = chk.linearizability_per_shard(history, n_shards, stores)
    for name, v in (("strict-serializability", verdict),
                    ("linearizability", lin)):
        print(f"{name}: {'ok' if v.ok else f'FAIL {v.kind} {v.witness}'}")
        if not v.ok:
            print(f"  {v.detail}")
    return 0 if verdict.ok and lin.ok else 1


def cmd_replay(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = ExperimentConfig.from_dict(
        json.loads((run_dir / "config.json").read_text()))
    cfg = dataclasses.replace(cfg, output_dir=None)
    result = run(cfg)
    saved_history = (run_dir / "history.jsonl").read_text()
    fresh_lines = [json.dumps(record_to_json(r), sort_keys=True)
                   for r in sorted(result.history,
                                   key=lambda r: (r.commit_us, r.t))]
    fresh_history = "".join(line + "\n" for line in fresh_lines)
    saved_summary = json.loads((run_dir / "summary.json").read_text())
    if fresh_history != saved_history:
        print("replay mismatch: history differs")
        return 1
    if saved_summary["stats"] != result.stats.to_dict():
        print("replay mismatch: stats differ")
        return 1
    print("replay ok: history and stats are identical")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="geotxn",
        description="simulate the future-timestamp transaction protocol")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment")
    _add_common_flags(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run across parameter values")
    _add_common_flags(p_sweep)
    p_sweep.add_argument("--param", required=True,
                         help="config field to vary (e.g. headroom_delta_ms)")
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated JSON values")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_check = sub.add_parser("check", help="re-check a saved history")
    p_check.add_argument("--history", required=True, help="history.jsonl path")
    p_check.add_argument("--shards", type=int)
    p_check.set_defaults(fn=cmd_check)

    p_replay = sub.add_parser("replay",
                              help="re-run a saved config and compare outputs")
    p_replay.add_argument("--run-dir", required=True)
    p_replay.set_defaults(fn=cmd_replay)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
