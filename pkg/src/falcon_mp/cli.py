"""Command-line entry point: ``python3 -m falcon_mp <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.  Log
verbosity comes from the ``FALCON_MP_LOG`` environment variable (a level
name such as DEBUG or INFO; default WARNING).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import harness as H

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LOG_ENV = "FALCON_MP_LOG"

log = logging.getLogger("falcon_mp")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> List[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc
    if not vals:
        raise ConfigError("empty list")
    return vals


def _config(args) -> H.ExperimentConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = H.load_config(path)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        cfg = H.ExperimentConfig()
    for key in ("scheduler", "seed", "out", "bank", "repetitions"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "scenario", None):
        cfg.scenario = tuple(s.strip() for s in args.scenario.split(","))
    try:
        cfg.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _check_scheduler(name: str, allowed: Sequence[str]) -> str:
    name = name.lower()
    if name not in allowed:
        raise ConfigError(f"unknown scheduler {name!r}; choose from {', '.join(allowed)}")
    return name


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _bank_for(cfg: H.ExperimentConfig, n_paths: int):
    from .falcon import load_bank
    if cfg.bank:
        return load_bank(cfg.bank)
    return H.bootstrap_bank(cfg.seed, cfg.bootstrap_rounds, n_paths=n_paths, scale=cfg.scale,
                            size=cfg.transfer_size)


def cmd_run(args) -> int:
    cfg = _config(args)
    _check_scheduler(cfg.scheduler, H.SCHEDULERS)
    res, score = H.run_experiment(cfg)
    line = f"{res.label}: median {res.median:.4f} s over {len(res.times)} repetitions"
    if score is not None:
        line += f", relative score {score:.4f}"
    print(line)
    if cfg.out:
        H.emit_results(res, cfg.out, cfg, score)
    return EXIT_OK


def cmd_replay(args) -> int:
    tables = H.replay(args.manifest)
    out = Path(args.out) if args.out else None
    for name, text in tables.items():
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / name).write_text(text)
    if args.check:
        base = Path(args.manifest).parent
        same = all((base / n).read_text() == t for n, t in tables.items())
        print("identical" if same else "DIFFERENT")
        return EXIT_OK if same else EXIT_RUNTIME
    return EXIT_OK


def cmd_converge(args) -> int:
    cfg = _config(args)
    sc = H.build_scenario(cfg.scenario, cfg.scale)
    name = _check_scheduler(cfg.scheduler, H.CONVERGENCE_LEARNERS)
    policy = H.train_dqn_off(sc, cfg.seed, cfg.dqn_off_transfers, size=cfg.transfer_size)
    ref = H.run_bulk(H.dqn_off(policy, sc.n_paths, cfg.seed), sc, args.eval_reps, cfg.seed,
                     cfg.transfer_size)
    bank = _bank_for(cfg, sc.n_paths) if name in ("falcon", "falcon-n") else None
    if name.startswith("dqn-on("):
        kind = name[-2]

        def factory(run):
            return H.prepare_dqn_on(kind, sc, cfg.seed * 100 + run, **cfg.params)
    elif name == "dqn-off":
        def factory(run):
            return H.dqn_off(policy, sc.n_paths, run)
    else:
        def factory(run):
            return H.make_scheduler(name, sc.n_paths, cfg.seed * 100 + run, bank=bank,
                                    **cfg.params)
    checkpoints = [c for c in H.CHECKPOINTS if c <= args.max_packets]
    curve = H.run_convergence(factory, sc, ref, args.runs, cfg.seed, checkpoints,
                              args.eval_reps, label=name, size=cfg.transfer_size)
    med = curve.median_curve()
    print(f"{name}: packets to score 0.9 = {curve.packets_to(0.9)}")
    for c, s in zip(curve.checkpoints, med):
        print(f"  {c:>6d}  {s:.4f}")
    if cfg.out:
        rows = [[c, *map(repr, curve.scores[:, j]), repr(float(med[j]))]
                for j, c in enumerate(curve.checkpoints)]
        _write_csv(Path(cfg.out) / "convergence.csv",
                   ["packets", *[f"run{r}" for r in range(args.runs)], "median"], rows)
    return EXIT_OK


def cmd_stress(args) -> int:
    cfg = _config(args)
    intervals = _floats(args.intervals)
    if min(intervals) <= 0:
        raise ConfigError("intervals must be > 0")
    conds = H.sample_conditions(args.conditions, cfg.seed, n_paths=len(cfg.scenario),
                                scale=cfg.scale)
    name = _check_scheduler(cfg.scheduler, H.SCHEDULERS)
    bank = _bank_for(cfg, len(cfg.scenario)) if name in ("falcon", "falcon-n") else None

    def factory():
        return H.make_scheduler(name, len(cfg.scenario), cfg.seed, bank=bank, **cfg.params)

    def reference(sc):
        pol = H.train_dqn_off(sc, cfg.seed, cfg.dqn_off_transfers, back_to_back=True,
                              size=cfg.transfer_size)
        return H.dqn_off(pol, sc.n_paths, cfg.seed)

    results = H.run_stress(factory, reference, intervals, conds, cfg.seed,
                           args.min_horizon, cfg.transfer_size)
    for r in results:
        print(f"{name}: interval {r.interval:g} s  score {r.score:.4f}  ({r.transfers} transfers)")
    if cfg.out:
        _write_csv(Path(cfg.out) / "stress.csv", ["interval_s", "score", "transfers"],
                   [[r.interval, repr(r.score), r.transfers] for r in results])
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = [int(v) for v in _floats(args.values)] if args.values else None
    out = H.run_param_sweep(args.axis, values, args.seed, args.trials)
    col = "score" if args.axis == "k" else "plateau_k"
    for k, v in out.items():
        print(f"{args.axis}={k}  {col}={v:.4f}")
    if args.out:
        _write_csv(Path(args.out) / f"sweep_{args.axis}.csv", [args.axis, col],
                   [[k, repr(v)] for k, v in out.items()])
    return EXIT_OK


def cmd_train_meta(args) -> int:
    from .falcon import (DEFAULT_BINNING, ExperienceLog, MetaBank, MetaConfig, load_bank,
                         meta_update, save_bank)
    log_path = Path(args.log)
    if not log_path.is_file():
        raise ConfigError(f"experience log not found: {log_path}")
    exp = ExperienceLog.load(log_path)
    bank_path = Path(args.bank)
    if bank_path.exists():
        bank = load_bank(bank_path)
    else:
        if not exp.records:
            raise ConfigError("empty experience log and no existing bank")
        dim = len(exp.records[0].transition.s)
        n_paths = len(exp.records[0].condition.paths)
        bank = MetaBank((dim, 32, 32, 32, n_paths), DEFAULT_BINNING.n_buckets)
    done = meta_update(bank, exp.records, np.random.default_rng(args.seed),
                       MetaConfig(iterations=args.iterations))
    save_bank(bank, bank_path)
    print(f"updated {len(done)} buckets; bank now holds {len(bank)} meta-models")
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    from .falcon import save_bank
    bank = H.bootstrap_bank(args.seed, args.rounds, n_paths=args.paths)
    save_bank(bank, args.bank)
    print(f"bank with {len(bank)} meta-models written to {args.bank}")
    return EXIT_OK


def cmd_validate_trace(args) -> int:
    from .netsim import read_trace
    path = Path(args.trace)
    if not path.is_file():
        raise ConfigError(f"trace not found: {path}")
    tr = read_trace(path)
    print(json.dumps({"segments": len(tr.segments), "duration": tr.duration}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="falcon-mp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--config", help="key = value experiment file")
        sp.add_argument("--scheduler")
        sp.add_argument("--scenario", help="comma-separated presets or trace files")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--bank", help="meta-model bank file (falcon)")

    sp = sub.add_parser("run", help="bulk transfers of one scheduler")
    common(sp)
    sp.add_argument("--repetitions", type=int)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("replay", help="re-run a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out")
    sp.add_argument("--check", action="store_true",
                    help="compare with the tables next to the manifest")
    sp.set_defaults(fn=cmd_replay)

    sp = sub.add_parser("converge", help="score vs online packets")
    common(sp)
    sp.add_argument("--runs", type=int, default=10)
    sp.add_argument("--eval-reps", type=int, default=9)
    sp.add_argument("--max-packets", type=int, default=65536)
    sp.set_defaults(fn=cmd_converge)

    sp = sub.add_parser("stress", help="score under periodic condition changes")
    common(sp)
    sp.add_argument("--intervals", default="8,4,2,0.5,0.3")
    sp.add_argument("--conditions", type=int, default=24)
    sp.add_argument("--min-horizon", type=float, default=60.0)
    sp.set_defaults(fn=cmd_stress)

    sp = sub.add_parser("sweep", help="K or sub-range sweep on the toy family")
    sp.add_argument("--axis", choices=("k", "subranges"), required=True)
    sp.add_argument("--values", help="comma-separated integers")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("train-meta", help="meta-update a bank from an experience log")
    sp.add_argument("--log", required=True)
    sp.add_argument("--bank", required=True)
    sp.add_argument("--iterations", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_train_meta)

    sp = sub.add_parser("bootstrap-bank", help="build a bank from simulated experience")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--rounds", type=int, default=40)
    sp.add_argument("--paths", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_bootstrap)

    sp = sub.add_parser("validate-trace", help="parse and check a trace file")
    sp.add_argument("trace")
    sp.set_defaults(fn=cmd_validate_trace)
    return p


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    from .netsim import TraceParseError, TraceValidationError
    try:
        return args.fn(args)
    except (ConfigError, TraceParseError, TraceValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
