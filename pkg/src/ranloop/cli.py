"""Command line entry point: ``ranloop {run,validate,replay,sweep}``.

Exit codes: 0 success, 1 parse or validation failure, 2 replay mismatch, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .agents import AGENT_KINDS
from .checkpoint import CheckpointError, load_checkpoint, restore_episode, save_checkpoint
from .export import ExportError, encode_stream, export_records, first_divergence
from .loop import Episode, final_quarter_reward
from .scenario import Scenario, ScenarioError, load_scenario

EXIT_OK, EXIT_INVALID, EXIT_MISMATCH, EXIT_IO = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("ranloop")


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with "replay mismatch"
    def error(self, message):
        raise _Usage(f"{self.prog}: error: {message}")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ranloop", description="Closed-loop RAN control on a seeded digital twin.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_args(sp):
        sp.add_argument("--scenario", required=True)
        sp.add_argument("--seed", type=_seed, required=True)
        sp.add_argument("--export", required=True)
        sp.add_argument("--agent", choices=AGENT_KINDS)
        sp.add_argument("--ttis", type=int)

    run = sub.add_parser("run", help="run one episode and export its records")
    run_args(run)
    run.add_argument("--checkpoint", help="write agent/supervisor/episode state here at the end of the run")
    run.add_argument("--resume", help="continue the episode stored in this checkpoint")
    run.add_argument("--until", type=int, help="pause at the first interval boundary at or after this TTI")

    val = sub.add_parser("validate", help="parse and validate a scenario")
    val.add_argument("--scenario", required=True)

    rep = sub.add_parser("replay", help="re-run and compare with an existing export byte for byte")
    run_args(rep)

    sw = sub.add_parser("sweep", help="run several seeds in parallel")
    sw.add_argument("--scenario", required=True)
    sw.add_argument("--seeds", type=int, required=True)
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--agents", help="comma-separated agent kinds (default: static and the scenario's agent)")
    sw.add_argument("--ttis", type=int)
    sw.add_argument("--out", default="sweep-out", help="directory for per-seed exports and summary.json")
    return p


def _configure_logging():
    level = os.environ.get("RANLOOP_LOG_LEVEL", "error").lower()
    if level not in LOG_LEVELS:
        raise _Usage(f"RANLOOP_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _with_overrides(scenario: Scenario, agent: str | None, ttis: int | None) -> Scenario:
    loop = scenario.loop
    if agent is not None:
        loop = dataclasses.replace(loop, agent=agent)
    if ttis is not None:
        loop = dataclasses.replace(loop, total_ttis=ttis)
    return dataclasses.replace(scenario, loop=loop)


def _episode(args) -> Episode:
    scenario = _with_overrides(load_scenario(args.scenario), args.agent, args.ttis)
    ep = Episode(scenario, args.seed)
    if getattr(args, "resume", None):
        restore_episode(load_checkpoint(args.resume), ep)
        log.info("resumed at tti %d", ep.twin.tti)
    until = getattr(args, "until", None)
    if until is None:
        return ep.run()
    while not ep.done and ep.twin.tti < until:
        ep.step_interval()
    return ep


def cmd_run(args) -> int:
    ep = _episode(args)
    export_records(ep.stream, args.export)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, ep.agent, ep.supervisor, ep)
    print(f"{len(ep.records)} intervals, final-quarter reward {final_quarter_reward(ep.records):.6f}, "
          f"rollbacks {sum(r.rollback for r in ep.records)}")
    return EXIT_OK


def cmd_validate(args) -> int:
    s = load_scenario(args.scenario)
    print(f"ok: {s.name} ({len(s.cells)} cells, {s.ues.count} UEs, {s.loop.total_ttis} TTIs)")
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        recorded = Path(args.export).read_bytes()
    except OSError as exc:
        raise ExportError(f"cannot read export {args.export}: {exc.strerror or exc}") from exc
    fresh = encode_stream(_episode(args).stream)
    diff = first_divergence(recorded, fresh)
    if diff is None:
        print("replay identical")
        return EXIT_OK
    line, old, new = diff
    print(f"replay diverges at line {line}\n  recorded: {old[:200]}\n  replayed: {new[:200]}", file=sys.stderr)
    return EXIT_MISMATCH


def _sweep_job(job):
    path, agent, seed, ttis, out = job
    scenario = _with_overrides(load_scenario(path), agent, ttis)
    ep = Episode(scenario, seed).run()
    export_records(ep.stream, Path(out) / f"{agent}-seed{seed}.jsonl")
    return agent, seed, final_quarter_reward(ep.records)


def cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seeds < 1 or args.workers < 1:
        raise _Usage("--seeds and --workers must be >= 1")
    agents = args.agents.split(",") if args.agents else list(dict.fromkeys(["static", scenario.loop.agent]))
    bad = [a for a in agents if a not in AGENT_KINDS]
    if bad:
        raise _Usage(f"unknown agent kind(s) {bad}")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create {out}: {exc.strerror or exc}") from exc
    jobs = [(args.scenario, a, seed, args.ttis, str(out)) for a in agents for seed in range(args.seeds)]
    if args.workers == 1:
        results = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(args.workers) as ex:
            results = list(ex.map(_sweep_job, jobs))
    summary = {}
    for a in agents:
        vals = [r for ag, _, r in results if ag == a]
        summary[a] = {"seeds": len(vals), "mean_final_quarter_reward": statistics.fmean(vals),
                      "median_final_quarter_reward": statistics.median(vals), "per_seed": vals}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for a, v in summary.items():
        print(f"{a}: mean {v['mean_final_quarter_reward']:.6f} median {v['median_final_quarter_reward']:.6f}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "replay": cmd_replay, "sweep": cmd_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging()
        return COMMANDS[args.command](args)
    except _Usage as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except ScenarioError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, ExportError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
