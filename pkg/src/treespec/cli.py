"""``treespec`` command line: decode, ablate, profile, plan.

Exit codes: 0 success, 2 bad config or input, 3 consistency violation
(including a golden-equivalence failure), 1 any other library error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Sequence

from treespec.errors import ConfigError, ConsistencyViolation, TreespecError
from treespec.harness import (
    GoldenMismatch,
    RunSpec,
    build_spec,
    check_report_invariants,
    read_config,
    run_ablation,
)
from treespec.pipeline import run
from treespec.scheduler import LatencyTable, choose_allocation, default_table_path, profile_pair
from treespec.toy_lm import autoregressive_decode

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_CONSISTENCY = 0, 1, 2, 3

log = logging.getLogger("treespec")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run description")
    p.add_argument("--mode", choices=["serial", "parallel"])
    p.add_argument("--clock", choices=["virtual", "wall"])
    p.add_argument("--bs", type=int)
    p.add_argument("--w", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--k-children", dest="k_children", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--trace", help="write per-iteration records as JSON lines")
    p.add_argument("--out", help="output file (decode/profile/plan) or directory (ablate)")
    p.add_argument("--jobs", type=int)
    p.add_argument("--prompt", help="space-separated token ids (overrides the config prompt)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treespec", description="Tree speculative decoding on toy models.")
    sub = parser.add_subparsers(dest="command", required=True)

    dec = sub.add_parser("decode", help="one speculative decode, checked against greedy")
    _common(dec)

    abl = sub.add_parser("ablate", help="serial vs parallel over the configured sweep")
    _common(abl)

    prof = sub.add_parser("profile", help="latency profile for a model pair")
    _common(prof)
    prof.add_argument("--table", default=str(default_table_path()))
    prof.add_argument("--target-model", default="llama3-70b")
    prof.add_argument("--draft-model", default="llama3-3b")
    prof.add_argument("--target-units", type=int, default=4)
    prof.add_argument("--draft-units", type=int, default=4)
    prof.add_argument("--trials", type=int, default=11)
    prof.add_argument("--inject-ms", type=float, help="sleep added to each timed call (wall clock)")

    plan = sub.add_parser("plan", help="choose the target/draft resource split")
    _common(plan)
    plan.add_argument("--table", default=str(default_table_path()))
    plan.add_argument("--k", type=int, default=8)
    plan.add_argument("--candidates", default="1,2,4", help="comma-separated target unit counts")
    plan.add_argument("--target-model", default="llama3-70b")
    plan.add_argument("--draft-model", default="llama3-3b")
    return parser


_OVERRIDE_KEYS = ("mode", "clock", "bs", "w", "d", "k_children", "epsilon", "seed", "max_tokens", "trace", "out", "jobs")


def _spec_from_args(args: argparse.Namespace) -> RunSpec:
    overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS}
    if args.config:
        raw = read_config(args.config)
        base_dir = Path(args.config).resolve().parent
    else:
        raw, base_dir = {}, None
    if args.prompt is not None:
        raw = {k: v for k, v in raw.items() if k not in ("prompt", "datasets")}
        raw["prompt"] = args.prompt
    elif not args.config or ("prompt" not in raw and "datasets" not in raw):
        raw = dict(raw)
        raw.setdefault("prompt", "1 2 3 4")
    return build_spec(raw, overrides, base_dir=base_dir)


def _emit(obj: Any, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def cmd_decode(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    cfg = spec.pipeline
    res = run(cfg, spec.target, spec.draft)
    expected = autoregressive_decode(spec.target, cfg.prompt, cfg.max_tokens)
    if res.tokens != expected:
        raise GoldenMismatch("decode output differs from greedy decoding", res.to_json())
    if spec.trace:
        with open(spec.trace, "w") as fh:
            for it in res.iterations:
                fh.write(json.dumps(it.to_json(), sort_keys=True) + "\n")
    summary = {
        "prompt": list(cfg.prompt),
        "tokens": res.tokens,
        "mode": res.mode,
        "clock": res.clock,
        "metrics": asdict(res.metrics),
        "golden": True,
        "config_hash": spec.config_hash(),
    }
    _emit(summary, spec.out)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    report = run_ablation(spec)
    problems = check_report_invariants(report)
    for p in problems:
        log.warning("%s", p)
    if spec.out:
        paths = report.write(spec.out)
        log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    print(json.dumps({"environment": report.environment, "by_dataset": report.by_dataset}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_profile(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    table = LatencyTable.from_csv(args.table) if spec.pipeline.clock == "virtual" else None
    prof = profile_pair(
        spec.pipeline,
        spec.target,
        spec.draft,
        args.trials,
        table=table,
        target_key=(args.target_model, args.target_units),
        draft_key=(args.draft_model, args.draft_units),
        inject_ms=args.inject_ms,
    )
    _emit({"clock": spec.pipeline.clock, **asdict(prof)}, spec.out)
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    try:
        candidates = [int(x) for x in args.candidates.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--candidates must be comma-separated integers, got {args.candidates!r}") from None
    plan = choose_allocation(
        LatencyTable.from_csv(args.table),
        args.k,
        candidates,
        target_model=args.target_model,
        draft_model=args.draft_model,
        target=spec.target,
        draft=spec.draft,
        base=replace(spec.pipeline, clock="virtual"),
    )
    _emit(plan.to_json(), spec.out)
    return EXIT_OK


COMMANDS = {"decode": cmd_decode, "ablate": cmd_ablate, "profile": cmd_profile, "plan": cmd_plan}


def main(argv: Sequence[str] | None = None) -> int:
    # argparse itself exits with 2 on bad flags, matching the config-error code
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GoldenMismatch as exc:
        print(f"consistency violation: {exc}", file=sys.stderr)
        print(json.dumps(exc.trace, sort_keys=True), file=sys.stderr)
        return EXIT_CONSISTENCY
    except ConsistencyViolation as exc:
        print(f"consistency violation: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except TreespecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
