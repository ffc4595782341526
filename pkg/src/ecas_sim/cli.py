"""``ecas-sim`` command line: calibrate, sweep, verify."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .channel import CalibrationError, calibrate, dump_params, load_milestones
from .experiment import (
    ConfigError,
    ExperimentSpec,
    _parse_policies,
    compare_to_reference,
    comparison_text,
    emit_reports,
    load_spec,
    read_summary,
    resolve_radio,
    run_sweep,
)

OK, VERIFY_FAILED, CONFIG_ERROR = 0, 1, 2

log = logging.getLogger("ecas_sim")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecas-sim", description="Adaptive LoRa data-rate simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="fit channel parameters to link milestones")
    c.add_argument("--milestones", required=True, help="CSV: dr,distance_m,max_connected_rain[,source]")
    c.add_argument("--out", required=True, help="channel parameter file to write")
    c.add_argument("--spec", help="experiment file supplying the radio settings")

    s = sub.add_parser("sweep", help="run the rain sweep and write reports")
    s.add_argument("--spec", help="experiment key-value file (defaults apply when omitted)")
    s.add_argument("--grid", help="5mm, 1mm or a grid file (overrides the spec)")
    s.add_argument("--policy", help="fixed:<dr>, conservative, aggressive, all or a comma list")
    s.add_argument("--params", help="channel parameter file (skips calibration)")
    s.add_argument("--out", help="report directory (overrides the spec)")
    s.add_argument("--trace", action="store_true", help="also write per-event and per-message CSVs")

    v = sub.add_parser("verify", help="compare a sweep result with a reference table")
    v.add_argument("--result", required=True, help="directory written by 'sweep'")
    v.add_argument("--reference", required=True, help="CSV: approach,sent,received,pdr_percent")
    return p


def _spec(args) -> ExperimentSpec:
    spec = load_spec(args.spec) if getattr(args, "spec", None) else ExperimentSpec()
    changes = {}
    if getattr(args, "grid", None):
        changes["grid"] = args.grid
    if getattr(args, "policy", None):
        changes["policies"] = _parse_policies(args.policy)
    if getattr(args, "params", None):
        changes["channel_params"] = args.params
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    return replace(spec, **changes) if changes else spec


def cmd_calibrate(args) -> int:
    try:
        milestones = load_milestones(args.milestones)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{args.milestones}: malformed milestone row ({exc})") from None
    radio = resolve_radio(_spec(args))
    try:
        params = calibrate(milestones, radio)
    except CalibrationError as exc:
        for m in exc.violated:
            print(f"violated: DR{m.dr_index} at {m.distance:g} m -> {m.max_connected_rain}", file=sys.stderr)
        raise ConfigError(str(exc)) from None
    dump_params(params, args.out)
    print(f"wrote {args.out}")
    return OK


def cmd_sweep(args) -> int:
    spec = _spec(args)
    result = run_sweep(spec, trace=args.trace)
    written = emit_reports(result, spec.output_dir)
    sys.stdout.write(comparison_text(result))
    print(f"wrote {len(written)} files to {spec.output_dir}")
    return OK


def cmd_verify(args) -> int:
    report = compare_to_reference(read_summary(args.result), args.reference)
    sys.stdout.write(report.render())
    return OK if report.passed else VERIFY_FAILED


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"calibrate": cmd_calibrate, "sweep": cmd_sweep, "verify": cmd_verify}[args.command]
    try:
        return handler(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"ecas-sim: configuration error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except OSError as exc:
        print(f"ecas-sim: I/O error: {exc}", file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
