"""Command line entry point.

Exit codes: 0 pass, 1 verdict fail, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from ..uploader import DumpFormatError
from ..workload import generate_to_dir, oracle
from .bench import Insertion, bench_scalability, bench_tailer, fault_inject, verify, verify_run
from .config import ConfigError, load_config
from .pipeline import Kill, StageError, run

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be >= 1")
    return values


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="INI file with [pipeline] and [workload] sections")
    p.add_argument("--set", "-s", action="append", default=[], metavar="KEY=VALUE", help="override a config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ondemand-etl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="generate a workload log and manifest")
    _common(p)
    p.add_argument("--out", "-o", required=True, help="output directory (log/ and manifest.json)")

    p = sub.add_parser("run", help="run the pipeline once")
    _common(p)
    p.add_argument("--work", "-w", default="run", help="work directory for log, dump and metrics")
    p.add_argument("--log", help="replay a directory written by 'sample' instead of generating")
    p.add_argument("--verify", action="store_true", help="compare the dump with the batch oracle")

    p = sub.add_parser("bench-scale", help="throughput against worker count")
    _common(p)
    p.add_argument("--workers", type=_int_list, default=[1, 2, 4, 8, 16, 20, 24])
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--work", "-w", default="bench_scale")
    p.add_argument("--csv", default=None, help="CSV path (default WORK/scalability.csv)")

    p = sub.add_parser("bench-tailer", help="extraction throughput against table count")
    p.add_argument("--mode", choices=["GROWING", "FIXED", "both"], default="both")
    p.add_argument("--tables", type=_int_list, default=[1, 2, 4, 8, 16])
    p.add_argument("--records", type=int, default=1000, help="records per inserted table")
    p.add_argument("--read-latency", type=float, default=0.001, help="seconds per chunk of log lines")
    p.add_argument("--chunk-lines", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--work", "-w", default="bench_tailer")

    p = sub.add_parser("fault", help="run with worker kills and check consistency")
    _common(p)
    p.add_argument("--kill", "-k", action="append", default=[], metavar="WORKER@FRACTION")
    p.add_argument("--work", "-w", default="fault")

    p = sub.add_parser("verify", help="compare two dumps")
    p.add_argument("dump_a")
    p.add_argument("dump_b")
    p.add_argument("--tolerance", type=float, default=1e-9)

    p = sub.add_parser("oracle", help="batch-recompute the expected dump from a log")
    p.add_argument("--log", required=True, help="log directory")
    p.add_argument("--preset", choices=["SIMPLE", "COMPLEX"], default=None, help="default: from manifest")
    p.add_argument("--window-ms", type=int, default=3_600_000)
    p.add_argument("--out", "-o", default=None)
    return parser


def _print(obj: object) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _cmd_sample(args: argparse.Namespace) -> int:
    _, spec = load_config(args.config, args.set)
    manifest = generate_to_dir(spec, args.out)
    _print({"out": args.out, "total": manifest.total, "counts": manifest.counts, "late_rows": manifest.late_rows})
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    cfg, spec = load_config(args.config, args.set)
    result = run(cfg, spec, args.work, source_dir=args.log)
    summary = result.metrics.summary()
    summary["dump"] = str(Path(args.work) / "facts.dump")
    summary["integrity_problems"] = len(result.integrity)
    code = EXIT_OK if not result.integrity else EXIT_FAIL
    if args.verify:
        report = verify_run(result, cfg.window_ms)
        summary["verify"] = str(report)
        if not report.ok:
            code = EXIT_FAIL
    _print(summary)
    return code


def _cmd_bench_scale(args: argparse.Namespace) -> int:
    cfg, spec = load_config(args.config, args.set)
    csv_path = args.csv or Path(args.work) / "scalability.csv"
    Path(args.work).mkdir(parents=True, exist_ok=True)
    rows = bench_scalability(cfg, spec, args.workers, args.work, args.repeats, csv_path)
    _print({"csv": str(csv_path), "rows": rows})
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_FAIL


def _cmd_bench_tailer(args: argparse.Namespace) -> int:
    modes = [Insertion.GROWING, Insertion.FIXED] if args.mode == "both" else [Insertion(args.mode)]
    out = {}
    for mode in modes:
        work = Path(args.work) / mode.value.lower()
        work.mkdir(parents=True, exist_ok=True)
        csv_path = Path(args.work) / f"tailer_{mode.value.lower()}.csv"
        out[mode.value] = bench_tailer(
            args.tables, mode, work, args.records, max(16, max(args.tables)), args.read_latency,
            args.chunk_lines, args.seed, csv_path,
        )
    _print(out)
    return EXIT_OK


def _cmd_fault(args: argparse.Namespace) -> int:
    cfg, spec = load_config(args.config, args.set)
    kills = [Kill.parse(k) for k in args.kill]
    fr = fault_inject(cfg, spec, kills, args.work)
    out: dict = {"verdict": "PASS" if fr.passed else "FAIL"}
    if fr.error:
        out["error"] = fr.error
    if fr.result is not None:
        out["metrics"] = fr.result.metrics.summary()
        out["integrity_problems"] = fr.result.integrity[:20]
    if fr.report is not None:
        out["diff"] = str(fr.report)
    _print(out)
    return EXIT_OK if fr.passed else EXIT_FAIL


def _cmd_verify(args: argparse.Namespace) -> int:
    try:
        a = Path(args.dump_a).read_text(encoding="utf-8")
        b = Path(args.dump_b).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(exc)) from None
    report = verify(a, b, args.tolerance)
    print(report)
    return EXIT_OK if report.ok else EXIT_FAIL


def _cmd_oracle(args: argparse.Namespace) -> int:
    log_dir = Path(args.log)
    if not log_dir.is_dir():
        raise ConfigError(f"log directory {log_dir} does not exist")
    preset = args.preset
    if preset is None:
        manifest = log_dir.parent / "manifest.json"
        preset = json.loads(manifest.read_text())["preset"] if manifest.exists() else "SIMPLE"
    text = oracle(log_dir, preset, args.window_ms, args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        print(f"{len(text.splitlines())} rows written to {args.out}")
    return EXIT_OK


COMMANDS = {
    "sample": _cmd_sample,
    "run": _cmd_run,
    "bench-scale": _cmd_bench_scale,
    "bench-tailer": _cmd_bench_tailer,
    "fault": _cmd_fault,
    "verify": _cmd_verify,
    "oracle": _cmd_oracle,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DumpFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
