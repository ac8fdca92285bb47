"""Command-line front end.

``twotime <subcommand> --config run.yaml [overrides]`` validates the
configuration, runs one scenario and writes ``<scenario>.csv``,
``<scenario>.json`` and ``config.resolved.json`` to the output directory.

Exit codes: 0 success, 1 validation failure, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pydantic
import yaml

from . import __version__
from .config import ExperimentConfig, apply_overrides
from .errors import PreconditionError, TwoTimeError
from .scenarios import RUNNERS, build

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
CSV_COLUMNS = ("table", "key", "quantity", "value", "unit", "rule")


class ValidationFailure(Exception):
    """Configuration problem reported with exit code 1."""


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is not an unsigned 64-bit integer")
    return value


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad boundary list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twotime", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="YAML experiment file")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--trials", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--format", choices=("csv", "json", "both"))
        p.add_argument("--delta", type=float, help="device resolution")
        p.add_argument("--tau", type=float, help="t2 - t1, keeping t1")
        p.add_argument("--first-boundaries", type=_floats, metavar="X0,X1,...")
        p.add_argument("--second-boundaries", type=_floats, metavar="X0,X1,...")
    return parser


# configuration errors, addressed by field path and source line


def _node_line(root, loc) -> int | None:
    node, line = root, None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            hit = next(((k, v) for k, v in node.value if k.value == str(part)), None)
            if hit is None:
                break
            line = hit[0].start_mark.line + 1
            node = hit[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            break
    return line


def _format_validation(exc: pydantic.ValidationError, root, path: Path) -> str:
    lines = []
    for err in exc.errors():
        loc = err["loc"]
        field = ".".join(str(p) for p in loc) or "<root>"
        line = _node_line(root, loc) if root is not None else None
        where = f"{path}:{line}" if line else str(path)
        lines.append(f"config: {where}: field '{field}': {err['msg']}")
    return "\n".join(lines)


def load(path: Path, args: argparse.Namespace) -> ExperimentConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationFailure(f"config: cannot read {path}: {exc.strerror}") from exc
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ValidationFailure(f"config: {where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from exc
    try:
        config = ExperimentConfig.model_validate(data if data is not None else {})
    except pydantic.ValidationError as exc:
        raise ValidationFailure(_format_validation(exc, root, path)) from exc
    try:
        return apply_overrides(config, seed=args.seed, trials=args.trials, workers=args.workers, out=args.out,
                               format=args.format, delta=args.delta, tau=args.tau,
                               first_boundaries=args.first_boundaries,
                               second_boundaries=args.second_boundaries)
    except pydantic.ValidationError as exc:
        raise ValidationFailure(_format_validation(exc, None, Path("command line"))) from exc


def _origin(exc: BaseException) -> str:
    """Dotted module name of the frame that raised ``exc``."""
    frames = traceback.extract_tb(exc.__traceback__)
    if not frames:
        return "twotime"
    return f"twotime.{Path(frames[-1].filename).stem}"


# output


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return _jsonable(value.item())
    return value


def write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def output_directory(config: ExperimentConfig, subcommand: str) -> Path:
    if config.output.directory is not None:
        return Path(config.output.directory)
    return Path("results") / config.scenario / subcommand


def run(subcommand: str, config: ExperimentConfig) -> tuple[Path, dict]:
    """Execute ``subcommand`` and write its files; returns the output directory and summary."""
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    setup = build(config)
    results = RUNNERS[subcommand](setup)
    elapsed = time.perf_counter() - t0

    out = output_directory(config, subcommand)
    out.mkdir(parents=True, exist_ok=True)
    resolved = config.model_dump(mode="json")
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    if "csv" in config.output.formats:
        write_csv(out / f"{config.scenario}.csv", results.rows)
    if "json" in config.output.formats:
        bundle = {
            "subcommand": subcommand,
            "config": resolved,
            "columns": list(CSV_COLUMNS),
            "tables": results.tables(),
            "summary": results.summary,
            "software": {"package": "twotime", "version": __version__, "python": platform.python_version(),
                         "numpy": np.__version__},
            "metadata": {"started": started.isoformat(), "wall_seconds": elapsed},
        }
        (out / f"{config.scenario}.json").write_text(json.dumps(_jsonable(bundle), indent=2) + "\n")
    return out, results.summary


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load(args.config, args)
        out, summary = run(args.subcommand, config)
    except ValidationFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except PreconditionError as exc:
        print(f"{_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TwoTimeError as exc:
        print(f"{_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ArithmeticError, MemoryError) as exc:
        print(f"{_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    print(f"{args.subcommand} [{config.scenario}] -> {out}")
    for key, value in summary.items():
        print(f"  {key}: {_fmt(value)}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
