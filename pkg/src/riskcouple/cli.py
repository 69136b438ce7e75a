"""Command line entry point: ``run``, ``validate`` and ``list-catalog``.

Exit status: 0 when every certification holds, 1 when one fails, 2 for
configuration or model errors.
"""

import argparse
import sys

from . import catalog
from .errors import RiskCoupleError
from .scenario import ScenarioError, load_scenario, run_scenario

EXIT_OK, EXIT_FAILED, EXIT_ERROR = 0, 1, 2


def _load(path):
    try:
        return load_scenario(path)
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
    except ScenarioError as exc:
        print(f"error: {path} is invalid ({len(exc.issues)} problem(s))", file=sys.stderr)
        for issue in exc.issues:
            print(f"  {issue}", file=sys.stderr)
    return None


def cmd_run(args):
    config = _load(args.config)
    if config is None:
        return EXIT_ERROR
    try:
        manifest = run_scenario(config, args.out, args.workers, args.dump_paths)
    except RiskCoupleError as exc:
        stage = getattr(exc, "stage", None)
        where = f" in stage {stage!r}" if stage else ""
        print(f"error{where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for name, rows in manifest.outputs:
        print(f"wrote {name}" + (f" ({rows} rows)" if rows is not None else ""))
    for f in manifest.failures:
        print(f"FAILED: {f}", file=sys.stderr)
    print("certified" if manifest.passed else "certification failed")
    return EXIT_OK if manifest.passed else EXIT_FAILED


def cmd_validate(args):
    config = _load(args.config)
    if config is None:
        return EXIT_ERROR
    print(f"ok: {config.kind} scenario, config hash {config.config_hash()}")
    return EXIT_OK


def cmd_catalog(args):
    print("\n".join(catalog.catalog_lines()))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="riskcouple", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario and write its outputs")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    r.add_argument("--workers", type=int, default=1,
                   help="worker threads; outputs do not depend on it")
    r.add_argument("--dump-paths", action="store_true",
                   help="also write the first 16 simulated paths to paths.csv")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="parse and validate a scenario")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    c = sub.add_parser("list-catalog", help="list named model and cost forms")
    c.set_defaults(func=cmd_catalog)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
