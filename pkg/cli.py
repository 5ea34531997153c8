"""
Command line for the synthetic population pipeline.

Secure environment: ``faux-gen``, ``fit``, ``audit``, ``dump-default-chain``.
Open environment: ``generate``, ``calibrate``, ``evaluate``.
Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 audit failure.
"""
import argparse
import json
import logging
import sys
from typing import Dict, List, Optional

from dotenv import load_dotenv

import pipeline
from errors import ConfigError, SynthPopError
from schema_core import PopulationSchema

logger = logging.getLogger("synthpop")

EXIT_AUDIT = 4


def parse_targets(pairs: Optional[List[str]]) -> Optional[Dict[str, float]]:
    """``["lung_cancer=0.0014"]`` -> ``{"lung_cancer": 0.0014}``."""
    if not pairs:
        return None
    targets = {}
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep or not name:
            raise ConfigError(f"Calibration target '{pair}' must look like variable=prevalence")
        try:
            targets[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"Calibration target '{pair}' has a non-numeric prevalence")
    return targets


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synthpop",
        description="Fit a regression chain on microdata, export a model pack and generate synthetic populations",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--output-dir", dest="output_dir", help="directory for produced files")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("faux-gen", parents=[common], help="draw a faux source population")
    p.add_argument("--preset", help="preset name or FauxSpec JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-missing", dest="inject_missing", action="store_false", default=None,
                   help="keep every generated value (no survey subsample or MCAR)")
    p.add_argument("--oracle", action="store_true", default=None, help="also write expected marginals")

    p = sub.add_parser("fit", parents=[common], help="fit the chain and write the model pack")
    p.add_argument("--input", help="source population CSV")
    p.add_argument("--replicates", nargs="+", help="imputation replicate CSVs of the source")
    p.add_argument("--schema", help="schema JSON (default: built-in schema)")
    p.add_argument("--chain", help="chain config JSON (default: built-in chain)")
    p.add_argument("--policy", help="seed strata disclosure policy: fail, merge_adjacent_age, keep_flagged")
    p.add_argument("--min-count", dest="min_count", type=int)
    p.add_argument("--cv", dest="cv_folds", type=int, help="k-fold cross-validation of every entry")

    p = sub.add_parser("audit", parents=[common], help="disclosure audit of a model pack")
    p.add_argument("--pack")

    p = sub.add_parser("generate", parents=[common], help="generate a synthetic population from a pack")
    p.add_argument("--pack")
    p.add_argument("--seed", type=int)
    p.add_argument("--param-draws", dest="param_draws", type=int,
                   help="draw k populations from k parameter draws")
    p.add_argument("--calibrate", action="append", metavar="VAR=TARGET")
    p.add_argument("--force", action="store_true", default=None, help="use a pack that fails the audit")
    p.add_argument("--disease-presence", dest="disease_presence", action="store_true", default=None)

    p = sub.add_parser("calibrate", parents=[common], help="write a pack calibrated to target prevalences")
    p.add_argument("targets", nargs="*", metavar="VAR=TARGET")
    p.add_argument("--pack")
    p.add_argument("--seed", type=int)
    p.add_argument("--calibrate", action="append", metavar="VAR=TARGET")
    p.add_argument("--force", action="store_true", default=None)

    p = sub.add_parser("evaluate", parents=[common], help="compare a synthetic population with its source")
    p.add_argument("--source")
    p.add_argument("--synthetic")
    p.add_argument("--schema")
    p.add_argument("--synthetic-schema", dest="synthetic_schema")
    p.add_argument("--adult-age", dest="adult_age", type=int)

    p = sub.add_parser("dump-default-chain", help="print the built-in chain config as JSON")
    p.add_argument("--schema", help="restrict the chain to the variables of this schema")
    p.add_argument("--output", help="write to a file instead of standard output")
    return parser


RUN_FLAGS = (
    "output_dir", "threads", "preset", "seed", "inject_missing", "oracle", "input", "replicates", "schema",
    "chain", "policy", "min_count", "cv_folds", "pack", "param_draws", "force", "disease_presence", "source",
    "synthetic", "synthetic_schema", "adult_age",
)


def resolve_run(args: argparse.Namespace, environ=None) -> pipeline.RunConfig:
    base = pipeline.RunConfig.load(args.config) if getattr(args, "config", None) else pipeline.RunConfig()
    flags = {name: getattr(args, name, None) for name in RUN_FLAGS}
    pairs = list(getattr(args, "targets", None) or []) + list(getattr(args, "calibrate", None) or [])
    flags["calibrate"] = parse_targets(pairs)
    return base.merged(flags, environ)


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _report(result: Dict) -> None:
    for key, path in sorted(result.get("paths", {}).items()):
        print(f"📄 {key}: {path}")
    for output in result.get("populations", []):
        print(f"📄 {output['population']} ({output['records']} records)")


def dump_chain(args: argparse.Namespace) -> int:
    schema = PopulationSchema.load(args.schema) if args.schema else None
    text = pipeline.dump_default_chain(schema)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(getattr(args, "verbose", False))
    try:
        if args.command == "dump-default-chain":
            return dump_chain(args)
        run = resolve_run(args)
        print(f"🚀 {args.command}")
        result = pipeline.STAGES[args.command](run)
    except SynthPopError as e:
        print(f"❌ {args.command} failed: {e.detail}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"❌ {args.command} failed: {e}", file=sys.stderr)
        return 2

    _report(result)
    if not result["success"]:
        print(f"❌ {args.command}: {len(result.get('violations', []))} violations", file=sys.stderr)
        for violation in result.get("violations", []):
            print(f"   - {violation}", file=sys.stderr)
        return EXIT_AUDIT
    if args.command == "evaluate":
        print(json.dumps(result["summary"], indent=2, sort_keys=True))
    print(f"✅ {args.command} completed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
