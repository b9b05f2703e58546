# main.py

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from errors import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, ConfigError, KKTAuditError
from orchestrator.commands import ATTACKS, cmd_ablate, cmd_attack, cmd_eval, cmd_scenario, cmd_train
from schemas.config_schemas import Precision, RunConfig
from stages.run_ledger import RunLedger

logger = logging.getLogger("main")


def load_config(
    config_file: Optional[str],
    overrides: Sequence[str],
    workdir: Optional[str] = None,
    force: bool = False,
    fallback_workdir: Optional[str] = None,
) -> RunConfig:
    """File values, then `--workdir`, then `--set` overrides, then the resolved sub-seeds.

    fallback_workdir (KKT_AUDIT_WORKDIR) only fills io.workdir when nothing above set it.
    """
    flat: Dict[str, Optional[str]] = {}
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        flat.update(dotenv_values(path, interpolate=False))
    if workdir:
        flat["io.workdir"] = workdir
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects section.field=value, got {item!r}")
        flat[key.strip()] = value.strip()
    if fallback_workdir and not flat.get("io.workdir"):
        flat["io.workdir"] = fallback_workdir
    if force:
        flat["io.force"] = "true"
    return RunConfig.from_flat(flat).resolved()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kkt-audit", description="Membership auditing from trained weights alone")
    parser.add_argument("--config", help="flat `section.field = value` run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field (repeatable)")
    parser.add_argument("--workdir", help="artifact directory (io.workdir); KKT_AUDIT_WORKDIR when unset everywhere")
    parser.add_argument("--threads", type=int, default=int(os.getenv("KKT_AUDIT_THREADS", "1")),
                        help="worker threads for block solving")
    parser.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("scenario", help="generate the train set, candidate pool and membership tags")
    sub.add_parser("train", help="train the target model")
    attack = sub.add_parser("attack", help="score the candidate pool")
    attack.add_argument("--baseline", choices=ATTACKS, default="kkt")
    attack.add_argument("--blocks-cache", type=Path, help="directory of reusable gradient blocks")
    attack.add_argument("--precision", choices=[p.value for p in Precision])
    evaluate = sub.add_parser("eval", help="ROC, AUC and TPR at fixed FPR against the membership tags")
    evaluate.add_argument("--attack", default="kkt", help="attack name used for default file names")
    evaluate.add_argument("--scores", nargs="+", type=Path, help="score reports (one per seed)")
    sub.add_parser("ablate", help="score the pool once per fusion/post-processing stage")
    return parser


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="[%(name)s] %(message)s", force=True)


def dispatch(args: argparse.Namespace, cfg: RunConfig) -> List[Path]:
    progress = not args.quiet
    if args.command == "scenario":
        return cmd_scenario(cfg)
    if args.command == "train":
        return cmd_train(cfg, progress=progress)
    if args.command == "attack":
        precision = Precision(args.precision) if args.precision else None
        return cmd_attack(cfg, args.baseline, args.blocks_cache, precision, args.threads, progress)
    if args.command == "eval":
        return cmd_eval(cfg, args.scores, args.attack)
    return cmd_ablate(cfg, args.threads, progress)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    try:
        cfg = load_config(args.config, args.overrides, args.workdir, args.force, os.getenv("KKT_AUDIT_WORKDIR"))
    except (KKTAuditError, ValidationError) as e:
        print(f"[main] ❌ {e}", file=sys.stderr)
        return EXIT_CONFIG

    ledger = RunLedger(str(Path(cfg.io.workdir) / "audit_logs"))
    try:
        artifacts = dispatch(args, cfg)
    except KKTAuditError as e:
        print(f"[main] ❌ {e}", file=sys.stderr)
        ledger.log_run(args.command, cfg.digest(), status="failed", details={"error": str(e)})
        return e.exit_code
    except ValidationError as e:
        print(f"[main] ❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"[main] ❌ {e}", file=sys.stderr)
        return EXIT_RUNTIME

    ledger.log_run(args.command, cfg.digest(), artifacts=[str(a) for a in artifacts])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
