import argparse
import json
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from app.core.config import settings
from app.core.exceptions import SolverError
from app.models.context import RunContext
from app.models.schemas import RunConfig

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    from app.api.routes import SUBCOMMANDS

    parser = argparse.ArgumentParser(
        prog="qbsde",
        description=f"{settings.PROJECT_NAME}: lattice solver for quadratic BSDEs with jumps",
    )
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--subcommand", required=True, choices=SUBCOMMANDS)
    parser.add_argument("--out", default=None, help="Output directory (overrides output.dir)")
    return parser


def configure_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)

    from app.api.routes import dispatch

    try:
        config = RunConfig.load(args.config)
        ctx = RunContext(
            subcommand=args.subcommand,
            config_path=args.config,
            config=config,
            out_dir_override=args.out,
        )
        result = dispatch(ctx)
    except SolverError as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc.message}")
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.exception(f"❌ Unexpected failure: {exc}")
        return 1

    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
