"""
DFIV toolkit - entry point
Deep feature instrumental variable regression, its baselines and the experiment harness
"""
import sys
from typing import List, Optional

from loguru import logger
from pydantic import ValidationError

from dfiv.config.logging import configure_logging
from dfiv.config.settings import settings
from dfiv.exceptions import DfivError, InvalidSpecError
from dfiv.views.cli import COMMANDS, build_parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    logger.debug("{} {} ({})", settings.APP_NAME, settings.APP_VERSION, settings.ENVIRONMENT)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        logger.error("❌ invalid run spec:\n{}", e)
        return InvalidSpecError.exit_code
    except DfivError as e:
        logger.error("❌ {}: {}", type(e).__name__, e.detail)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
