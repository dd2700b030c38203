"""Main entry point for bevloc."""

import logging
import sys
from collections.abc import Sequence

from .cli import run
from .config import Configuration


def main(exec_args: Sequence[str] | None = None) -> None:
    """Main entry point for bevloc."""
    # Get logger
    logger: logging.Logger = logging.getLogger(name="bevloc.main")

    configuration = Configuration(exec_args=exec_args)
    try:
        status = run(configuration)
    except KeyboardInterrupt:
        # Handle Ctrl+C gracefully
        logger.info(msg="Run interrupted by user (Ctrl+C)")
        print("\nExiting bevloc...")
        sys.exit(130)
    except Exception as e:
        logger.exception(msg=f"Error: {e}")
        print(f"Error: {e}")
        print(f"See logs for details (at {configuration.log_file})")
        sys.exit(1)
    sys.exit(status)


if __name__ == "__main__":
    main()
