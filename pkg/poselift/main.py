# poselift/main.py
import logging
import sys

from poselift.core.config import LOG_LEVEL

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def main() -> None:
    from poselift.api.cli import run

    sys.exit(run())


if __name__ == "__main__":
    main()
