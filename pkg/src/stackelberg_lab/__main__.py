import sys

from stackelberg_lab import logger
from stackelberg_lab.cli import app

if __name__ == "__main__":
    try:
        app()
    except KeyboardInterrupt:
        logger.info("Interrupted, shutting down...")
    except Exception as e:
        logger.exception("Run encountered an error: %s", e)
        sys.exit(1)
