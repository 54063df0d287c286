import logging
import sys
from logging.handlers import RotatingFileHandler
from typing import Optional, Sequence

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from oceanfuse.config import settings  # noqa: E402

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger("oceanfuse")


def configure_logging() -> None:
    """Rotating file log plus stderr, JSON lines when OCEANFUSE_JSON_LOGS is set"""
    settings.setup_directories()
    if settings.json_logs:
        from pythonjsonlogger.json import JsonFormatter
        formatter = JsonFormatter(LOG_FORMAT)
    else:
        formatter = logging.Formatter(LOG_FORMAT)

    handlers = [
        RotatingFileHandler(
            settings.get_log_path(),
            maxBytes=settings.max_log_size,
            backupCount=settings.log_backup_count
        ),
        logging.StreamHandler()
    ]
    for handler in handlers:
        handler.setFormatter(formatter)
    logging.basicConfig(level=settings.log_level.upper(), handlers=handlers, force=True)


def check_requirements():
    """Log versions of the numerical stack"""
    try:
        import joblib
        import numpy as np
        import pandas as pd
        import scipy
        import sklearn
        logger.info(f"NumPy version: {np.__version__}")
        logger.info(f"SciPy version: {scipy.__version__}")
        logger.info(f"Pandas version: {pd.__version__}")
        logger.info(f"Scikit-learn version: {sklearn.__version__}")
        logger.info(f"Joblib version: {joblib.__version__}")
    except ImportError as e:
        logger.error(f"Missing required package: {str(e)}")
        raise


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    configure_logging()
    if settings.is_development:
        check_requirements()
    from oceanfuse.cli.main import main as cli_main
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
