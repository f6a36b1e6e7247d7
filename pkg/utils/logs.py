import logging
import os

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str | None = None) -> None:
    level_name = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger()
    if not any(getattr(h, "_superindex", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._superindex = True
        root.addHandler(handler)
    root.setLevel(getattr(logging, level_name, logging.INFO))
    # werkzeug/waitress request logs are noise at INFO
    logging.getLogger("werkzeug").setLevel(logging.WARNING)
