"""Logging setup shared by the CLI and library modules."""

import logging
import os

from dotenv import load_dotenv
from rich.logging import RichHandler

load_dotenv()

DEFAULT_LEVEL = os.environ.get("PADLAB_LOG_LEVEL", "WARNING")


def configure_logging(level: str | int | None = None) -> None:
    """Route every padlab logger through a single rich handler."""
    root = logging.getLogger("padlab")
    root.setLevel(level or DEFAULT_LEVEL)
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        handler = RichHandler(show_path=False, rich_tracebacks=True)
        handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
        root.addHandler(handler)
    root.propagate = False


def kv(**fields) -> str:
    """Render context as greppable key=value pairs."""
    return " ".join(f"{k}={v}" for k, v in fields.items())
