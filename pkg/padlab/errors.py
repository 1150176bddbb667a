import sys
import uuid
from typing import Optional

import typer
from rich.console import Console

EXIT_FAILURE = 1
EXIT_CONFIG = 2


class BaseError(Exception):
    """Base class for custom exceptions."""

    def __init__(
        self,
        exit_code: int,
        title: str,
        detail: str,
        context: Optional[str] = None,
    ):
        super().__init__(detail)
        self.exit_code = exit_code
        self.title = title
        self.detail = detail
        self.context = context

    def __str__(self):
        if self.context:
            return f"{self.detail} ({self.context})"
        return self.detail


class ConfigError(BaseError):
    """Config file could not be parsed or does not match the schema."""

    def __init__(self, detail: str = "Invalid configuration", context: Optional[str] = None):
        super().__init__(
            exit_code=EXIT_CONFIG,
            title="config_error",
            detail=detail,
            context=context,
        )


class ValidationError(BaseError):
    """An operation was called outside its preconditions."""

    def __init__(self, detail: str = "Invalid input", context: Optional[str] = None):
        super().__init__(
            exit_code=EXIT_FAILURE,
            title="validation_error",
            detail=detail,
            context=context,
        )


class NotFoundError(BaseError):
    """Custom exception for missing files, sites or experiments."""

    def __init__(self, detail: str, context: Optional[str] = None):
        super().__init__(
            exit_code=EXIT_FAILURE,
            title="not_found",
            detail=detail,
            context=context,
        )


class AlreadyExistsError(BaseError):
    """Output would overwrite an earlier run."""

    def __init__(self, detail: str, context: Optional[str] = None):
        super().__init__(
            exit_code=EXIT_FAILURE,
            title="already_exists",
            detail=detail,
            context=context,
        )


class ExportError(BaseError):
    """Reading or writing an artifact failed."""

    def __init__(self, detail: str, context: Optional[str] = None):
        super().__init__(
            exit_code=EXIT_FAILURE,
            title="export_error",
            detail=detail,
            context=context,
        )


def format_error_response(exc: Exception, status: int) -> dict:
    return {
        "result": "error",
        "errors": [
            {
                "id": str(uuid.uuid4()),
                "status": status,
                "title": exc.title if hasattr(exc, "title") else "internal_error",
                "detail": str(exc.detail) if hasattr(exc, "detail") else str(exc),
                "context": exc.context if hasattr(exc, "context") else None,
            }
        ],
    }


def register_exceptions(app: typer.Typer):
    """Wrap a CLI app so custom exceptions become an error record and an exit code."""
    console = Console(stderr=True)

    def entry_point(*args, **kwargs):
        try:
            return app(*args, **kwargs)
        except BaseError as exc:
            console.print_json(data=format_error_response(exc, exc.exit_code))
            sys.exit(exc.exit_code)

    return entry_point
