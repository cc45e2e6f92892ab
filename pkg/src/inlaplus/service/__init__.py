"""Service layer: pydantic I/O models, handlers, and the FastAPI app."""

from .app import app, create_app  # noqa: F401
