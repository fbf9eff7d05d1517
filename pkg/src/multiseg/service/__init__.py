"""FastAPI service wrapping the experiment harness."""

from .routes import create_app

__all__ = ["create_app"]
