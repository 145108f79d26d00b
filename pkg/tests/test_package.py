"""Tests for package-level metadata and public API surface."""

from importlib.metadata import version

import edge_dedup as ed
from edge_dedup import (
    ConfigError,
    DecodingError,
    DedupError,
    SessionAbortedError,
    StorageError,
)
from edge_dedup import types


def test_version_matches_installed_metadata():
    """__version__ is single-sourced from the installed package metadata."""
    assert ed.__version__ == version("edge-dedup")
    assert ed.__version__  # non-empty


def test_exception_hierarchy_exported():
    """Exported exceptions subclass DedupError."""
    exported = {"DedupError", "DecodingError", "StorageError", "ConfigError", "SessionAbortedError"}
    assert exported <= set(ed.__all__)

    for exc in (DecodingError, StorageError, ConfigError, SessionAbortedError):
        assert issubclass(exc, DedupError)
    assert issubclass(DedupError, Exception)


def test_every_library_error_is_a_dedup_error():
    """Every *Error class in edge_dedup.types derives from DedupError."""
    errors = [
        obj
        for name, obj in vars(types).items()
        if name.endswith("Error") and isinstance(obj, type)
    ]
    assert len(errors) > 10
    for exc in errors:
        assert issubclass(exc, DedupError)


def test_all_names_are_importable():
    """Everything advertised in __all__ is importable from the package.

    The CI environment installs the ``[sql]`` extra, so the lazy
    SQLAlchemyChunkStore export resolves here like the eager names.
    """
    for name in ed.__all__:
        assert getattr(ed, name) is not None, f"{name} listed in __all__ but not importable"
