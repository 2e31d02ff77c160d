"""
Shared helpers for the stratification-lab keyword libraries: logging that
works both inside and outside a Robot run, environment-driven tunables and
YAML spec loading.

Scope: GLOBAL
"""

# ──────────────────────────────────────────────────────────────────────────────
# Imports
# ──────────────────────────────────────────────────────────────────────────────
from __future__ import annotations

import os
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional, TypeVar, Union

import yaml

from .errors import LabInputError, SpecValidationError

# ──────────────────────────────────────────────────────────────────────────────
# Logging guarantees  – creates both Robot and Python loggers safely.
# ──────────────────────────────────────────────────────────────────────────────
try:
    from robot.api import logger as robot_logger
except ImportError:
    robot_logger = logging.getLogger("robot_fallback")

try:
    from robot.libraries.BuiltIn import BuiltIn, RobotNotRunningError
except ImportError:  # pragma: no cover - robotframework is a hard dependency
    BuiltIn = None
    RobotNotRunningError = RuntimeError

platform_logger = logging.getLogger("stratification_lab")

__all__ = [
    "robot_logger",
    "platform_logger",
    "warning_log",
    "info_log",
    "robot_log",
    "import_lab_variable",
    "lab_settings",
    "load_yaml_document",
    "SUPPORTED_SCHEMA_VERSIONS",
]


def _stringify(details: tuple) -> str:
    return " | ".join(json.dumps(d, default=str) if isinstance(d, (dict, list)) else str(d)
                      for d in details)


def warning_log(msg: str, *details: Any) -> None:
    try:
        robot_logger.warn(msg)
    except AttributeError:
        robot_logger.info(f"WARNING: {msg}")

    if details:
        platform_logger.warning("%s – %s", msg, _stringify(details))
    else:
        platform_logger.warning("%s", msg)


def info_log(msg: str, *details: Any) -> None:
    robot_logger.info(msg)
    if details:
        platform_logger.info("%s – %s", msg, _stringify(details))
    else:
        platform_logger.info("%s", msg)


def robot_log(msg: str, level: str = "INFO") -> None:
    """BuiltIn().log when a Robot run is active, platform logger otherwise."""
    if BuiltIn is not None:
        try:
            BuiltIn().log(msg, level=level)
            return
        except RobotNotRunningError:
            pass
    platform_logger.log(_LEVELS.get(level.upper(), logging.INFO), msg)


_LEVELS = {"TRACE": logging.DEBUG, "DEBUG": logging.DEBUG, "INFO": logging.INFO,
           "WARN": logging.WARNING, "ERROR": logging.ERROR}


# ──────────────────────────────────────────────────────────────────────────────
# Environment-driven tunables
# ──────────────────────────────────────────────────────────────────────────────
T = TypeVar("T")

LAB_DEFAULTS: Dict[str, Any] = {
    "RW_LAB_MAX_STATES": 10_000_000,
    "RW_LAB_MAX_ATTEMPTS": 1000,
    "RW_LAB_MC_DRAWS": 200_000,
    "RW_LAB_THREADS": 1,
}


def import_lab_variable(varname: str, default: Optional[T] = None,
                        cast: Callable[[str], T] = int) -> T:
    """
    Read a lab tunable from the environment.

    :param varname: environment variable name, e.g. ``RW_LAB_MAX_STATES``.
    :param default: value when unset; falls back to ``LAB_DEFAULTS``.
    :param cast: converter applied to the raw string.
    """
    if default is None:
        default = LAB_DEFAULTS.get(varname)
    raw = os.getenv(varname)
    if raw is None or raw.strip() == "":
        if default is None:
            raise ImportError(f"{varname} is not set and has no default")
        return default
    try:
        return cast(raw.strip().replace("_", ""))
    except ValueError as e:
        raise LabInputError(f"{varname}={raw!r} is not a valid {getattr(cast, '__name__', 'value')}") from e


def lab_settings() -> Dict[str, int]:
    return {name: import_lab_variable(name) for name in LAB_DEFAULTS}


# ──────────────────────────────────────────────────────────────────────────────
# YAML documents
# ──────────────────────────────────────────────────────────────────────────────
SUPPORTED_SCHEMA_VERSIONS = (1,)


def load_yaml_document(source: Union[str, Path, Dict[str, Any]]) -> Dict[str, Any]:
    """
    Load a versioned YAML spec from a path, a YAML string or an already
    parsed mapping, and check its ``schema_version``.
    """
    if isinstance(source, dict):
        doc = source
        where = "<mapping>"
    else:
        # strings with a newline are YAML text, anything else is a path
        if isinstance(source, Path) or "\n" not in source:
            path = Path(source)
            where = str(path)
            if not path.is_file():
                raise SpecValidationError("spec file not found", path=where)
            text = path.read_text(encoding="utf-8")
        else:
            text = source
            where = "<string>"
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise SpecValidationError(f"invalid YAML: {e}", path=where) from e

    if not isinstance(doc, dict):
        raise SpecValidationError("top level must be a mapping", path=where)
    version = doc.get("schema_version")
    if version not in SUPPORTED_SCHEMA_VERSIONS:
        raise SpecValidationError(
            f"unsupported schema_version {version!r}; expected one of {list(SUPPORTED_SCHEMA_VERSIONS)}",
            path=where,
        )
    return doc
