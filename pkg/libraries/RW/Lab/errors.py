"""
Exception hierarchy shared by every stratification-lab library.

Input problems derive from ``ValueError`` so callers that only know the
stdlib contract still catch them; runtime infeasibility (a sample that
cannot support an estimator, a sampler that cannot fill its cells) stays
a plain ``LabError`` so the CLI can map it to its own exit code.
"""

from __future__ import annotations

from typing import Any, Dict, List, Optional, Sequence

__all__ = [
    "LabError",
    "LabInputError",
    "SpecValidationError",
    "GraphError",
    "SizeLimitError",
    "DegenerateCellsError",
    "UnidentifiedStratumError",
    "PositivityError",
    "NonIdentifyingStratificationError",
    "EstimatorInfeasibleError",
    "NumericalError",
]


class LabError(Exception):
    """Base class; ``details()`` feeds the CLI's JSON error object."""

    def details(self) -> Dict[str, Any]:
        return {}


class LabInputError(LabError, ValueError):
    pass


class SpecValidationError(LabInputError):
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path

    def details(self) -> Dict[str, Any]:
        return {"path": self.path} if self.path else {}


class GraphError(LabInputError):
    def __init__(self, message: str, witness: Optional[Sequence[Any]] = None):
        super().__init__(message)
        self.witness: List[Any] = list(witness or [])

    def details(self) -> Dict[str, Any]:
        return {"witness": [list(w) if isinstance(w, tuple) else w for w in self.witness]} if self.witness else {}


class SizeLimitError(LabInputError):
    pass


class DegenerateCellsError(LabError):
    def __init__(self, message: str, level: int, arm: int, attempts: int):
        super().__init__(message)
        self.level = level
        self.arm = arm
        self.attempts = attempts

    def details(self) -> Dict[str, Any]:
        return {"cell": {"x": self.level, "z": self.arm}, "attempts": self.attempts}


class UnidentifiedStratumError(LabError):
    def __init__(self, message: str, stratum: int, arm: int):
        super().__init__(message)
        self.stratum = stratum
        self.arm = arm

    def details(self) -> Dict[str, Any]:
        return {"stratum": self.stratum, "arm": self.arm}


class PositivityError(LabError):
    pass


class NonIdentifyingStratificationError(LabError):
    def __init__(self, message: str, bias: float):
        super().__init__(message)
        self.bias = bias

    def details(self) -> Dict[str, Any]:
        return {"bias": self.bias}


class EstimatorInfeasibleError(LabError):
    def __init__(self, message: str, estimator: str):
        super().__init__(message)
        self.estimator = estimator

    def details(self) -> Dict[str, Any]:
        return {"estimator": self.estimator}


class NumericalError(LabError, ArithmeticError):
    pass
