"""
DGP keyword library: finite-support discrete-covariate causal
data-generating processes

    X ~ Categorical(p) on {1..K}
    Z ~ Bernoulli(pi(X))
    Y = mu(X) + upsilon_X + (tau(X) + delta_X) * Z

with per-level mean-zero noise for the baseline (upsilon) and the effect
(delta), drawn independently per observation.

Scope: GLOBAL
"""

# ──────────────────────────────────────────────────────────────────────────────
# Imports
# ──────────────────────────────────────────────────────────────────────────────
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from robot.api.deco import keyword

from RW.Lab import (
    DegenerateCellsError,
    LabInputError,
    SpecValidationError,
    import_lab_variable,
    load_yaml_document,
    robot_log,
    warning_log,
)

logger = logging.getLogger(__name__)

ROBOT_LIBRARY_SCOPE = "GLOBAL"

__all__ = [
    "NoiseKind",
    "NoiseSpec",
    "CovariateSpace",
    "TabularDGP",
    "ConditionalMoments",
    "Dataset",
    "CellCounts",
    "sample",
    "sample_twins",
    "cell_counts",
    "conditional_moments",
    "dgp_from_mapping",
    "load_dgp",
    "to_seed",
    "DGP",
]

# ──────────────────────────────────────────────────────────────────────────────
# Constants
# ──────────────────────────────────────────────────────────────────────────────
MASK64 = (1 << 64) - 1
PROBABILITY_TOL = 1e-12
TWIN_DESIGNS = ("complete", "pair")


def to_seed(seed: int) -> int:
    """Map any Python int onto the unsigned 64-bit seed space."""
    return int(seed) & MASK64


# ===========================================================================
# Noise
# ===========================================================================

class NoiseKind(str, enum.Enum):
    NORMAL = "normal"
    UNIFORM = "uniform"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class NoiseSpec:
    """Mean-zero noise: Normal(0, sd), Uniform[-h, h] or the point mass at 0."""

    kind: NoiseKind
    scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.kind is NoiseKind.DEGENERATE:
            object.__setattr__(self, "scale", 0.0)
        elif not np.isfinite(self.scale) or self.scale < 0:
            raise LabInputError(f"{self.kind.value} noise needs a finite nonnegative scale, got {self.scale!r}")

    @classmethod
    def normal(cls, sd: float) -> "NoiseSpec":
        return cls(NoiseKind.NORMAL, float(sd))

    @classmethod
    def uniform(cls, halfwidth: float) -> "NoiseSpec":
        return cls(NoiseKind.UNIFORM, float(halfwidth))

    @classmethod
    def degenerate(cls) -> "NoiseSpec":
        return cls(NoiseKind.DEGENERATE)

    @property
    def variance(self) -> float:
        if self.kind is NoiseKind.NORMAL:
            return self.scale ** 2
        if self.kind is NoiseKind.UNIFORM:
            # width 2h
            return (2.0 * self.scale) ** 2 / 12.0
        return 0.0

    @classmethod
    def from_mapping(cls, raw: Any, where: str = "noise") -> "NoiseSpec":
        if isinstance(raw, NoiseSpec):
            return raw
        if raw is None or raw == "degenerate":
            return cls.degenerate()
        if not isinstance(raw, Mapping) or "kind" not in raw:
            raise SpecValidationError("noise must be a mapping with a 'kind'", path=where)
        try:
            kind = NoiseKind(str(raw["kind"]).lower())
        except ValueError:
            raise SpecValidationError(
                f"unknown noise kind {raw['kind']!r}; expected one of {[k.value for k in NoiseKind]}", path=where
            ) from None
        if kind is NoiseKind.NORMAL:
            return cls.normal(_number(raw.get("sd"), f"{where}.sd"))
        if kind is NoiseKind.UNIFORM:
            return cls.uniform(_number(raw.get("halfwidth"), f"{where}.halfwidth"))
        return cls.degenerate()

    def to_dict(self) -> Dict[str, Any]:
        if self.kind is NoiseKind.NORMAL:
            return {"kind": "normal", "sd": self.scale}
        if self.kind is NoiseKind.UNIFORM:
            return {"kind": "uniform", "halfwidth": self.scale}
        return {"kind": "degenerate"}


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecValidationError(f"expected a number, got {value!r}", path=where)
    return float(value)


def _frozen(values: Sequence[float], dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ===========================================================================
# Covariate space and DGP
# ===========================================================================

@dataclass(frozen=True, eq=False)
class CovariateSpace:
    K: int
    marginal: np.ndarray

    def __post_init__(self):
        if isinstance(self.K, bool) or int(self.K) != self.K or self.K < 1:
            raise LabInputError(f"K must be a positive integer, got {self.K!r}")
        marginal = _frozen(self.marginal)
        if marginal.shape != (self.K,):
            raise LabInputError(f"marginal has length {marginal.size}, expected K={self.K}")
        if np.any(~np.isfinite(marginal)) or np.any(marginal < 0):
            raise LabInputError("marginal entries must be finite and nonnegative")
        if abs(marginal.sum() - 1.0) > PROBABILITY_TOL:
            raise LabInputError(f"marginal sums to {marginal.sum()!r}, not 1")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "marginal", marginal)

    @classmethod
    def uniform(cls, K: int) -> "CovariateSpace":
        return cls(K, np.full(K, 1.0 / K))


@dataclass(frozen=True, eq=False)
class ConditionalMoments:
    """K x 2 tables indexed [x-1, z] of E(Y|x,z) and Var(Y|x,z)."""

    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True, eq=False)
class TabularDGP:
    space: CovariateSpace
    pi: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    upsilon: Tuple[NoiseSpec, ...]
    delta: Tuple[NoiseSpec, ...]
    name: str = ""

    def __post_init__(self):
        K = self.space.K
        for attr in ("pi", "mu", "tau"):
            arr = _frozen(getattr(self, attr))
            if arr.shape != (K,):
                raise LabInputError(f"{attr} has length {arr.size}, expected K={K}")
            if np.any(~np.isfinite(arr)):
                raise LabInputError(f"{attr} must be finite")
            object.__setattr__(self, attr, arr)
        if np.any(self.pi <= 0) or np.any(self.pi >= 1):
            bad = [int(i) + 1 for i in np.flatnonzero((self.pi <= 0) | (self.pi >= 1))]
            raise LabInputError(f"positivity violated: pi must lie in (0, 1), levels {bad}")
        for attr in ("upsilon", "delta"):
            raw = getattr(self, attr)
            specs = (raw,) * K if isinstance(raw, NoiseSpec) else tuple(raw)
            if len(specs) != K:
                raise LabInputError(f"{attr} has {len(specs)} noise specs, expected K={K}")
            object.__setattr__(self, attr, specs)

    @classmethod
    def build(
        cls,
        marginal: Sequence[float],
        pi: Sequence[float],
        mu: Sequence[float],
        tau: Sequence[float],
        upsilon: Union[NoiseSpec, Sequence[NoiseSpec]] = NoiseSpec.degenerate(),
        delta: Union[NoiseSpec, Sequence[NoiseSpec]] = NoiseSpec.degenerate(),
        name: str = "",
    ) -> "TabularDGP":
        space = CovariateSpace(len(marginal), np.asarray(marginal, dtype=float))
        return cls(space, np.asarray(pi, dtype=float), np.asarray(mu, dtype=float),
                   np.asarray(tau, dtype=float), upsilon, delta, name)

    @property
    def K(self) -> int:
        return self.space.K

    @property
    def marginal(self) -> np.ndarray:
        return self.space.marginal

    def upsilon_variance(self) -> np.ndarray:
        return np.array([u.variance for u in self.upsilon])

    def delta_variance(self) -> np.ndarray:
        return np.array([d.variance for d in self.delta])

    def conditional_moments(self) -> ConditionalMoments:
        return conditional_moments(self)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K": self.K,
            "marginal": self.marginal.tolist(),
            "pi": self.pi.tolist(),
            "mu": self.mu.tolist(),
            "tau": self.tau.tolist(),
            "upsilon": [u.to_dict() for u in self.upsilon],
            "delta": [d.to_dict() for d in self.delta],
        }


def conditional_moments(dgp: TabularDGP) -> ConditionalMoments:
    """
    Cell moments at the finest level:
    mu_{x,0} = mu(x), mu_{x,1} = mu(x) + tau(x),
    sigma2_{x,0} = Var(upsilon_x), sigma2_{x,1} = Var(upsilon_x) + Var(delta_x).
    """
    mean = np.column_stack([dgp.mu, dgp.mu + dgp.tau])
    v_up = dgp.upsilon_variance()
    variance = np.column_stack([v_up, v_up + dgp.delta_variance()])
    mean.setflags(write=False)
    variance.setflags(write=False)
    return ConditionalMoments(mean=mean, variance=variance)


# ===========================================================================
# Data
# ===========================================================================

@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    ite: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        x = _frozen(self.x, dtype=np.int64)
        z = _frozen(self.z, dtype=np.int8)
        y = _frozen(self.y, dtype=float)
        if x.ndim != 1 or x.shape != z.shape or x.shape != y.shape:
            raise LabInputError(f"x, z, y must be vectors of equal length, got {x.shape}, {z.shape}, {y.shape}")
        if x.size < 1:
            raise LabInputError("a dataset needs at least one observation")
        if np.any((z != 0) & (z != 1)):
            raise LabInputError("z must be binary")
        if x.min() < 1:
            raise LabInputError(f"covariate levels are numbered from 1, got {int(x.min())}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)
        if self.ite is not None:
            ite = _frozen(self.ite, dtype=float)
            if ite.shape != x.shape:
                raise LabInputError("ite must have the same length as x")
            object.__setattr__(self, "ite", ite)

    @property
    def n(self) -> int:
        return int(self.x.size)

    def with_outcome(self, y: np.ndarray) -> "Dataset":
        return Dataset(self.x, self.z, y, self.ite)

    def sate(self) -> Optional[float]:
        return None if self.ite is None else float(self.ite.mean())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.x, "z": self.z.astype(np.int64), "y": self.y})

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path


@dataclass(frozen=True, eq=False)
class CellCounts:
    """K x 2 table of N_{x,z}, columns ordered [z=0, z=1]."""

    n_xz: np.ndarray

    @property
    def n_x(self) -> np.ndarray:
        return self.n_xz.sum(axis=1)

    @property
    def n(self) -> int:
        return int(self.n_xz.sum())

    @property
    def K(self) -> int:
        return int(self.n_xz.shape[0])

    def empty_cells(self) -> List[Tuple[int, int]]:
        """(x, z) pairs, 1-based x, with no observations."""
        rows, cols = np.nonzero(self.n_xz == 0)
        return [(int(r) + 1, int(c)) for r, c in zip(rows, cols)]

    def is_full(self) -> bool:
        return bool(np.all(self.n_xz > 0))


def cell_counts(d: Dataset, K: int) -> CellCounts:
    if d.x.min() < 1 or d.x.max() > K:
        bad = int(d.x[(d.x < 1) | (d.x > K)][0])
        raise LabInputError(f"covariate level {bad} outside 1..{K}")
    flat = np.bincount((d.x - 1) * 2 + d.z, minlength=2 * K)
    table = flat.reshape(K, 2)
    table.setflags(write=False)
    return CellCounts(table)


# ===========================================================================
# Sampling
# ===========================================================================

def _noise_tables(specs: Tuple[NoiseSpec, ...]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    is_normal = np.array([s.kind is NoiseKind.NORMAL for s in specs])
    is_uniform = np.array([s.kind is NoiseKind.UNIFORM for s in specs])
    return is_normal, is_uniform, np.array([s.scale for s in specs])


def _draw_noise(rng: np.random.Generator, specs: Tuple[NoiseSpec, ...], x0: np.ndarray) -> np.ndarray:
    # both streams are always drawn so the generator advances the same way for every spec
    is_normal, is_uniform, scales = _noise_tables(specs)
    gauss = rng.standard_normal(x0.size)
    unif = rng.random(x0.size)
    scale = scales[x0]
    return np.where(is_normal[x0], scale * gauss, np.where(is_uniform[x0], scale * (2.0 * unif - 1.0), 0.0))


def _outcomes(rng: np.random.Generator, dgp: TabularDGP, x0: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    upsilon = _draw_noise(rng, dgp.upsilon, x0)
    delta = _draw_noise(rng, dgp.delta, x0)
    ite = dgp.tau[x0] + delta
    y = dgp.mu[x0] + upsilon + ite * z
    return y, ite


def _draw(rng: np.random.Generator, dgp: TabularDGP, n: int) -> Dataset:
    x0 = rng.choice(dgp.K, size=n, p=dgp.marginal)
    z = (rng.random(n) < dgp.pi[x0]).astype(np.int8)
    y, ite = _outcomes(rng, dgp, x0, z)
    return Dataset(x0 + 1, z, y, ite)


def sample(
    dgp: TabularDGP,
    n: int,
    seed: int,
    require_full_cells: bool = False,
    max_attempts: Optional[int] = None,
) -> Dataset:
    """
    Draw ``n`` i.i.d. observations.

    With ``require_full_cells`` whole datasets are redrawn from the same
    generator until every (x, z) cell is occupied, so the result follows the
    i.i.d. law truncated to full cells.

    :raises DegenerateCellsError: the attempt cap was reached; the error names
        an empty cell of the last attempt.
    """
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise LabInputError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    rng = np.random.default_rng(to_seed(seed))
    if not require_full_cells:
        return _draw(rng, dgp, n)

    if n < 2 * dgp.K:
        raise LabInputError(f"require_full_cells needs n >= 2K = {2 * dgp.K}, got n={n}")
    if np.any(dgp.marginal == 0):
        level = int(np.flatnonzero(dgp.marginal == 0)[0]) + 1
        raise DegenerateCellsError(f"level {level} has zero marginal mass; its cells can never fill", level, 0, 0)

    cap = max(1, max_attempts if max_attempts is not None else import_lab_variable("RW_LAB_MAX_ATTEMPTS"))
    for attempt in range(1, cap + 1):
        d = _draw(rng, dgp, n)
        counts = cell_counts(d, dgp.K)
        if counts.is_full():
            if attempt > 1:
                logger.debug("full-cell dataset after %d attempts (n=%d, K=%d)", attempt, n, dgp.K)
            return d
    level, arm = counts.empty_cells()[0]
    warning_log("Rejection sampling hit the attempt cap", {"n": n, "K": dgp.K, "attempts": cap, "cell": [level, arm]})
    raise DegenerateCellsError(
        f"degenerate cells: no full-cell dataset in {cap} attempts; cell (x={level}, z={arm}) stayed empty",
        level, arm, cap,
    )


def sample_twins(dgp: TabularDGP, pairs: int, seed: int, design: str = "pair") -> Dataset:
    """
    Draw ``pairs`` twin pairs; both twins share X drawn from the marginal.

    ``complete``: each twin treated independently with probability pi(x).
    ``pair``: exactly one twin per pair treated, chosen uniformly.
    Observations are laid out pair by pair (rows 2i, 2i+1).
    """
    if design not in TWIN_DESIGNS:
        raise LabInputError(f"unknown twin design {design!r}; expected one of {list(TWIN_DESIGNS)}")
    if isinstance(pairs, bool) or int(pairs) != pairs or pairs < 1:
        raise LabInputError(f"pairs must be a positive integer, got {pairs!r}")
    rng = np.random.default_rng(to_seed(seed))
    x0 = np.repeat(rng.choice(dgp.K, size=int(pairs), p=dgp.marginal), 2)
    if design == "complete":
        z = (rng.random(x0.size) < dgp.pi[x0]).astype(np.int8)
    else:
        first = (rng.random(int(pairs)) < 0.5).astype(np.int8)
        z = np.column_stack([first, 1 - first]).ravel()
    y, ite = _outcomes(rng, dgp, x0, z)
    return Dataset(x0 + 1, z, y, ite)


# ===========================================================================
# Config loading
# ===========================================================================

def _vector(raw: Any, K: int, where: str) -> np.ndarray:
    if not isinstance(raw, (list, tuple)):
        raise SpecValidationError("expected a list of numbers", path=where)
    if len(raw) != K:
        raise SpecValidationError(f"expected {K} entries, got {len(raw)}", path=where)
    return np.array([_number(v, f"{where}[{i}]") for i, v in enumerate(raw)])


def _noise_list(raw: Any, K: int, where: str) -> Tuple[NoiseSpec, ...]:
    if isinstance(raw, list):
        if len(raw) != K:
            raise SpecValidationError(f"expected {K} noise specs, got {len(raw)}", path=where)
        return tuple(NoiseSpec.from_mapping(r, f"{where}[{i}]") for i, r in enumerate(raw))
    return (NoiseSpec.from_mapping(raw, where),) * K


def dgp_from_mapping(raw: Mapping[str, Any], where: str = "dgp") -> TabularDGP:
    """Build a TabularDGP from the ``dgp`` section of a spec document."""
    if not isinstance(raw, Mapping):
        raise SpecValidationError("expected a mapping", path=where)
    K = raw.get("K")
    if isinstance(K, bool) or not isinstance(K, int) or K < 1:
        raise SpecValidationError(f"K must be a positive integer, got {K!r}", path=f"{where}.K")
    missing = [key for key in ("marginal", "pi", "mu", "tau") if key not in raw]
    if missing:
        raise SpecValidationError(f"missing keys {missing}", path=where)
    try:
        return TabularDGP(
            CovariateSpace(K, _vector(raw["marginal"], K, f"{where}.marginal")),
            _vector(raw["pi"], K, f"{where}.pi"),
            _vector(raw["mu"], K, f"{where}.mu"),
            _vector(raw["tau"], K, f"{where}.tau"),
            _noise_list(raw.get("upsilon"), K, f"{where}.upsilon"),
            _noise_list(raw.get("delta"), K, f"{where}.delta"),
            str(raw.get("name", "")),
        )
    except SpecValidationError:
        raise
    except LabInputError as e:
        raise SpecValidationError(str(e), path=where) from e


def load_dgp(source: Union[str, Path, Dict[str, Any]]) -> TabularDGP:
    doc = load_yaml_document(source)
    if "dgp" not in doc:
        raise SpecValidationError("missing 'dgp' section", path=str(source) if not isinstance(source, dict) else None)
    return dgp_from_mapping(doc["dgp"])


# ──────────────────────────────────────────────────────────────────────────────
#  Robot keywords
# ──────────────────────────────────────────────────────────────────────────────

class DGP:
    """Robot library exposing DGP loading, sampling and CSV export."""

    ROBOT_LIBRARY_SCOPE = "GLOBAL"

    @keyword("Load DGP")
    def load(self, spec_path: str) -> TabularDGP:
        dgp = load_dgp(spec_path)
        robot_log(f"Loaded DGP with K={dgp.K} from {spec_path}")
        return dgp

    @keyword("Sample Dataset")
    def sample_dataset(self, dgp: TabularDGP, n: int, seed: int, require_full_cells: bool = True) -> Dataset:
        return sample(dgp, int(n), int(seed), require_full_cells=bool(require_full_cells))

    @keyword("Conditional Moments")
    def moments(self, dgp: TabularDGP) -> Dict[str, List[List[float]]]:
        m = conditional_moments(dgp)
        return {"mean": m.mean.tolist(), "variance": m.variance.tolist()}

    @keyword("Write Dataset CSV")
    def write_csv(self, dataset: Dataset, path: str) -> str:
        return str(dataset.to_csv(path))


# ──────────────────────────────────────────────────────────────────────────────
#  CLI helper for ad-hoc testing
# ──────────────────────────────────────────────────────────────────────────────

if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser(description="Draw a dataset from a DGP spec and print it as CSV")
    ap.add_argument("spec", type=Path, help="Path to a YAML spec with a 'dgp' section")
    ap.add_argument("-n", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ns = ap.parse_args()

    print(sample(load_dgp(ns.spec), ns.n, ns.seed).to_frame().to_csv(index=False), end="")
