"""
Estimators keyword library: finite-sample treatment-effect estimators on a
Dataset.

- stratified:  sum_j (N_j/n) (Ybar_{j,1} - Ybar_{j,0})
- unadjusted:  Ybar_{Z=1} - Ybar_{Z=0}
- ipw:         (1/n) sum_i [y_i z_i / q(x_i) - y_i (1 - z_i) / (1 - q(x_i))]
- two_stage:   control means on s1, treated residual means on s2, averaged
               over the marginal of s2
- naive_att_contrast: the unadjusted contrast, tagged as an ATT estimate

Every estimator returns the full per-stratum decomposition; for all
methods ``estimate == sum(row.weight * row.contrast)``.

Scope: GLOBAL
"""

# ──────────────────────────────────────────────────────────────────────────────
# Imports
# ──────────────────────────────────────────────────────────────────────────────
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from robot.api.deco import keyword

from RW.DGP import Dataset, TabularDGP, cell_counts
from RW.Features import Stratification
from RW.Lab import LabInputError, PositivityError, UnidentifiedStratumError

logger = logging.getLogger(__name__)

ROBOT_LIBRARY_SCOPE = "GLOBAL"

__all__ = [
    "Method",
    "StratumRow",
    "EstimateReport",
    "WeightSource",
    "CandidateWeights",
    "stratified",
    "unadjusted",
    "ipw",
    "two_stage",
    "naive_att_contrast",
    "Estimators",
]

WEIGHT_SUM_TOL = 1e-9


class Method(str, enum.Enum):
    STRATIFIED = "stratified"
    UNADJUSTED = "unadjusted"
    IPW = "ipw"
    TWO_STAGE = "two_stage"
    ATT_NAIVE = "att_naive"


@dataclass(frozen=True)
class StratumRow:
    stratum: int
    n: int
    n_treated: int
    n_control: int
    ybar_treated: float
    ybar_control: float
    contrast: float
    weight: float


@dataclass(frozen=True)
class EstimateReport:
    estimate: float
    per_stratum: Tuple[StratumRow, ...]
    method: Method
    n: int

    @property
    def J(self) -> int:
        return len(self.per_stratum)

    def recompute(self) -> float:
        return math.fsum(r.weight * r.contrast for r in self.per_stratum)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method.value,
            "estimate": self.estimate,
            "n": self.n,
            "J": self.J,
            "per_stratum": [
                {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(r).items()}
                for r in self.per_stratum
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> str:
        return f"{self.method.value},{self.estimate!r},{self.J}"


# ===========================================================================
# Candidate weights
# ===========================================================================

class WeightSource(str, enum.Enum):
    TRUE_PI = "true_pi"
    EMPIRICAL_PI = "empirical_pi"
    CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class CandidateWeights:
    q: np.ndarray
    source: WeightSource = WeightSource.CUSTOM

    def __post_init__(self):
        q = np.array(self.q, dtype=float, copy=True)
        if q.ndim != 1 or q.size < 1:
            raise LabInputError("candidate weights must be a nonempty vector")
        bad = np.flatnonzero(~((q > 0) & (q < 1)))
        if bad.size:
            raise PositivityError(f"candidate weights must lie in (0, 1); levels {(bad + 1).tolist()} do not")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "source", WeightSource(self.source))

    @property
    def K(self) -> int:
        return int(self.q.size)

    @classmethod
    def true_pi(cls, dgp: TabularDGP) -> "CandidateWeights":
        return cls(dgp.pi, WeightSource.TRUE_PI)

    @classmethod
    def empirical(cls, d: Dataset, K: int) -> "CandidateWeights":
        """
        pi_hat(x) = N_{x,1} / N_x. Levels absent from ``d`` carry 0.5 and never
        enter an estimate on ``d``.
        """
        counts = cell_counts(d, K)
        n_x = counts.n_x
        occupied = n_x > 0
        q = np.full(K, 0.5)
        q[occupied] = counts.n_xz[occupied, 1] / n_x[occupied]
        degenerate = np.flatnonzero(occupied & ((q == 0) | (q == 1)))
        if degenerate.size:
            x = int(degenerate[0]) + 1
            arm = 1 if q[degenerate[0]] == 0 else 0
            raise PositivityError(f"empirical propensity is {q[degenerate[0]]:g} at level {x}: cell (x={x}, z={arm}) is empty")
        return cls(q, WeightSource.EMPIRICAL_PI)

    @classmethod
    def custom(cls, q: Sequence[float]) -> "CandidateWeights":
        return cls(np.asarray(q, dtype=float), WeightSource.CUSTOM)


# ===========================================================================
# Helpers
# ===========================================================================

def _strata_of(d: Dataset, s: Stratification) -> np.ndarray:
    if d.x.min() < 1 or d.x.max() > s.K:
        raise LabInputError(f"dataset levels span {int(d.x.min())}..{int(d.x.max())}, stratification covers 1..{s.K}")
    return s.apply(d.x)


def _arm_sums(labels: np.ndarray, z: np.ndarray, y: np.ndarray, J: int) -> Tuple[np.ndarray, ...]:
    idx = labels - 1
    treated = z == 1
    n1 = np.bincount(idx[treated], minlength=J)
    n0 = np.bincount(idx[~treated], minlength=J)
    s1 = np.bincount(idx[treated], weights=y[treated], minlength=J)
    s0 = np.bincount(idx[~treated], weights=y[~treated], minlength=J)
    return n1, n0, s1, s0


def _mean_or_nan(total: float, count: int) -> float:
    return float(total / count) if count else float("nan")


def _contrast_report(d: Dataset, labels: np.ndarray, J: int, method: Method) -> EstimateReport:
    n1, n0, s1, s0 = _arm_sums(labels, d.z, d.y, J)
    rows: List[StratumRow] = []
    for j in np.flatnonzero(n1 + n0):
        if n1[j] == 0 or n0[j] == 0:
            arm = 1 if n1[j] == 0 else 0
            raise UnidentifiedStratumError(
                f"unidentified stratum {j + 1}: no {'treated' if arm else 'control'} units among its {n1[j] + n0[j]}",
                int(j) + 1, arm,
            )
        ybar1, ybar0 = s1[j] / n1[j], s0[j] / n0[j]
        rows.append(StratumRow(int(j) + 1, int(n1[j] + n0[j]), int(n1[j]), int(n0[j]),
                               float(ybar1), float(ybar0), float(ybar1 - ybar0), float((n1[j] + n0[j]) / d.n)))
    estimate = math.fsum(r.weight * r.contrast for r in rows)
    return EstimateReport(estimate, tuple(rows), method, d.n)


# ===========================================================================
# Estimators
# ===========================================================================

def stratified(d: Dataset, s: Stratification) -> EstimateReport:
    """
    Stratification estimator. Strata with no observations get weight 0;
    an occupied stratum missing either arm raises UnidentifiedStratumError.
    """
    return _contrast_report(d, _strata_of(d, s), s.J, Method.STRATIFIED)


def unadjusted(d: Dataset) -> EstimateReport:
    return _contrast_report(d, np.ones(d.n, dtype=np.int64), 1, Method.UNADJUSTED)


def naive_att_contrast(d: Dataset) -> EstimateReport:
    """Same arithmetic as ``unadjusted``; consistent for the ATT when mu is unconfounded."""
    return _contrast_report(d, np.ones(d.n, dtype=np.int64), 1, Method.ATT_NAIVE)


def ipw(d: Dataset, weights: CandidateWeights) -> EstimateReport:
    """
    Inverse propensity weighting with candidate propensities ``weights.q``.
    Per level x the contrast is (S_{x,1}/q - S_{x,0}/(1-q)) / N_x, which is
    (pi_hat/q) Ybar_1 - ((1-pi_hat)/(1-q)) Ybar_0 whenever both cells are filled.
    """
    if d.x.min() < 1 or d.x.max() > weights.K:
        raise LabInputError(f"dataset levels span {int(d.x.min())}..{int(d.x.max())}, weights cover 1..{weights.K}")
    q_obs = weights.q[d.x - 1]
    if np.any((q_obs <= 0) | (q_obs >= 1)):
        raise PositivityError("candidate weight at an observed level is 0 or 1")
    y, z = d.y, d.z
    terms = np.where(z == 1, y / q_obs, -y / (1.0 - q_obs))
    estimate = math.fsum(terms) / d.n

    n1, n0, s1, s0 = _arm_sums(d.x, z, y, weights.K)
    rows = []
    for x in np.flatnonzero(n1 + n0):
        n_x = n1[x] + n0[x]
        q = weights.q[x]
        rows.append(StratumRow(
            int(x) + 1, int(n_x), int(n1[x]), int(n0[x]),
            _mean_or_nan(s1[x], n1[x]), _mean_or_nan(s0[x], n0[x]),
            float((s1[x] / q - s0[x] / (1.0 - q)) / n_x), float(n_x / d.n),
        ))
    return EstimateReport(estimate, tuple(rows), Method.IPW, d.n)


def two_stage(
    d: Dataset,
    s1: Stratification,
    s2: Stratification,
    marginal_weights: Optional[Sequence[float]] = None,
) -> EstimateReport:
    """
    1. baseline mu(s1) from control means per s1 stratum;
    2. residual R = Y - mu(s1(X)) for treated units;
    3. E(R | Z=1, s2) from treated means per s2 stratum;
    4. average over ``marginal_weights`` on s2 (empirical N_k/n when omitted).

    Rows report, per weighted s2 stratum, the treated mean outcome, the mean
    fitted baseline of those treated units, and their difference.
    """
    l1 = _strata_of(d, s1)
    l2 = _strata_of(d, s2)
    treated = d.z == 1

    c_n = np.bincount(l1[~treated] - 1, minlength=s1.J)
    c_sum = np.bincount(l1[~treated] - 1, weights=d.y[~treated], minlength=s1.J)
    occupied1 = np.bincount(l1 - 1, minlength=s1.J) > 0
    missing = np.flatnonzero(occupied1 & (c_n == 0))
    if missing.size:
        j = int(missing[0]) + 1
        raise UnidentifiedStratumError(f"unidentified stratum {j} of s1: no control units to estimate its baseline", j, 0)
    baseline = np.divide(c_sum, c_n, out=np.zeros(s1.J), where=c_n > 0)

    fitted = baseline[l1[treated] - 1]
    k_treated = l2[treated] - 1
    t_n = np.bincount(k_treated, minlength=s2.J)
    t_y = np.bincount(k_treated, weights=d.y[treated], minlength=s2.J)
    t_fit = np.bincount(k_treated, weights=fitted, minlength=s2.J)
    counts2 = np.bincount(l2 - 1, minlength=s2.J)

    if marginal_weights is None:
        w = counts2 / d.n
    else:
        w = np.asarray(marginal_weights, dtype=float)
        if w.shape != (s2.J,):
            raise LabInputError(f"marginal_weights has length {w.size}, s2 has {s2.J} strata")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise LabInputError("marginal_weights must be a probability vector")

    rows = []
    for k in np.flatnonzero(w > 0):
        if t_n[k] == 0:
            raise UnidentifiedStratumError(
                f"unidentified stratum {k + 1} of s2: no treated units to estimate its residual mean", int(k) + 1, 1,
            )
        ybar1, base = t_y[k] / t_n[k], t_fit[k] / t_n[k]
        rows.append(StratumRow(int(k) + 1, int(counts2[k]), int(t_n[k]), int(counts2[k] - t_n[k]),
                               float(ybar1), float(base), float(ybar1 - base), float(w[k])))
    estimate = math.fsum(r.weight * r.contrast for r in rows)
    return EstimateReport(estimate, tuple(rows), Method.TWO_STAGE, d.n)


# ──────────────────────────────────────────────────────────────────────────────
#  Robot keywords
# ──────────────────────────────────────────────────────────────────────────────

class Estimators:
    """Robot library exposing the estimators on a Dataset."""

    ROBOT_LIBRARY_SCOPE = "GLOBAL"

    @keyword("Stratified Estimate")
    def stratified_estimate(self, dataset: Dataset, labels: Sequence[int]) -> float:
        return stratified(dataset, Stratification.from_labels(labels)).estimate

    @keyword("Unadjusted Estimate")
    def unadjusted_estimate(self, dataset: Dataset) -> float:
        return unadjusted(dataset).estimate

    @keyword("IPW Estimate")
    def ipw_estimate(self, dataset: Dataset, K: int, q: Optional[Sequence[float]] = None) -> float:
        """Empirical propensities unless ``q`` is given."""
        weights = CandidateWeights.empirical(dataset, int(K)) if q is None else CandidateWeights.custom(q)
        return ipw(dataset, weights).estimate

    @keyword("Two Stage Estimate")
    def two_stage_estimate(self, dataset: Dataset, s1: Sequence[int], s2: Sequence[int]) -> float:
        return two_stage(dataset, Stratification.from_labels(s1), Stratification.from_labels(s2)).estimate
