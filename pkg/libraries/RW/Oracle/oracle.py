"""
Oracle keyword library: population and finite-sample ground truth for a
known TabularDGP.

Finite-sample quantities are taken over the i.i.d. sampling law truncated
to "every (x, z) cell occupied", the same law ``RW.DGP.sample`` produces
with ``require_full_cells``. Given the finest counts N_{x,z} the
stratification estimator has

    E[est | N] = sum_j (N_j/n) (M_{j,1}/N_{j,1} - M_{j,0}/N_{j,0}),
    V[est | N] = sum_j (N_j/n)^2 (V_{j,1}/N_{j,1}^2 + V_{j,0}/N_{j,0}^2),

with M_{j,z} = sum_{x in j} N_{x,z} mu_{x,z} and V_{j,z} = sum_{x in j}
N_{x,z} sigma2_{x,z}; the variance is E[V[est|N]] + V(E[est|N]). When the
moments are constant inside a stratum these reduce to the stratum-level
formulas built from law-of-total-variance moments.

Scope: GLOBAL
"""

# ──────────────────────────────────────────────────────────────────────────────
# Imports
# ──────────────────────────────────────────────────────────────────────────────
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from robot.api.deco import keyword
from scipy.optimize import bisect
from scipy.stats import norm

from RW.DGP import NoiseKind, TabularDGP, conditional_moments, to_seed
from RW.Features import (
    Stratification,
    StrataRelation,
    level_key,
    relation,
    stratum_marginal,
)
from RW.Lab import (
    LabInputError,
    NonIdentifyingStratificationError,
    NumericalError,
    UnidentifiedStratumError,
    import_lab_variable,
    info_log,
    robot_log,
)

from .truncated_multinomial import (
    check_state_space,
    composition_log_weights,
    iter_compositions,
    normalise_log_weights,
    sample_full_counts,
)

logger = logging.getLogger(__name__)

ROBOT_LIBRARY_SCOPE = "GLOBAL"

__all__ = [
    "VarianceMode",
    "PopulationFunctionals",
    "VarianceReport",
    "NestedStratificationResult",
    "PropensityComparison",
    "JensenTerms",
    "MixtureModel",
    "MixturePair",
    "population_functionals",
    "stratum_moments",
    "stratum_estimand",
    "stratification_bias",
    "cate",
    "expected_sate_variance",
    "stratified_conditional_moments",
    "true_pi_conditional_moments",
    "exact_variance",
    "theorem2_terms",
    "theorem3_comparison",
    "jensen_terms",
    "cell_size_gap",
    "cell_size_equality",
    "mixture_observed_vs_potential",
    "quantile",
    "qte",
    "Oracle",
]

BIAS_TOL = 1e-10
QUANTILE_XTOL = 1e-10
QUANTILE_MAXITER = 200
Z95 = 1.959963984540054


class VarianceMode(str, enum.Enum):
    EXACT = "ExactEnumeration"
    COUNT_MC = "CountMonteCarlo"


# ===========================================================================
# Population functionals
# ===========================================================================

@dataclass(frozen=True)
class PopulationFunctionals:
    ate: float
    att: float
    atc: float
    per_stratum_estimand: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"ate": self.ate, "att": self.att, "atc": self.atc,
                "per_stratum_estimand": dict(self.per_stratum_estimand)}


def _arm_mass(dgp: TabularDGP) -> np.ndarray:
    """K x 2 joint masses P(X=x, Z=z), columns [z=0, z=1]."""
    return np.column_stack([dgp.marginal * (1.0 - dgp.pi), dgp.marginal * dgp.pi])


def stratum_moments(dgp: TabularDGP, s: Stratification) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per stratum and arm: (mean, variance, mass), each J x 2.
    Variance follows the law of total variance: E(sigma2 | j, z) + V(mu | j, z).
    Arms with zero mass get NaN moments.
    """
    if s.K != dgp.K:
        raise LabInputError(f"stratification has K={s.K}, DGP has K={dgp.K}")
    cm = conditional_moments(dgp)
    w = _arm_mass(dgp)
    ind = s.indicator()
    mass = ind.T @ w
    first = ind.T @ (w * cm.mean)
    second = ind.T @ (w * (cm.variance + cm.mean ** 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(mass > 0, first / mass, np.nan)
        variance = np.where(mass > 0, np.maximum(second / mass - mean ** 2, 0.0), np.nan)
    return mean, variance, mass


def stratum_estimand(dgp: TabularDGP, s: Stratification) -> float:
    """sum_j P(s=j) (E[Y | s=j, Z=1] - E[Y | s=j, Z=0])."""
    mean, _, _ = stratum_moments(dgp, s)
    weights = stratum_marginal(dgp, s)
    keep = weights > 0
    return float(math.fsum(weights[keep] * (mean[keep, 1] - mean[keep, 0])))


def population_functionals(
    dgp: TabularDGP,
    stratifications: Optional[Mapping[str, Stratification]] = None,
) -> PopulationFunctionals:
    p, pi, tau = dgp.marginal, dgp.pi, dgp.tau
    ate = math.fsum(p * tau)
    att = math.fsum(p * pi * tau) / math.fsum(p * pi)
    atc = math.fsum(p * (1.0 - pi) * tau) / math.fsum(p * (1.0 - pi))
    per = {name: stratum_estimand(dgp, s) for name, s in (stratifications or {}).items()}
    return PopulationFunctionals(ate=ate, att=att, atc=atc, per_stratum_estimand=per)


def stratification_bias(dgp: TabularDGP, s: Stratification) -> float:
    return stratum_estimand(dgp, s) - math.fsum(dgp.marginal * dgp.tau)


def cate(dgp: TabularDGP, s: Stratification) -> np.ndarray:
    """E[tau(X) | s(X) = j] per stratum."""
    weights = stratum_marginal(dgp, s)
    totals = np.bincount(s.labels - 1, weights=dgp.marginal * dgp.tau, minlength=s.J)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(weights > 0, totals / weights, np.nan)


def expected_sate_variance(dgp: TabularDGP, n: int) -> float:
    """Variance of the sample average effect around the ATE for n untruncated i.i.d. units."""
    ate = math.fsum(dgp.marginal * dgp.tau)
    spread = math.fsum(dgp.marginal * (dgp.tau - ate) ** 2)
    return (spread + math.fsum(dgp.marginal * dgp.delta_variance())) / n


# ===========================================================================
# Conditional-on-counts moments
# ===========================================================================

def _as_count_cube(dgp: TabularDGP, counts: np.ndarray) -> np.ndarray:
    cube = np.asarray(counts)
    if cube.ndim == 2:
        cube = cube[np.newaxis]
    if cube.shape[1:] != (dgp.K, 2):
        raise LabInputError(f"counts must have shape (..., {dgp.K}, 2), got {np.shape(counts)}")
    return cube


def stratified_conditional_moments(
    dgp: TabularDGP, s: Stratification, counts: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """E and V of the stratification estimator given counts of shape (S, K, 2)."""
    cube = _as_count_cube(dgp, counts).astype(float)
    cm = conditional_moments(dgp)
    ind = s.indicator()
    n = cube[0].sum()
    n_jz = np.einsum("skz,kj->sjz", cube, ind)
    if np.any(n_jz == 0):
        state, j, z = (int(v) for v in np.argwhere(n_jz == 0)[0])
        raise UnidentifiedStratumError(f"count configuration {state} leaves stratum {j + 1} without arm z={z}", j + 1, z)
    m_jz = np.einsum("skz,kj->sjz", cube * cm.mean, ind)
    v_jz = np.einsum("skz,kj->sjz", cube * cm.variance, ind)
    share = n_jz.sum(axis=2) / n
    mean = np.sum(share * (m_jz[..., 1] / n_jz[..., 1] - m_jz[..., 0] / n_jz[..., 0]), axis=1)
    var = np.sum(share ** 2 * (v_jz[..., 1] / n_jz[..., 1] ** 2 + v_jz[..., 0] / n_jz[..., 0] ** 2), axis=1)
    return mean, var


def true_pi_conditional_moments(dgp: TabularDGP, counts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """E and V, given counts, of (1/n) sum_x (S_{x,1}/pi(x) - S_{x,0}/(1 - pi(x)))."""
    cube = _as_count_cube(dgp, counts).astype(float)
    cm = conditional_moments(dgp)
    n = cube[0].sum()
    inv = np.column_stack([-1.0 / (1.0 - dgp.pi), 1.0 / dgp.pi])
    mean = np.sum(cube * cm.mean * inv, axis=(1, 2)) / n
    var = np.sum(cube * cm.variance * inv ** 2, axis=(1, 2)) / n ** 2
    return mean, var


# ===========================================================================
# Count law
# ===========================================================================

CountFunction = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass
class _LawSummary:
    mode: VarianceMode
    states: int
    weights: np.ndarray
    moments: List[Tuple[np.ndarray, np.ndarray]]
    full_cells_probability: Optional[float] = None
    extras: List[np.ndarray] = field(default_factory=list)


def _cell_probs(dgp: TabularDGP) -> np.ndarray:
    return _arm_mass(dgp).ravel()


def _over_count_law(
    dgp: TabularDGP,
    n: int,
    functions: Sequence[CountFunction],
    mode: VarianceMode,
    draws: Optional[int],
    seed: int,
    max_states: Optional[int],
    extra: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> _LawSummary:
    """Evaluate each count function over the truncated count law."""
    mode = VarianceMode(mode)
    cells = 2 * dgp.K
    probs = _cell_probs(dgp)
    if n < cells:
        raise LabInputError(f"n={n} is below 2K={cells}; no sample fills every cell")

    if mode is VarianceMode.EXACT:
        cap = max_states if max_states is not None else import_lab_variable("RW_LAB_MAX_STATES")
        states = check_state_space(n, cells, cap)
        logs, parts, extras = [], [[] for _ in functions], []
        for block in iter_compositions(n, cells):
            cube = block.reshape(-1, dgp.K, 2)
            logs.append(composition_log_weights(block, n, probs))
            for slot, fn in zip(parts, functions):
                slot.append(fn(cube))
            if extra is not None:
                extras.append(extra(cube))
        weights, log_mass = normalise_log_weights(np.concatenate(logs))
        moments = [(np.concatenate([m for m, _ in slot]), np.concatenate([v for _, v in slot])) for slot in parts]
        info_log("Enumerated count configurations", {"n": n, "cells": cells, "states": states})
        return _LawSummary(mode, states, weights, moments, math.exp(log_mass),
                           [np.concatenate(extras)] if extra is not None else [])

    draws = draws if draws is not None else import_lab_variable("RW_LAB_MC_DRAWS")
    if draws < 2:
        raise LabInputError("CountMonteCarlo needs at least 2 draws")
    rng = np.random.default_rng(to_seed(seed))
    cube = sample_full_counts(n, probs, draws, rng).reshape(-1, dgp.K, 2)
    weights = np.full(draws, 1.0 / draws)
    moments = [fn(cube) for fn in functions]
    return _LawSummary(mode, draws, weights, moments, None, [extra(cube)] if extra is not None else [])


def _total_variance(law: _LawSummary, mean: np.ndarray, var: np.ndarray) -> Tuple[float, float, Optional[float]]:
    """(variance, mean, stderr) with variance = E[V|N] + V(E|N)."""
    w = law.weights
    centre = float(np.dot(w, mean))
    dev2 = (mean - centre) ** 2
    if law.mode is VarianceMode.EXACT:
        return float(np.dot(w, var) + np.dot(w, dev2)), centre, None
    R = mean.size
    total = float(var.mean() + dev2.sum() / (R - 1))
    stderr = float(np.std(var + dev2, ddof=1) / math.sqrt(R))
    return total, centre, stderr


# ===========================================================================
# Variance reports
# ===========================================================================

@dataclass(frozen=True)
class VarianceReport:
    variance: float
    mean: float
    n: int
    stratification: Stratification
    mode: VarianceMode
    states: int
    stderr: Optional[float] = None
    full_cells_probability: Optional[float] = None
    partition: Optional[Dict[str, Tuple[int, ...]]] = None
    nu: Optional[float] = None
    eta: Optional[float] = None

    def interval(self) -> Tuple[float, float]:
        """95% interval; a point for exact enumeration."""
        if self.stderr is None:
            return self.variance, self.variance
        return self.variance - Z95 * self.stderr, self.variance + Z95 * self.stderr

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variance": self.variance,
            "mean": self.mean,
            "n": self.n,
            "stratification": self.stratification.to_list(),
            "mode": self.mode.value,
            "states": self.states,
            "stderr": self.stderr,
            "interval": list(self.interval()),
            "full_cells_probability": self.full_cells_probability,
            "partition": None if self.partition is None else {k: list(v) for k, v in self.partition.items()},
            "nu": self.nu,
            "eta": self.eta,
        }


def exact_variance(
    dgp: TabularDGP,
    s: Stratification,
    n: int,
    mode: VarianceMode = VarianceMode.EXACT,
    draws: Optional[int] = None,
    seed: int = 0,
    max_states: Optional[int] = None,
) -> VarianceReport:
    """
    Variance of the stratification estimator over the full-cell truncated law.

    :raises SizeLimitError: ExactEnumeration would exceed the state cap.
    """
    if s.K != dgp.K:
        raise LabInputError(f"stratification has K={s.K}, DGP has K={dgp.K}")
    law = _over_count_law(dgp, n, [lambda c: stratified_conditional_moments(dgp, s, c)], mode, draws, seed, max_states)
    variance, mean, stderr = _total_variance(law, *law.moments[0])
    return VarianceReport(variance, mean, n, s, law.mode, law.states, stderr, law.full_cells_probability)


# ===========================================================================
# Nested stratifications: over- and under-stratification penalties
# ===========================================================================

@dataclass(frozen=True)
class NestedStratificationResult:
    """
    nu: penalty of refining the strata whose sub-strata share means and
    variances (set B); eta: reduction from refining the remaining split
    strata (set C). V(fine) - V(coarse) = nu - eta.
    """

    coarse: VarianceReport
    fine: VarianceReport
    nu: float
    eta: float
    partition: Dict[str, Tuple[int, ...]]

    @property
    def fine_is_better(self) -> bool:
        return self.fine.variance < self.coarse.variance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "coarse": self.coarse.to_dict(),
            "fine": self.fine.to_dict(),
            "nu": self.nu,
            "eta": self.eta,
            "difference": self.fine.variance - self.coarse.variance,
            "partition": {k: list(v) for k, v in self.partition.items()},
        }


def _identifying(dgp: TabularDGP, s: Stratification, role: str) -> None:
    bias = stratification_bias(dgp, s)
    scale = max(1.0, abs(math.fsum(dgp.marginal * dgp.tau)))
    if abs(bias) > BIAS_TOL * scale:
        raise NonIdentifyingStratificationError(
            f"non-identifying stratification: the {role} stratification has bias {bias:.6g}", bias,
        )


def _partition(dgp: TabularDGP, coarse: Stratification, fine: Stratification) -> Dict[str, Tuple[int, ...]]:
    mean, var, _ = stratum_moments(dgp, fine)
    groups: Dict[str, List[int]] = {"A": [], "B": [], "C": []}
    for j, levels in enumerate(coarse.level_sets(), start=1):
        subs = sorted({int(fine.labels[x - 1]) for x in levels})
        if len(subs) == 1:
            groups["A"].append(j)
            continue
        signatures = {tuple(level_key(v) for v in (*mean[l - 1], *var[l - 1])) for l in subs}
        groups["B" if len(signatures) == 1 else "C"].append(j)
    return {k: tuple(v) for k, v in groups.items()}


def theorem2_terms(
    dgp: TabularDGP,
    coarse: Stratification,
    fine: Stratification,
    n: int,
    mode: VarianceMode = VarianceMode.EXACT,
    draws: Optional[int] = None,
    seed: int = 0,
    max_states: Optional[int] = None,
) -> NestedStratificationResult:
    """
    Split coarse strata into A (not split by ``fine``), B (split into sub-strata
    with equal arm means and variances) and C (the rest). A hybrid
    stratification refines only B; then nu = V(hybrid) - V(coarse) and
    eta = V(hybrid) - V(fine), all under one count law.
    """
    rel = relation(fine, coarse)
    if rel not in (StrataRelation.REFINES, StrataRelation.EQUAL):
        raise LabInputError(f"the fine stratification must refine the coarse one, relation is {rel.value}")
    _identifying(dgp, coarse, "coarse")
    _identifying(dgp, fine, "fine")

    partition = _partition(dgp, coarse, fine)
    in_b = set(partition["B"])
    hybrid = Stratification.from_keys([
        ("fine", int(f)) if int(c) in in_b else ("coarse", int(c))
        for c, f in zip(coarse.labels, fine.labels)
    ])

    functions: List[CountFunction] = [lambda c: stratified_conditional_moments(dgp, coarse, c)]
    if rel is StrataRelation.REFINES:
        functions.append(lambda c: stratified_conditional_moments(dgp, fine, c))
    if partition["B"] and partition["C"]:
        functions.append(lambda c: stratified_conditional_moments(dgp, hybrid, c))
    law = _over_count_law(dgp, n, functions, mode, draws, seed, max_states)

    v_coarse, m_coarse, se_coarse = _total_variance(law, *law.moments[0])
    if rel is StrataRelation.REFINES:
        v_fine, m_fine, se_fine = _total_variance(law, *law.moments[1])
    else:
        v_fine, m_fine, se_fine = v_coarse, m_coarse, se_coarse

    if partition["B"] and partition["C"]:
        v_hybrid = _total_variance(law, *law.moments[2])[0]
        nu, eta = v_hybrid - v_coarse, v_hybrid - v_fine
    elif partition["B"]:
        nu, eta = v_fine - v_coarse, 0.0
    elif partition["C"]:
        nu, eta = 0.0, v_coarse - v_fine
    else:
        nu, eta = 0.0, 0.0

    common = dict(n=n, mode=law.mode, states=law.states, full_cells_probability=law.full_cells_probability,
                  partition=partition, nu=nu, eta=eta)
    return NestedStratificationResult(
        coarse=VarianceReport(v_coarse, m_coarse, stratification=coarse, stderr=se_coarse, **common),
        fine=VarianceReport(v_fine, m_fine, stratification=fine, stderr=se_fine, **common),
        nu=nu,
        eta=eta,
        partition=partition,
    )


# ===========================================================================
# True versus empirical propensities
# ===========================================================================

@dataclass(frozen=True)
class PropensityComparison:
    """
    var_true_pi - var_empirical_pi = b - a, where a is the excess of the
    expected conditional variance under empirical weights and b the excess
    variance of the conditional mean under true weights.
    """

    var_true_pi: float
    var_empirical_pi: float
    a: float
    b: float
    mode: VarianceMode
    states: int
    stderr_true_pi: Optional[float] = None
    stderr_empirical_pi: Optional[float] = None

    def intervals(self) -> Dict[str, Tuple[float, float]]:
        def band(v: float, se: Optional[float]) -> Tuple[float, float]:
            return (v, v) if se is None else (v - Z95 * se, v + Z95 * se)

        return {"true_pi": band(self.var_true_pi, self.stderr_true_pi),
                "empirical_pi": band(self.var_empirical_pi, self.stderr_empirical_pi)}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "var_true_pi": self.var_true_pi,
            "var_empirical_pi": self.var_empirical_pi,
            "a": self.a,
            "b": self.b,
            "mode": self.mode.value,
            "states": self.states,
            "stderr_true_pi": self.stderr_true_pi,
            "stderr_empirical_pi": self.stderr_empirical_pi,
            "intervals": {k: list(v) for k, v in self.intervals().items()},
        }


def theorem3_comparison(
    dgp: TabularDGP,
    n: int,
    mode: VarianceMode = VarianceMode.EXACT,
    draws: Optional[int] = None,
    seed: int = 0,
    max_states: Optional[int] = None,
) -> PropensityComparison:
    identity = Stratification.identity(dgp.K)
    law = _over_count_law(
        dgp, n,
        [lambda c: true_pi_conditional_moments(dgp, c), lambda c: stratified_conditional_moments(dgp, identity, c)],
        mode, draws, seed, max_states,
    )
    (m_t, v_t), (m_e, v_e) = law.moments
    var_t, _, se_t = _total_variance(law, m_t, v_t)
    var_e, _, se_e = _total_variance(law, m_e, v_e)
    w = law.weights
    a = float(np.dot(w, v_e) - np.dot(w, v_t))
    b = (var_t - float(np.dot(w, v_t))) - (var_e - float(np.dot(w, v_e)))
    return PropensityComparison(var_t, var_e, a, b, law.mode, law.states, se_t, se_e)


@dataclass(frozen=True)
class JensenTerms:
    """Per level x, under the truncated law."""

    ratio_mean: np.ndarray    # E[N_x^2 / N_{x,1}]
    jensen_bound: np.ndarray  # E[N_x]^2 / E[N_{x,1}]
    pi_bound: np.ndarray      # E[N_{x,1}] / pi(x)^2


def jensen_terms(dgp: TabularDGP, n: int, max_states: Optional[int] = None) -> JensenTerms:
    def per_level(cube: np.ndarray) -> np.ndarray:
        cube = cube.astype(float)
        n_x = cube.sum(axis=2)
        return np.concatenate([n_x ** 2 / cube[..., 1], n_x, cube[..., 1]], axis=1)

    law = _over_count_law(dgp, n, [], VarianceMode.EXACT, None, 0, max_states, extra=per_level)
    expected = law.weights @ law.extras[0]
    K = dgp.K
    ratio, e_nx, e_n1 = expected[:K], expected[K:2 * K], expected[2 * K:]
    return JensenTerms(ratio_mean=ratio, jensen_bound=e_nx ** 2 / e_n1, pi_bound=e_n1 / dgp.pi ** 2)


def cell_size_gap(denominators: Sequence[int], others: Sequence[int]) -> Fraction:
    """
    sum_l (a_l + b_l)^2 / a_l - (sum_l (a_l + b_l))^2 / sum_l a_l for positive
    integers a_l (``denominators``) and nonnegative b_l (``others``); never negative.
    """
    if len(denominators) != len(others) or not denominators:
        raise LabInputError("need equally many (at least one) denominators and others")
    if any(a <= 0 for a in denominators) or any(b < 0 for b in others):
        raise LabInputError("denominators must be positive and others nonnegative")
    parts = sum(Fraction((a + b) ** 2, a) for a, b in zip(denominators, others))
    whole = Fraction(sum(denominators) + sum(others)) ** 2 / sum(denominators)
    return parts - whole


def cell_size_equality(denominators: Sequence[int], others: Sequence[int]) -> bool:
    """The gap is zero iff every ratio (a_l + b_l) / a_l is the same."""
    return len({Fraction(a + b, a) for a, b in zip(denominators, others)}) == 1


# ===========================================================================
# Gaussian mixtures and quantile effects
# ===========================================================================

@dataclass(frozen=True, eq=False)
class MixtureModel:
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        arrays = [np.array(v, dtype=float, copy=True).ravel() for v in (self.weights, self.means, self.sds)]
        w, m, s = arrays
        if w.size < 1 or not (w.size == m.size == s.size):
            raise LabInputError("a mixture needs matching, nonempty weights, means and sds")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise LabInputError("mixture weights must be a probability vector")
        if np.any(s <= 0):
            raise LabInputError("mixture sds must be positive")
        for name, arr in zip(("weights", "means", "sds"), arrays):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def cdf(self, y: Any) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.sum(self.weights * norm.cdf((y[..., np.newaxis] - self.means) / self.sds), axis=-1)

    def pdf(self, y: Any) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.sum(self.weights * norm.pdf(y[..., np.newaxis], self.means, self.sds), axis=-1)

    def quantile(self, q: float) -> float:
        return quantile(self, q)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "sds": self.sds.tolist()}


def quantile(m: MixtureModel, q: float) -> float:
    """
    Inverse CDF by bisection to absolute tolerance 1e-10. The root is
    bracketed by the smallest and largest component quantiles.
    """
    if not 0.0 < q < 1.0:
        raise LabInputError(f"quantile level must lie in (0, 1), got {q!r}")
    active = m.weights > 0
    comp = norm.ppf(q, m.means[active], m.sds[active])
    lo, hi = float(np.min(comp)), float(np.max(comp))
    if hi - lo <= QUANTILE_XTOL:
        return 0.5 * (lo + hi)
    try:
        return float(bisect(lambda y: float(m.cdf(y)) - q, lo, hi, xtol=QUANTILE_XTOL, maxiter=QUANTILE_MAXITER))
    except RuntimeError as e:
        raise NumericalError(f"quantile bisection did not converge in {QUANTILE_MAXITER} iterations: {e}") from e


@dataclass(frozen=True)
class MixturePair:
    observed: Dict[int, MixtureModel]
    potential: Dict[int, MixtureModel]

    def qte(self, q: float, kind: str = "observed") -> float:
        return qte(self, q, kind)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "observed": {str(z): m.to_dict() for z, m in self.observed.items()},
            "potential": {str(z): m.to_dict() for z, m in self.potential.items()},
        }


def qte(pair: MixturePair, q: float, kind: str = "observed") -> float:
    """quantile(m_1, q) - quantile(m_0, q) for the observed or potential mixtures."""
    if kind not in ("observed", "potential"):
        raise LabInputError(f"kind must be 'observed' or 'potential', got {kind!r}")
    models = getattr(pair, kind)
    return quantile(models[1], q) - quantile(models[0], q)


def mixture_observed_vs_potential(dgp: TabularDGP) -> MixturePair:
    """
    For the two-level family with mu = 0, constant tau, Normal baseline
    noise with sds (sigma, sigma + 1) and no effect noise: Y | Z=z is a
    mixture with weight w_z = P(X=2 | Z=z) on the wider component, while
    Y^z mixes with the covariate marginal.
    """
    problems = []
    if dgp.K != 2:
        problems.append(f"K={dgp.K} (need 2)")
    else:
        if any(level_key(v) != 0.0 for v in dgp.mu):
            problems.append("mu is not identically 0")
        if level_key(dgp.tau[0]) != level_key(dgp.tau[1]):
            problems.append("tau is not constant")
        if any(u.kind is not NoiseKind.NORMAL for u in dgp.upsilon):
            problems.append("baseline noise is not Normal")
        elif dgp.upsilon[0].scale <= 0 or abs(dgp.upsilon[1].scale - dgp.upsilon[0].scale - 1.0) > 1e-12:
            problems.append("baseline sds are not (sigma, sigma + 1) with sigma > 0")
        if any(d.kind is not NoiseKind.DEGENERATE for d in dgp.delta):
            problems.append("effect noise is not degenerate")
    if problems:
        raise LabInputError("DGP is outside the variance-only confounding family: " + "; ".join(problems))

    sds = np.array([dgp.upsilon[0].scale, dgp.upsilon[1].scale])
    tau = float(dgp.tau[0])
    mass = _arm_mass(dgp)
    observed, potential = {}, {}
    for z in (0, 1):
        w = mass[1, z] / mass[:, z].sum()
        means = np.full(2, tau * z)
        observed[z] = MixtureModel(np.array([1.0 - w, w]), means, sds)
        potential[z] = MixtureModel(dgp.marginal, means, sds)
    return MixturePair(observed=observed, potential=potential)


# ──────────────────────────────────────────────────────────────────────────────
#  Robot keywords
# ──────────────────────────────────────────────────────────────────────────────

class Oracle:
    """Robot library exposing exact population and finite-sample quantities."""

    ROBOT_LIBRARY_SCOPE = "GLOBAL"

    @keyword("Population Functionals")
    def functionals(self, dgp: TabularDGP) -> Dict[str, Any]:
        return population_functionals(dgp).to_dict()

    @keyword("Stratification Bias")
    def bias(self, dgp: TabularDGP, labels: Sequence[int]) -> float:
        return stratification_bias(dgp, Stratification.from_labels(labels))

    @keyword("Exact Variance")
    def variance(self, dgp: TabularDGP, labels: Sequence[int], n: int, mode: str = "ExactEnumeration") -> Dict[str, Any]:
        report = exact_variance(dgp, Stratification.from_labels(labels), int(n), VarianceMode(mode))
        robot_log(f"Variance {report.variance:.6g} over {report.states} count configurations ({report.mode.value})")
        return report.to_dict()

    @keyword("Quantile Treatment Effects")
    def quantile_effects(self, dgp: TabularDGP, q: float) -> Dict[str, float]:
        pair = mixture_observed_vs_potential(dgp)
        return {"observed": qte(pair, float(q), "observed"), "potential": qte(pair, float(q), "potential")}
