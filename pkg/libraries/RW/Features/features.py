"""
Features keyword library: stratification functions over a tabular
covariate space and the deconfounding constructs built on them
(principal deconfounding function, constant control functions,
mean conditional unconfoundedness).

Level sets of real-valued tables are formed after rounding each entry to
12 significant digits.

Scope: GLOBAL
"""

# ──────────────────────────────────────────────────────────────────────────────
# Imports
# ──────────────────────────────────────────────────────────────────────────────
from __future__ import annotations

import enum
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Dict, Hashable, Iterator, List, Sequence, Tuple

import numpy as np
from robot.api.deco import keyword

from RW.DGP import TabularDGP
from RW.Lab import LabInputError, SpecValidationError, robot_log

logger = logging.getLogger(__name__)

ROBOT_LIBRARY_SCOPE = "GLOBAL"

__all__ = [
    "level_key",
    "Stratification",
    "StrataRelation",
    "relation",
    "principal_deconfounder",
    "principal_deconfounder_values",
    "is_mean_unconfounded",
    "mean_confounding_gap",
    "is_prognostic_unconfounded",
    "is_constant_control",
    "ScoreStratifications",
    "score_stratifications",
    "stratum_marginal",
    "DependenceRole",
    "classify_by_dependence",
    "iter_coarsenings",
    "stratification_from_spec",
    "Features",
]

SIGNIFICANT_DIGITS = 12
TV_TOL = 1e-12
MAX_COARSENING_STRATA = 12


def level_key(value: float) -> float:
    """Round to 12 significant digits; -0.0 folds onto 0.0."""
    return float(f"{float(value):.{SIGNIFICANT_DIGITS}g}") + 0.0


def _keys(values: Sequence[float]) -> List[float]:
    return [level_key(v) for v in values]


# ===========================================================================
# Stratification
# ===========================================================================

@dataclass(frozen=True, eq=False)
class Stratification:
    """Map level x (1-based) -> stratum id in 1..J, stored as ``labels[x-1]``."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if labels.ndim != 1 or labels.size < 1:
            raise LabInputError("stratification labels must be a nonempty vector")
        J = int(labels.max())
        if labels.min() < 1 or set(np.unique(labels).tolist()) != set(range(1, J + 1)):
            raise LabInputError(f"stratification labels must cover 1..J exactly, got {sorted(set(labels.tolist()))}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def K(self) -> int:
        return int(self.labels.size)

    @property
    def J(self) -> int:
        return int(self.labels.max())

    @classmethod
    def identity(cls, K: int) -> "Stratification":
        return cls(np.arange(1, K + 1))

    @classmethod
    def constant(cls, K: int) -> "Stratification":
        return cls(np.ones(K, dtype=np.int64))

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "Stratification":
        return cls(np.asarray(labels))

    @classmethod
    def from_keys(cls, keys: Sequence[Hashable]) -> "Stratification":
        """Strata are the level sets of ``keys``, numbered by first appearance."""
        ids: Dict[Hashable, int] = {}
        return cls(np.array([ids.setdefault(k, len(ids) + 1) for k in keys]))

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "Stratification":
        return cls.from_keys(_keys(values))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Stratification) and np.array_equal(self.labels, other.labels)

    def __hash__(self) -> int:
        return hash(self.labels.tobytes())

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Stratum id of each (1-based) level in ``x``."""
        return self.labels[np.asarray(x) - 1]

    def level_sets(self) -> List[List[int]]:
        sets: List[List[int]] = [[] for _ in range(self.J)]
        for x, j in enumerate(self.labels, start=1):
            sets[j - 1].append(x)
        return sets

    def indicator(self) -> np.ndarray:
        """K x J 0/1 matrix."""
        ind = np.zeros((self.K, self.J))
        ind[np.arange(self.K), self.labels - 1] = 1.0
        return ind

    def coarsen(self, blocks: Sequence[int]) -> "Stratification":
        """Merge strata: stratum j is relabelled ``blocks[j-1]``."""
        blocks = np.asarray(blocks)
        if blocks.shape != (self.J,):
            raise LabInputError(f"need one block id per stratum ({self.J}), got {blocks.size}")
        return Stratification.from_keys(blocks[self.labels - 1].tolist())

    def to_list(self) -> List[int]:
        return self.labels.tolist()


class StrataRelation(str, enum.Enum):
    EQUAL = "Equal"
    REFINES = "Refines"
    COARSENS = "Coarsens"
    INCOMPARABLE = "Incomparable"


def relation(a: Stratification, b: Stratification) -> StrataRelation:
    """
    a refines b iff a(x) = a(x') implies b(x) = b(x'); Equal iff both ways.
    """
    if a.K != b.K:
        raise LabInputError(f"stratifications over different spaces: K={a.K} vs K={b.K}")
    pairs = len(set(zip(a.labels.tolist(), b.labels.tolist())))
    a_refines = pairs == a.J
    b_refines = pairs == b.J
    if a_refines and b_refines:
        return StrataRelation.EQUAL
    if a_refines:
        return StrataRelation.REFINES
    if b_refines:
        return StrataRelation.COARSENS
    return StrataRelation.INCOMPARABLE


def _check_space(dgp: TabularDGP, s: Stratification) -> None:
    if s.K != dgp.K:
        raise LabInputError(f"stratification has K={s.K}, DGP has K={dgp.K}")


# ===========================================================================
# Deconfounding constructs
# ===========================================================================

def _mu_tau_keys(dgp: TabularDGP) -> List[Tuple[float, float]]:
    return list(zip(_keys(dgp.mu), _keys(dgp.tau)))


def principal_deconfounder_values(dgp: TabularDGP) -> np.ndarray:
    """lambda(x) = E(pi(X) | mu(X) = mu(x), tau(X) = tau(x))."""
    keys = _mu_tau_keys(dgp)
    mass: Dict[Tuple[float, float], float] = defaultdict(float)
    weighted: Dict[Tuple[float, float], float] = defaultdict(float)
    members: Dict[Tuple[float, float], List[int]] = defaultdict(list)
    for x, key in enumerate(keys):
        mass[key] += dgp.marginal[x]
        weighted[key] += dgp.marginal[x] * dgp.pi[x]
        members[key].append(x)
    lam = np.empty(dgp.K)
    for key, xs in members.items():
        # zero-mass groups never occur in the population; fall back to the plain mean
        lam[xs] = weighted[key] / mass[key] if mass[key] > 0 else float(np.mean(dgp.pi[xs]))
    return lam


def principal_deconfounder(dgp: TabularDGP) -> Stratification:
    return Stratification.from_values(principal_deconfounder_values(dgp))


def _arm_law_gap(dgp: TabularDGP, s: Stratification, keys: Sequence[Hashable]) -> float:
    """
    Largest total-variation distance, over strata, between the laws of
    ``keys(X)`` given s(X)=j under Z=1 and under Z=0 weighting.
    """
    _check_space(dgp, s)
    treated = dgp.marginal * dgp.pi
    control = dgp.marginal * (1.0 - dgp.pi)
    gap = 0.0
    for levels in s.level_sets():
        idx = np.array(levels) - 1
        w1, w0 = treated[idx].sum(), control[idx].sum()
        if w1 <= 0 or w0 <= 0:
            continue
        law: Dict[Hashable, List[float]] = defaultdict(lambda: [0.0, 0.0])
        for x in idx:
            law[keys[x]][0] += treated[x] / w1
            law[keys[x]][1] += control[x] / w0
        gap = max(gap, 0.5 * sum(abs(p1 - p0) for p1, p0 in law.values()))
    return gap


def mean_confounding_gap(dgp: TabularDGP, s: Stratification) -> float:
    return _arm_law_gap(dgp, s, _mu_tau_keys(dgp))


def is_mean_unconfounded(dgp: TabularDGP, s: Stratification) -> bool:
    """
    Z independent of (mu(X), tau(X)) given s(X), checked exactly: within every
    stratum the Z=1 and Z=0 conditional laws of (mu, tau) agree to TV < 1e-12.
    Noise laws are not compared.
    """
    return mean_confounding_gap(dgp, s) < TV_TOL


def is_prognostic_unconfounded(dgp: TabularDGP, s: Stratification, target: str = "att") -> bool:
    """
    Identification check for the effect on the treated (mu independent of Z
    given s) or on the controls (mu + tau independent of Z given s).
    """
    if target == "att":
        keys = _keys(dgp.mu)
    elif target == "atc":
        keys = _keys(dgp.mu + dgp.tau)
    else:
        raise LabInputError(f"target must be 'att' or 'atc', got {target!r}")
    return _arm_law_gap(dgp, s, keys) < TV_TOL


def is_constant_control(dgp: TabularDGP, s: Stratification) -> bool:
    """
    Every pair x, x' in one stratum has pi(x) = pi(x') or
    (mu(x), tau(x)) = (mu(x'), tau(x')).
    """
    _check_space(dgp, s)
    pi_keys = _keys(dgp.pi)
    mt_keys = _mu_tau_keys(dgp)
    for levels in s.level_sets():
        idx = [x - 1 for x in levels]
        for i, x in enumerate(idx):
            for y in idx[i + 1:]:
                if pi_keys[x] != pi_keys[y] and mt_keys[x] != mt_keys[y]:
                    return False
    return True


@dataclass(frozen=True)
class ScoreStratifications:
    pi_strata: Stratification
    mu_strata: Stratification
    tau_strata: Stratification
    mu_tau_strata: Stratification

    def as_dict(self) -> Dict[str, Stratification]:
        return {
            "pi_strata": self.pi_strata,
            "mu_strata": self.mu_strata,
            "tau_strata": self.tau_strata,
            "mu_tau_strata": self.mu_tau_strata,
        }


def score_stratifications(dgp: TabularDGP) -> ScoreStratifications:
    return ScoreStratifications(
        pi_strata=Stratification.from_values(dgp.pi),
        mu_strata=Stratification.from_values(dgp.mu),
        tau_strata=Stratification.from_values(dgp.tau),
        mu_tau_strata=Stratification.from_keys(_mu_tau_keys(dgp)),
    )


def stratum_marginal(dgp: TabularDGP, s: Stratification) -> np.ndarray:
    """P(s(X) = j) for j = 1..J."""
    _check_space(dgp, s)
    return np.bincount(s.labels - 1, weights=dgp.marginal, minlength=s.J)


# ===========================================================================
# Binary covariates: role by functional dependence
# ===========================================================================

class DependenceRole(str, enum.Enum):
    CONFOUNDER = "confounder"
    PROGNOSTIC = "prognostic"
    EFFECT_MODIFIER = "effect_modifier"
    INSTRUMENT = "instrument"
    EXTRANEOUS = "extraneous"


def _depends_on_bit(values: Sequence[float], bit: int) -> bool:
    keys = _keys(values)
    step = 1 << bit
    return any(keys[x] != keys[x ^ step] for x in range(len(keys)))


def classify_by_dependence(dgp: TabularDGP, names: Sequence[str]) -> Dict[str, DependenceRole]:
    """
    Role of each flattened binary covariate (names[0] is the lowest bit of
    x - 1) by which of pi, mu, tau change when only that covariate flips.
    Appearing in pi and in mu or tau makes a confounder; mu only a
    prognostic variable; tau only an effect modifier; pi only an
    instrument; none an extraneous variable.
    """
    if dgp.K != 1 << len(names):
        raise LabInputError(f"{len(names)} binary covariates need K={1 << len(names)}, DGP has K={dgp.K}")
    roles: Dict[str, DependenceRole] = {}
    for bit, name in enumerate(names):
        in_pi = _depends_on_bit(dgp.pi, bit)
        in_mu = _depends_on_bit(dgp.mu, bit)
        in_tau = _depends_on_bit(dgp.tau, bit)
        if in_pi and (in_mu or in_tau):
            roles[name] = DependenceRole.CONFOUNDER
        elif in_mu:
            roles[name] = DependenceRole.PROGNOSTIC
        elif in_tau:
            roles[name] = DependenceRole.EFFECT_MODIFIER
        elif in_pi:
            roles[name] = DependenceRole.INSTRUMENT
        else:
            roles[name] = DependenceRole.EXTRANEOUS
    return roles


# ===========================================================================
# Coarsening search
# ===========================================================================

def _set_partitions(n: int) -> Iterator[List[int]]:
    """Restricted growth strings of length n (block ids from 0)."""
    if n == 0:
        yield []
        return

    def grow(prefix: List[int], top: int) -> Iterator[List[int]]:
        if len(prefix) == n:
            yield list(prefix)
            return
        for b in range(top + 2):
            prefix.append(b)
            yield from grow(prefix, max(top, b))
            prefix.pop()

    yield from grow([0], 0)


def iter_coarsenings(s: Stratification, strict: bool = True) -> Iterator[Stratification]:
    """Every coarsening of ``s`` (merging its strata), optionally excluding ``s`` itself."""
    if s.J > MAX_COARSENING_STRATA:
        raise LabInputError(f"coarsening search is limited to {MAX_COARSENING_STRATA} strata, got J={s.J}")
    for blocks in _set_partitions(s.J):
        if strict and max(blocks) + 1 == s.J:
            continue
        yield s.coarsen(blocks)


# ===========================================================================
# Spec helpers
# ===========================================================================

NAMED_STRATIFICATIONS = ("identity", "constant", "pi", "mu", "tau", "mu_tau", "principal")


def stratification_from_spec(raw: Any, dgp: TabularDGP, where: str = "stratification") -> Stratification:
    """A label list or one of the named constructions in ``NAMED_STRATIFICATIONS``."""
    if isinstance(raw, Stratification):
        _check_space(dgp, raw)
        return raw
    if isinstance(raw, str):
        if raw == "identity":
            return Stratification.identity(dgp.K)
        if raw == "constant":
            return Stratification.constant(dgp.K)
        if raw == "principal":
            return principal_deconfounder(dgp)
        if raw in ("pi", "mu", "tau", "mu_tau"):
            return getattr(score_stratifications(dgp), f"{raw}_strata")
        raise SpecValidationError(f"unknown stratification {raw!r}; expected a label list or one of {list(NAMED_STRATIFICATIONS)}", path=where)
    if not isinstance(raw, (list, tuple)) or len(raw) != dgp.K:
        raise SpecValidationError(f"expected {dgp.K} integer labels", path=where)
    if any(isinstance(v, bool) or not isinstance(v, int) for v in raw):
        raise SpecValidationError("labels must be integers", path=where)
    try:
        return Stratification.from_labels(raw)
    except LabInputError as e:
        raise SpecValidationError(str(e), path=where) from e


# ──────────────────────────────────────────────────────────────────────────────
#  Robot keywords
# ──────────────────────────────────────────────────────────────────────────────

class Features:
    """Robot library exposing stratification checks on a known DGP."""

    ROBOT_LIBRARY_SCOPE = "GLOBAL"

    @keyword("Principal Deconfounder")
    def principal(self, dgp: TabularDGP) -> List[int]:
        s = principal_deconfounder(dgp)
        robot_log(f"Principal deconfounder has J={s.J} strata: {s.level_sets()}")
        return s.to_list()

    @keyword("Is Mean Unconfounded")
    def mean_unconfounded(self, dgp: TabularDGP, labels: Sequence[int]) -> bool:
        return is_mean_unconfounded(dgp, Stratification.from_labels(labels))

    @keyword("Is Constant Control")
    def constant_control(self, dgp: TabularDGP, labels: Sequence[int]) -> bool:
        return is_constant_control(dgp, Stratification.from_labels(labels))

    @keyword("Score Stratifications")
    def scores(self, dgp: TabularDGP) -> Dict[str, List[int]]:
        return {name: s.to_list() for name, s in score_stratifications(dgp).as_dict().items()}

    @keyword("Stratification Relation")
    def compare(self, a: Sequence[int], b: Sequence[int]) -> str:
        return relation(Stratification.from_labels(a), Stratification.from_labels(b)).value
