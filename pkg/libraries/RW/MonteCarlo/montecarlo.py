"""
MonteCarlo keyword library: seeded, replicable estimator batteries over a
TabularDGP.

Replication r draws its dataset from ``derive_seed(seed, r)``, so any single
replication can be rerun in isolation and the threaded fan-out reduces to
exactly the serial result.

Scope: GLOBAL
"""

# ──────────────────────────────────────────────────────────────────────────────
# Imports
# ──────────────────────────────────────────────────────────────────────────────
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from robot.api.deco import keyword

from RW.DGP import Dataset, TabularDGP, dgp_from_mapping, sample, sample_twins, to_seed
from RW.Estimators import (
    CandidateWeights,
    EstimateReport,
    Method,
    ipw,
    naive_att_contrast,
    stratified,
    two_stage,
    unadjusted,
)
from RW.Features import Stratification, stratification_from_spec, stratum_marginal
from RW.Lab import (
    EstimatorInfeasibleError,
    LabInputError,
    NonIdentifyingStratificationError,
    PositivityError,
    SpecValidationError,
    UnidentifiedStratumError,
    import_lab_variable,
    info_log,
    load_yaml_document,
    robot_log,
    warning_log,
)
from RW.Oracle import population_functionals, stratification_bias

logger = logging.getLogger(__name__)

ROBOT_LIBRARY_SCOPE = "GLOBAL"

__all__ = [
    "MASK64",
    "splitmix64",
    "derive_seed",
    "EstimatorSpec",
    "ExperimentSpec",
    "EstimatorSummary",
    "McReport",
    "TwinReport",
    "summarise",
    "run",
    "variance_ordering_experiment",
    "gaussian_stratified_loglik",
    "twin_design_experiment",
    "MonteCarlo",
]

MASK64 = (1 << 64) - 1
VARIANCE_FLOOR = 1e-12
Z95 = 1.959963984540054
BIAS_TOL = 1e-10

# estimator-level failures are counted; anything else aborts the run
REPLICATION_FAILURES = (UnidentifiedStratumError, PositivityError)


# ===========================================================================
# Seeds
# ===========================================================================

def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (64-bit wraparound arithmetic)."""
    z = (int(x) + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, replication: int) -> int:
    """Seed of replication r: seed XOR splitmix64(r), reduced to 64 bits."""
    return (to_seed(seed) ^ splitmix64(replication)) & MASK64


# ===========================================================================
# Experiment specs
# ===========================================================================

@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    method: Method
    stratification: Optional[Stratification] = None
    s1: Optional[Stratification] = None
    s2: Optional[Stratification] = None
    marginal_weights: Optional[Tuple[float, ...]] = None
    weights: Union[str, Tuple[float, ...]] = "empirical"

    def apply(self, d: Dataset, dgp: TabularDGP) -> EstimateReport:
        if self.method is Method.STRATIFIED:
            return stratified(d, self.stratification)
        if self.method is Method.UNADJUSTED:
            return unadjusted(d)
        if self.method is Method.ATT_NAIVE:
            return naive_att_contrast(d)
        if self.method is Method.IPW:
            if self.weights == "empirical":
                q = CandidateWeights.empirical(d, dgp.K)
            elif self.weights == "true_pi":
                q = CandidateWeights.true_pi(dgp)
            else:
                q = CandidateWeights.custom(self.weights)
            return ipw(d, q)
        return two_stage(d, self.s1, self.s2, self.marginal_weights)

    def loglik_stratification(self, K: int) -> Optional[Stratification]:
        """The conditioning set whose cell means the log-likelihood fits, if any."""
        if self.method is Method.STRATIFIED:
            return self.stratification
        if self.method in (Method.UNADJUSTED, Method.ATT_NAIVE):
            return Stratification.constant(K)
        return None


def _resolve_strat(raw: Any, named: Mapping[str, Stratification], dgp: TabularDGP, where: str) -> Stratification:
    if raw is None:
        raise SpecValidationError("missing stratification", path=where)
    if isinstance(raw, str) and raw in named:
        return named[raw]
    return stratification_from_spec(raw, dgp, where)


def _estimator_from_mapping(raw: Any, named: Mapping[str, Stratification], dgp: TabularDGP, where: str) -> EstimatorSpec:
    if not isinstance(raw, Mapping):
        raise SpecValidationError("expected a mapping", path=where)
    try:
        method = Method(str(raw.get("method", "")))
    except ValueError:
        raise SpecValidationError(
            f"unknown method {raw.get('method')!r}; expected one of {[m.value for m in Method]}", path=f"{where}.method"
        ) from None
    name = str(raw.get("name") or method.value)

    if method is Method.STRATIFIED:
        return EstimatorSpec(name, method, stratification=_resolve_strat(raw.get("stratification"), named, dgp, f"{where}.stratification"))
    if method is Method.IPW:
        weights = raw.get("weights", "empirical")
        if isinstance(weights, list):
            if len(weights) != dgp.K:
                raise SpecValidationError(f"expected {dgp.K} weights", path=f"{where}.weights")
            try:
                weights = tuple(CandidateWeights.custom(weights).q.tolist())
            except (LabInputError, PositivityError) as e:
                raise SpecValidationError(str(e), path=f"{where}.weights") from e
        elif weights not in ("empirical", "true_pi"):
            raise SpecValidationError("weights must be 'empirical', 'true_pi' or a list", path=f"{where}.weights")
        return EstimatorSpec(name, method, weights=weights)
    if method is Method.TWO_STAGE:
        s1 = _resolve_strat(raw.get("s1"), named, dgp, f"{where}.s1")
        s2 = _resolve_strat(raw.get("s2"), named, dgp, f"{where}.s2")
        marginal = raw.get("marginal")
        if marginal == "population":
            marginal = tuple(stratum_marginal(dgp, s2).tolist())
        elif marginal is not None:
            if not isinstance(marginal, list) or len(marginal) != s2.J:
                raise SpecValidationError(f"expected 'population' or {s2.J} weights", path=f"{where}.marginal")
            marginal = tuple(float(v) for v in marginal)
        return EstimatorSpec(name, method, s1=s1, s2=s2, marginal_weights=marginal)
    return EstimatorSpec(name, method)


def _positive_int(raw: Any, where: str) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int) or raw < 1:
        raise SpecValidationError(f"expected a positive integer, got {raw!r}", path=where)
    return raw


@dataclass(frozen=True)
class ExperimentSpec:
    dgp: TabularDGP
    n: int
    reps: int
    seed: int
    estimators: Tuple[EstimatorSpec, ...]
    record_sate: bool = False
    require_full_cells: bool = True
    loglik: bool = False
    stratifications: Dict[str, Stratification] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.reps < 1:
            raise LabInputError(f"reps must be at least 1, got {self.reps}")
        if not self.estimators:
            raise LabInputError("an experiment needs at least one estimator")
        names = [e.name for e in self.estimators]
        if len(set(names)) != len(names):
            raise LabInputError(f"estimator names must be unique, got {names}")
        for e in self.estimators:
            for s in (e.stratification, e.s1, e.s2):
                if s is not None and s.K != self.dgp.K:
                    raise LabInputError(f"estimator {e.name!r} uses a stratification with K={s.K}, DGP has K={self.dgp.K}")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any], name: str = "") -> "ExperimentSpec":
        """Build from a parsed spec document (``dgp``, ``stratifications``, ``experiment``)."""
        if "dgp" not in doc:
            raise SpecValidationError("missing 'dgp' section", path="dgp")
        dgp = dgp_from_mapping(doc["dgp"])
        raw_strats = doc.get("stratifications") or {}
        if not isinstance(raw_strats, Mapping):
            raise SpecValidationError("expected a mapping of name -> stratification", path="stratifications")
        named = {str(k): stratification_from_spec(v, dgp, f"stratifications.{k}") for k, v in raw_strats.items()}

        exp = doc.get("experiment")
        if not isinstance(exp, Mapping):
            raise SpecValidationError("missing 'experiment' section", path="experiment")
        raw_estimators = exp.get("estimators")
        if not isinstance(raw_estimators, list) or not raw_estimators:
            raise SpecValidationError("expected a nonempty list of estimators", path="experiment.estimators")
        estimators = tuple(
            _estimator_from_mapping(e, named, dgp, f"experiment.estimators[{i}]") for i, e in enumerate(raw_estimators)
        )
        seed = exp.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise SpecValidationError(f"seed must be an integer, got {seed!r}", path="experiment.seed")
        try:
            return cls(
                dgp=dgp,
                n=_positive_int(exp.get("n"), "experiment.n"),
                reps=_positive_int(exp.get("reps"), "experiment.reps"),
                seed=seed,
                estimators=estimators,
                record_sate=bool(exp.get("record_sate", False)),
                require_full_cells=bool(exp.get("require_full_cells", True)),
                loglik=bool(exp.get("loglik", False)),
                stratifications=named,
                name=name or str(doc.get("name", "")),
            )
        except SpecValidationError:
            raise
        except LabInputError as e:
            raise SpecValidationError(str(e), path="experiment") from e

    @classmethod
    def load(cls, source: Union[str, Path, Dict[str, Any]]) -> "ExperimentSpec":
        return cls.from_mapping(load_yaml_document(source))

    def with_overrides(self, **overrides: Any) -> "ExperimentSpec":
        """Copy with ``n``, ``reps`` or ``seed`` replaced."""
        unknown = set(overrides) - {"n", "reps", "seed"}
        if unknown:
            raise LabInputError(f"only n, reps and seed can be overridden, got {sorted(unknown)}")
        return replace(self, **overrides)


# ===========================================================================
# Summaries and reports
# ===========================================================================

@dataclass(frozen=True)
class EstimatorSummary:
    name: str
    method: str
    mean: float
    bias: float
    variance: Optional[float]
    stderr: Optional[float]
    variance_stderr: Optional[float]
    q025: float
    q50: float
    q975: float
    failures: int
    reps_used: int

    @property
    def variance_ci(self) -> Optional[Tuple[float, float]]:
        if self.variance is None or self.variance_stderr is None:
            return None
        half = Z95 * self.variance_stderr
        return self.variance - half, self.variance + half

    def to_dict(self) -> Dict[str, Any]:
        ci = self.variance_ci
        return {
            "method": self.method,
            "mean": self.mean,
            "bias": self.bias,
            "variance": self.variance,
            "stderr": self.stderr,
            "variance_stderr": self.variance_stderr,
            "variance_ci": None if ci is None else list(ci),
            "q025": self.q025,
            "q50": self.q50,
            "q975": self.q975,
            "failures": self.failures,
            "reps_used": self.reps_used,
        }


def summarise(name: str, method: str, estimates: np.ndarray, target: float) -> EstimatorSummary:
    """
    Moments of the finite entries of ``estimates``; NaN marks a failed
    replication. The variance standard error uses the fourth central moment.
    """
    estimates = np.asarray(estimates, dtype=float)
    ok = estimates[np.isfinite(estimates)]
    failures = int(estimates.size - ok.size)
    R = int(ok.size)
    if R == 0:
        raise EstimatorInfeasibleError(f"estimator {name!r} failed in all {estimates.size} replications", name)
    mean = math.fsum(ok) / R
    variance = stderr = variance_stderr = None
    if R >= 2:
        dev = ok - mean
        variance = math.fsum(dev ** 2) / (R - 1)
        stderr = math.sqrt(variance / R)
        m4 = math.fsum(dev ** 4) / R
        variance_stderr = math.sqrt(max(m4 - variance ** 2 * (R - 3) / (R - 1), 0.0) / R)
    q025, q50, q975 = (float(v) for v in np.quantile(ok, [0.025, 0.5, 0.975]))
    return EstimatorSummary(name, method, mean, mean - target, variance, stderr, variance_stderr,
                            q025, q50, q975, failures, R)


SUMMARY_COLUMNS = ["method", "mean", "bias", "variance", "q025", "q50", "q975", "failures"]


@dataclass(frozen=True)
class McReport:
    name: str
    n: int
    reps: int
    seed: int
    ate: float
    per_estimator: Dict[str, EstimatorSummary]
    estimates: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    loglik: Optional[Dict[str, float]] = None
    sate: Optional[Dict[str, float]] = None

    def __getitem__(self, name: str) -> EstimatorSummary:
        return self.per_estimator[name]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "ate": self.ate,
            "estimators": {k: v.to_dict() for k, v in self.per_estimator.items()},
            "loglik": self.loglik,
            "sate": self.sate,
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per estimator; ``method`` holds the estimator name."""
        rows = [{**s.to_dict(), "method": name} for name, s in self.per_estimator.items()]
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)

    def to_csv(self, path: Optional[Union[str, Path]] = None) -> str:
        text = self.to_frame().to_csv(index=False, lineterminator="\n")
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def dump_frame(self) -> pd.DataFrame:
        """Per-replication estimates, one column per estimator; failures are empty."""
        frame = pd.DataFrame({name: self.estimates[name] for name in self.per_estimator})
        frame.insert(0, "rep", np.arange(self.reps))
        return frame

    def histogram(self, name: str, bins: int = 30) -> pd.DataFrame:
        if name not in self.per_estimator:
            raise LabInputError(f"unknown estimator {name!r}; report has {list(self.per_estimator)}")
        values = self.estimates[name]
        counts, edges = np.histogram(values[np.isfinite(values)], bins=int(bins))
        return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})


# ===========================================================================
# Log-likelihood
# ===========================================================================

def gaussian_stratified_loglik(d: Dataset, s: Stratification) -> float:
    """
    Gaussian log-likelihood of y with one fitted mean per occupied
    (stratum, z) cell and a pooled ML residual variance floored at 1e-12.
    """
    if d.x.min() < 1 or d.x.max() > s.K:
        raise LabInputError(f"dataset levels span {int(d.x.min())}..{int(d.x.max())}, stratification covers 1..{s.K}")
    labels = s.apply(d.x)
    cell = (labels - 1) * 2 + d.z
    counts = np.bincount(cell, minlength=2 * s.J).reshape(s.J, 2)
    occupied = counts.sum(axis=1) > 0
    for j in np.flatnonzero(occupied & (counts.min(axis=1) == 0)):
        arm = int(np.argmin(counts[j]))
        raise UnidentifiedStratumError(f"stratum {j + 1} has no units with z={arm}", int(j) + 1, arm)
    cells = int(np.count_nonzero(counts))
    if d.n - cells < 2:
        raise LabInputError(f"only {d.n - cells} residual degrees of freedom; the pooled variance needs at least 2")
    sums = np.bincount(cell, weights=d.y, minlength=2 * s.J)
    fitted = np.divide(sums, counts.ravel(), out=np.zeros(2 * s.J), where=counts.ravel() > 0)
    rss = math.fsum((d.y - fitted[cell]) ** 2)
    sigma2 = max(rss / d.n, VARIANCE_FLOOR)
    return -0.5 * d.n * math.log(2.0 * math.pi * sigma2) - rss / (2.0 * sigma2)


# ===========================================================================
# Runner
# ===========================================================================

def _fan_out(fn: Callable[[int], Any], reps: int, threads: Optional[int]) -> List[Any]:
    workers = threads if threads is not None else import_lab_variable("RW_LAB_THREADS")
    if workers <= 1:
        return [fn(r) for r in range(reps)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(reps)))


def _report_failures(name: str, failures: int, reps: int) -> None:
    if failures:
        warning_log(f"Estimator {name} failed in {failures} of {reps} replications", {"estimator": name})


def run(spec: ExperimentSpec, threads: Optional[int] = None) -> McReport:
    """
    Apply every estimator to every replication.

    :raises EstimatorInfeasibleError: an estimator failed in every replication.
    :raises DegenerateCellsError: a replication could not draw a full-cell dataset.
    """
    names = [e.name for e in spec.estimators]
    loglik_strats = {e.name: e.loglik_stratification(spec.dgp.K) for e in spec.estimators} if spec.loglik else {}
    loglik_strats = {k: v for k, v in loglik_strats.items() if v is not None}

    def replicate(r: int) -> Tuple[List[float], List[float], Optional[float]]:
        d = sample(spec.dgp, spec.n, derive_seed(spec.seed, r), require_full_cells=spec.require_full_cells)
        row = []
        for e in spec.estimators:
            try:
                row.append(e.apply(d, spec.dgp).estimate)
            except REPLICATION_FAILURES as err:
                logger.debug("replication %d: %s failed: %s", r, e.name, err)
                row.append(math.nan)
        ll = []
        for name, s in loglik_strats.items():
            try:
                ll.append(gaussian_stratified_loglik(d, s))
            except (LabInputError,) + REPLICATION_FAILURES:
                ll.append(math.nan)
        return row, ll, d.sate() if spec.record_sate else None

    results = _fan_out(replicate, spec.reps, threads)
    table = np.array([r[0] for r in results], dtype=float).reshape(spec.reps, len(names))
    ate = population_functionals(spec.dgp).ate

    per_estimator, estimates = {}, {}
    for i, e in enumerate(spec.estimators):
        column = table[:, i]
        summary = summarise(e.name, e.method.value, column, ate)
        _report_failures(e.name, summary.failures, spec.reps)
        per_estimator[e.name] = summary
        estimates[e.name] = column

    loglik = None
    if loglik_strats:
        ll_table = np.array([r[1] for r in results], dtype=float).reshape(spec.reps, len(loglik_strats))
        loglik = {}
        for i, name in enumerate(loglik_strats):
            ok = ll_table[np.isfinite(ll_table[:, i]), i]
            loglik[name] = math.fsum(ok) / ok.size if ok.size else None

    sate = None
    if spec.record_sate:
        values = np.array([r[2] for r in results], dtype=float)
        sate = {
            "mean": math.fsum(values) / values.size,
            "variance": math.fsum((values - values.mean()) ** 2) / (values.size - 1) if values.size > 1 else None,
            "q025": float(np.quantile(values, 0.025)),
            "q975": float(np.quantile(values, 0.975)),
        }

    info_log("Monte Carlo run finished", {"name": spec.name, "n": spec.n, "reps": spec.reps, "estimators": names})
    return McReport(spec.name, spec.n, spec.reps, spec.seed, ate, per_estimator, estimates, loglik, sate)


def variance_ordering_experiment(
    dgp: TabularDGP,
    strat_list: Union[Mapping[str, Stratification], Sequence[Tuple[str, Stratification]]],
    n: int,
    reps: int,
    seed: int,
    threads: Optional[int] = None,
) -> List[Tuple[str, float]]:
    """MC variance of the stratification estimator per named stratification, ascending; ties by name."""
    items = list(strat_list.items()) if isinstance(strat_list, Mapping) else list(strat_list)
    if not items:
        raise LabInputError("need at least one stratification")
    for name, s in items:
        bias = stratification_bias(dgp, s)
        if abs(bias) > BIAS_TOL:
            raise NonIdentifyingStratificationError(f"stratification {name!r} does not identify the ATE (bias {bias:.6g})", bias)
    spec = ExperimentSpec(
        dgp=dgp, n=n, reps=reps, seed=seed,
        estimators=tuple(EstimatorSpec(name, Method.STRATIFIED, stratification=s) for name, s in items),
        stratifications=dict(items),
    )
    report = run(spec, threads)
    ranked = [(name, report[name].variance if report[name].variance is not None else 0.0) for name, _ in items]
    return sorted(ranked, key=lambda item: (item[1], item[0]))


# ===========================================================================
# Twin designs
# ===========================================================================

TWIN_ESTIMATORS = ("unadjusted", "stratified")


@dataclass(frozen=True)
class TwinReport:
    pairs: int
    reps: int
    seed: int
    ate: float
    per_design: Dict[str, Dict[str, EstimatorSummary]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pairs": self.pairs,
            "reps": self.reps,
            "seed": self.seed,
            "ate": self.ate,
            "designs": {d: {k: v.to_dict() for k, v in row.items()} for d, row in self.per_design.items()},
        }


def twin_design_experiment(
    dgp: TabularDGP,
    pairs: int,
    reps: int,
    seed: int,
    designs: Sequence[str] = ("complete", "pair"),
    threads: Optional[int] = None,
) -> TwinReport:
    """
    Randomization design crossed with estimator: unadjusted contrast versus
    stratification on the pair type. Replication r of every design uses
    the same derived seed.
    """
    if reps < 1:
        raise LabInputError(f"reps must be at least 1, got {reps}")
    identity = Stratification.identity(dgp.K)
    ate = population_functionals(dgp).ate
    per_design = {}
    for design in designs:
        def replicate(r: int, design: str = design) -> List[float]:
            d = sample_twins(dgp, pairs, derive_seed(seed, r), design)
            row = [unadjusted(d).estimate]
            try:
                row.append(stratified(d, identity).estimate)
            except UnidentifiedStratumError:
                row.append(math.nan)
            return row

        table = np.array(_fan_out(replicate, reps, threads), dtype=float)
        row = {}
        for i, name in enumerate(TWIN_ESTIMATORS):
            row[name] = summarise(name, name, table[:, i], ate)
            _report_failures(f"{design}/{name}", row[name].failures, reps)
        per_design[design] = row
    return TwinReport(pairs, reps, seed, ate, per_design)


# ──────────────────────────────────────────────────────────────────────────────
#  Robot keywords
# ──────────────────────────────────────────────────────────────────────────────

class MonteCarlo:
    """Robot library running seeded experiments from spec files."""

    ROBOT_LIBRARY_SCOPE = "GLOBAL"

    @keyword("Run Experiment")
    def run_experiment(self, spec_path: str, seed: Optional[int] = None, threads: Optional[int] = None) -> Dict[str, Any]:
        spec = ExperimentSpec.load(spec_path)
        if seed is not None:
            spec = spec.with_overrides(seed=int(seed))
        report = run(spec, None if threads is None else int(threads))
        for name, s in report.per_estimator.items():
            robot_log(f"{name}: mean={s.mean:.6g} bias={s.bias:.6g} failures={s.failures}")
        return report.to_dict()

    @keyword("Stratified Log Likelihood")
    def loglik(self, dataset: Dataset, labels: Sequence[int]) -> float:
        return gaussian_stratified_loglik(dataset, Stratification.from_labels(labels))


# ──────────────────────────────────────────────────────────────────────────────
#  CLI helper for ad-hoc testing
# ──────────────────────────────────────────────────────────────────────────────

if __name__ == "__main__":
    import argparse
    import json

    ap = argparse.ArgumentParser(description="Run the experiment section of a spec file and print the report")
    ap.add_argument("spec")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    print(json.dumps(run(ExperimentSpec.load(args.spec), args.threads).to_dict(), indent=2))
