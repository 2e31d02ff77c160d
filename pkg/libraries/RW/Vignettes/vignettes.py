"""
Vignettes keyword library: pinned, declarative reproductions.

A vignette is a spec document under ``specs/``. Besides the experiment
sections it may list ``oracle`` analyses (exact or count-sampled theory
checks, variance orderings, twin designs, quantile effects) and
``acceptance`` criteria. Criteria are jmespath selectors evaluated against
the assembled report, so tolerances live in the vignette YAML files.

Scope: GLOBAL
"""

# ──────────────────────────────────────────────────────────────────────────────
# Imports
# ──────────────────────────────────────────────────────────────────────────────
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import jmespath
from jmespath.exceptions import JMESPathError
from robot.api.deco import keyword

from RW.DGP import TabularDGP, dgp_from_mapping
from RW.Features import (
    Stratification,
    is_constant_control,
    is_mean_unconfounded,
    stratification_from_spec,
)
from RW.Lab import (
    LabInputError,
    SpecValidationError,
    info_log,
    load_yaml_document,
    robot_log,
    warning_log,
)
from RW.MonteCarlo import ExperimentSpec, run, twin_design_experiment, variance_ordering_experiment
from RW.Oracle import (
    VarianceMode,
    exact_variance,
    mixture_observed_vs_potential,
    population_functionals,
    quantile,
    stratification_bias,
    theorem2_terms,
    theorem3_comparison,
)

logger = logging.getLogger(__name__)

ROBOT_LIBRARY_SCOPE = "GLOBAL"

__all__ = [
    "SPEC_DIR",
    "VIGNETTES",
    "UnknownVignetteError",
    "CriterionOutcome",
    "VignetteResult",
    "list_vignettes",
    "vignette_path",
    "run_document",
    "evaluate_criterion",
    "run_vignette",
    "Vignettes",
]

SPEC_DIR = Path(__file__).resolve().parent / "specs"

VIGNETTES: Dict[str, str] = {
    "table2": "pseudo-collider features: bias and log-likelihood of five conditioning sets",
    "ccdr": "constant control functions: variance ordering of four identifying stratifications",
    "qte": "mean-unconfounded but variance-confounded: ATE matches, quantile effects do not",
    "att": "prognostic unconfoundedness: naive contrast targets the ATT, not the ATE",
    "twin": "twin pairs: complete versus pair randomization, adjusted versus unadjusted",
    "thm2": "nested stratifications: over- and under-stratification penalties",
    "thm3": "true versus empirical propensities: the two regimes",
}


class UnknownVignetteError(LabInputError):
    def __init__(self, name: str):
        super().__init__(f"unknown vignette {name!r}; known vignettes: {', '.join(VIGNETTES)}")
        self.name = name

    def details(self) -> Dict[str, Any]:
        return {"vignette": self.name, "known": list(VIGNETTES)}


# ===========================================================================
# Oracle analyses
# ===========================================================================

class _Context:
    """Document-level DGP and raw stratification table, re-resolved per analysis DGP."""

    def __init__(self, doc: Mapping[str, Any]):
        self.dgp = dgp_from_mapping(doc.get("dgp"))
        raw = doc.get("stratifications") or {}
        if not isinstance(raw, Mapping):
            raise SpecValidationError("expected a mapping of name -> stratification", path="stratifications")
        self.raw_strats = {str(k): v for k, v in raw.items()}

    def dgp_for(self, analysis: Mapping[str, Any], where: str) -> TabularDGP:
        if "dgp" in analysis:
            return dgp_from_mapping(analysis["dgp"], f"{where}.dgp")
        return self.dgp

    def strat(self, raw: Any, dgp: TabularDGP, where: str) -> Stratification:
        if isinstance(raw, str) and raw in self.raw_strats:
            return stratification_from_spec(self.raw_strats[raw], dgp, f"stratifications.{raw}")
        return stratification_from_spec(raw, dgp, where)

    def named(self, dgp: TabularDGP) -> Dict[str, Stratification]:
        return {k: self.strat(k, dgp, k) for k in self.raw_strats}


def _int(analysis: Mapping[str, Any], key: str, where: str, default: Optional[int] = None) -> int:
    value = analysis.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise SpecValidationError(f"expected an integer, got {value!r}", path=f"{where}.{key}")
    return value


def _mode(analysis: Mapping[str, Any], where: str) -> VarianceMode:
    try:
        return VarianceMode(analysis.get("mode", VarianceMode.EXACT.value))
    except ValueError:
        raise SpecValidationError(
            f"mode must be one of {[m.value for m in VarianceMode]}", path=f"{where}.mode"
        ) from None


def _nested_strata(ctx: _Context, a: Mapping[str, Any], where: str, threads: Optional[int]) -> Dict[str, Any]:
    dgp = ctx.dgp_for(a, where)
    result = theorem2_terms(
        dgp, ctx.strat(a.get("coarse"), dgp, f"{where}.coarse"), ctx.strat(a.get("fine"), dgp, f"{where}.fine"),
        _int(a, "n", where), _mode(a, where), a.get("draws"), _int(a, "seed", where, 0),
    )
    return result.to_dict()


def _propensity_weights(ctx: _Context, a: Mapping[str, Any], where: str, threads: Optional[int]) -> Dict[str, Any]:
    dgp = ctx.dgp_for(a, where)
    return theorem3_comparison(dgp, _int(a, "n", where), _mode(a, where), a.get("draws"), _int(a, "seed", where, 0)).to_dict()


def _exact_variance(ctx: _Context, a: Mapping[str, Any], where: str, threads: Optional[int]) -> Dict[str, Any]:
    dgp = ctx.dgp_for(a, where)
    s = ctx.strat(a.get("stratification"), dgp, f"{where}.stratification")
    return exact_variance(dgp, s, _int(a, "n", where), _mode(a, where), a.get("draws"), _int(a, "seed", where, 0)).to_dict()


def _variance_ordering(ctx: _Context, a: Mapping[str, Any], where: str, threads: Optional[int]) -> Dict[str, Any]:
    dgp = ctx.dgp_for(a, where)
    names = a.get("stratifications")
    if not isinstance(names, list) or not names:
        raise SpecValidationError("expected a nonempty list of stratification names", path=f"{where}.stratifications")
    strats = [(str(name), ctx.strat(name, dgp, f"{where}.stratifications[{i}]")) for i, name in enumerate(names)]
    ranked = variance_ordering_experiment(
        dgp, strats, _int(a, "n", where), _int(a, "reps", where), _int(a, "seed", where, 0), threads,
    )
    return {"ranking": [name for name, _ in ranked], "variances": dict(ranked)}


def _twin(ctx: _Context, a: Mapping[str, Any], where: str, threads: Optional[int]) -> Dict[str, Any]:
    dgp = ctx.dgp_for(a, where)
    designs = a.get("designs", ["complete", "pair"])
    report = twin_design_experiment(
        dgp, _int(a, "pairs", where), _int(a, "reps", where), _int(a, "seed", where, 0), designs, threads,
    )
    return report.to_dict()


def _qte(ctx: _Context, a: Mapping[str, Any], where: str, threads: Optional[int]) -> Dict[str, Any]:
    dgp = ctx.dgp_for(a, where)
    q = a.get("q", 0.5)
    if isinstance(q, bool) or not isinstance(q, (int, float)):
        raise SpecValidationError(f"expected a probability level, got {q!r}", path=f"{where}.q")
    pair = mixture_observed_vs_potential(dgp)
    quantiles = {
        kind: {str(z): quantile(m, float(q)) for z, m in getattr(pair, kind).items()}
        for kind in ("observed", "potential")
    }
    observed = quantiles["observed"]["1"] - quantiles["observed"]["0"]
    potential = quantiles["potential"]["1"] - quantiles["potential"]["0"]
    return {
        "q": float(q),
        "quantiles": quantiles,
        "observed": observed,
        "potential": potential,
        "gap": abs(observed - potential),
        "mixtures": pair.to_dict(),
    }


def _stratification_checks(ctx: _Context, a: Mapping[str, Any], where: str, threads: Optional[int]) -> Dict[str, Any]:
    dgp = ctx.dgp_for(a, where)
    names = a.get("stratifications") or list(ctx.raw_strats)
    out = {}
    for i, name in enumerate(names):
        s = ctx.strat(name, dgp, f"{where}.stratifications[{i}]")
        out[str(name)] = {
            "labels": s.to_list(),
            "strata": s.J,
            "bias": stratification_bias(dgp, s),
            "mean_unconfounded": is_mean_unconfounded(dgp, s),
            "constant_control": is_constant_control(dgp, s),
        }
    return out


ANALYSES: Dict[str, Callable[[_Context, Mapping[str, Any], str, Optional[int]], Dict[str, Any]]] = {
    "nested_strata": _nested_strata,
    "propensity_weights": _propensity_weights,
    "exact_variance": _exact_variance,
    "variance_ordering": _variance_ordering,
    "twin": _twin,
    "qte": _qte,
    "stratification_checks": _stratification_checks,
}


# ===========================================================================
# Acceptance criteria
# ===========================================================================

@dataclass(frozen=True)
class CriterionOutcome:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def _select(report: Mapping[str, Any], expr: Any, where: str) -> float:
    if not isinstance(expr, str):
        raise SpecValidationError(f"expected a jmespath selector, got {expr!r}", path=where)
    try:
        value = jmespath.search(expr, report)
    except JMESPathError as e:
        raise SpecValidationError(f"bad selector {expr!r}: {e}", path=where) from e
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise LabInputError(f"selector {expr!r} gave {value!r}, not a number")
    return float(value)


def _constant(c: Mapping[str, Any], key: str, where: str, default: Optional[float] = None) -> float:
    raw = c.get(key, default)
    if isinstance(raw, bool) or not isinstance(raw, (int, float)) or not math.isfinite(raw):
        raise SpecValidationError(f"expected a finite number, got {raw!r}", path=f"{where}.{key}")
    return float(raw)


def _operand(report: Mapping[str, Any], c: Mapping[str, Any], selector_key: str, value_key: str, where: str) -> float:
    if selector_key in c:
        return _select(report, c[selector_key], f"{where}.{selector_key}")
    if value_key in c:
        return _constant(c, value_key, where)
    raise SpecValidationError(f"needs '{selector_key}' or '{value_key}'", path=where)


def _judge(report: Mapping[str, Any], c: Mapping[str, Any], where: str) -> Tuple[bool, str]:
    kind = c.get("kind")
    strict = bool(c.get("strict", True))
    if kind == "holds":
        expr = c.get("select")
        try:
            value = jmespath.search(expr, report) if isinstance(expr, str) else None
        except JMESPathError as e:
            raise SpecValidationError(f"bad selector {expr!r}: {e}", path=f"{where}.select") from e
        return value is True, f"{expr} is {value!r}"
    if kind == "within":
        value = _select(report, c.get("select"), f"{where}.select")
        target = _operand(report, c, "target_select", "target", where)
        if "tolerance" in c:
            tol = _constant(c, "tolerance", where)
        else:
            tol = _constant(c, "stderr_multiple", where, 3.0) * _select(report, c.get("stderr_select"), f"{where}.stderr_select")
        return abs(value - target) <= tol, f"value={value:.6g} target={target:.6g} tolerance={tol:.3g}"
    if kind in ("less", "greater"):
        left = _select(report, c.get("left"), f"{where}.left")
        right = _operand(report, c, "right", "value", where)
        if kind == "less":
            ok = left < right if strict else left <= right
            op = "<" if strict else "<="
        else:
            ok = left > right if strict else left >= right
            op = ">" if strict else ">="
        return ok, f"{left:.6g} {op} {right:.6g}"
    if kind == "ordered":
        selects = c.get("selects")
        if not isinstance(selects, list) or len(selects) < 2:
            raise SpecValidationError("expected at least two selectors", path=f"{where}.selects")
        values = [_select(report, s, f"{where}.selects[{i}]") for i, s in enumerate(selects)]
        pairs = list(zip(values, values[1:]))
        ok = all(a < b if strict else a <= b for a, b in pairs)
        return ok, ("<" if strict else "<=").join(f" {v:.6g} " for v in values).strip()
    raise SpecValidationError(f"unknown criterion kind {kind!r}; expected holds, within, less, greater or ordered", path=f"{where}.kind")


def evaluate_criterion(report: Mapping[str, Any], criterion: Mapping[str, Any], where: str = "acceptance") -> CriterionOutcome:
    """Judge one criterion; a selector that matches no number is a FAIL, a malformed criterion an error."""
    if not isinstance(criterion, Mapping):
        raise SpecValidationError("expected a mapping", path=where)
    name = str(criterion.get("name", where))
    try:
        passed, detail = _judge(report, criterion, where)
    except SpecValidationError:
        raise
    except LabInputError as e:
        passed, detail = False, str(e)
    return CriterionOutcome(name, passed, detail)


# ===========================================================================
# Runner
# ===========================================================================

@dataclass(frozen=True)
class VignetteResult:
    name: str
    report: Dict[str, Any]
    outcomes: Tuple[CriterionOutcome, ...]

    @property
    def passed(self) -> bool:
        return all(o.passed for o in self.outcomes)

    def lines(self) -> List[str]:
        return [o.line() for o in self.outcomes]

    def to_dict(self) -> Dict[str, Any]:
        return {**self.report, "vignette": self.name, "criteria": [o.to_dict() for o in self.outcomes],
                "passed": self.passed}


def _finite_or_none(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    return obj


def run_document(
    doc: Mapping[str, Any],
    name: str = "",
    threads: Optional[int] = None,
    seed: Optional[int] = None,
) -> VignetteResult:
    """
    Run the experiment (when present) and every oracle analysis of ``doc``,
    then judge its acceptance criteria. ``seed`` replaces the experiment seed
    and every analysis seed.
    """
    doc = copy.deepcopy(dict(doc))
    analyses = doc.get("oracle") or []
    if not isinstance(analyses, list):
        raise SpecValidationError("expected a list of analyses", path="oracle")
    if seed is not None:
        if isinstance(doc.get("experiment"), dict):
            doc["experiment"]["seed"] = seed
        for a in analyses:
            if isinstance(a, dict) and "seed" in a:
                a["seed"] = seed

    ctx = _Context(doc)
    named = ctx.named(ctx.dgp)
    report: Dict[str, Any] = {
        "name": name or str(doc.get("name", "")),
        "dgp": ctx.dgp.to_dict(),
        "functionals": population_functionals(ctx.dgp, named).to_dict(),
        "bias": {k: stratification_bias(ctx.dgp, s) for k, s in named.items()},
    }
    if "experiment" in doc:
        mc = run(ExperimentSpec.from_mapping(doc, name), threads).to_dict()
        report.update({k: mc[k] for k in ("n", "reps", "seed", "estimators", "loglik", "sate")})

    results: Dict[str, Any] = {}
    for i, a in enumerate(analyses):
        where = f"oracle[{i}]"
        if not isinstance(a, Mapping) or a.get("kind") not in ANALYSES:
            raise SpecValidationError(f"each analysis needs a kind in {list(ANALYSES)}", path=where)
        key = str(a.get("name", a["kind"]))
        results[key] = ANALYSES[a["kind"]](ctx, a, where, threads)
    report["oracle"] = results
    report = _finite_or_none(report)

    criteria = doc.get("acceptance") or []
    if not isinstance(criteria, list):
        raise SpecValidationError("expected a list of criteria", path="acceptance")
    outcomes = tuple(evaluate_criterion(report, c, f"acceptance[{i}]") for i, c in enumerate(criteria))
    for o in outcomes:
        info_log(o.line())
    failed = [o.name for o in outcomes if not o.passed]
    if failed:
        warning_log(f"{len(failed)} acceptance criteria failed", {"vignette": report["name"], "failed": failed})
    return VignetteResult(report["name"], report, outcomes)


def list_vignettes() -> Dict[str, str]:
    return dict(VIGNETTES)


def vignette_path(name: str) -> Path:
    if name not in VIGNETTES:
        raise UnknownVignetteError(name)
    return SPEC_DIR / f"{name}.yaml"


def run_vignette(name: str, seed: Optional[int] = None, threads: Optional[int] = None) -> VignetteResult:
    doc = load_yaml_document(vignette_path(name))
    return run_document(doc, name, threads, seed)


# ──────────────────────────────────────────────────────────────────────────────
#  Robot keywords
# ──────────────────────────────────────────────────────────────────────────────

class Vignettes:
    """Robot library reproducing the pinned vignettes."""

    ROBOT_LIBRARY_SCOPE = "GLOBAL"

    @keyword("List Vignettes")
    def names(self) -> List[str]:
        return list(VIGNETTES)

    @keyword("Reproduce Vignette")
    def reproduce(self, name: str, seed: Optional[int] = None, threads: Optional[int] = None) -> Dict[str, Any]:
        result = run_vignette(name, None if seed is None else int(seed), None if threads is None else int(threads))
        for line in result.lines():
            robot_log(line)
        return result.to_dict()

    @keyword("Vignette Should Pass")
    def should_pass(self, name: str, seed: Optional[int] = None) -> None:
        result = run_vignette(name, None if seed is None else int(seed))
        failed = [o.line() for o in result.outcomes if not o.passed]
        if failed:
            raise AssertionError("\n".join(failed))
