"""Tests for acceptance criteria and the pinned vignette documents."""

from __future__ import annotations

import pytest

from RW.Lab import SpecValidationError
from RW.Vignettes import (
    UnknownVignetteError,
    Vignettes,
    evaluate_criterion,
    list_vignettes,
    run_document,
    run_vignette,
    vignette_path,
)

REPORT = {
    "estimators": {"a": {"mean": 2.05, "stderr": 0.02, "variance_ci": [0.8, 1.2]}},
    "functionals": {"ate": 2.0},
    "checks": {"lam": {"constant_control": True, "mean_unconfounded": False}},
    "loglik": {"x": -10.0, "y": -5.0, "z": -1.0},
}


# ─────────────────────────────────────────────────────────────────────────────
# Criteria
# ─────────────────────────────────────────────────────────────────────────────

@pytest.mark.parametrize(
    "criterion, passed",
    [
        ({"kind": "within", "select": "estimators.a.mean", "target_select": "functionals.ate",
          "stderr_select": "estimators.a.stderr", "stderr_multiple": 3}, True),
        ({"kind": "within", "select": "estimators.a.mean", "target": 2.0, "tolerance": 0.01}, False),
        ({"kind": "less", "left": "estimators.a.variance_ci[1]", "value": 1.5}, True),
        ({"kind": "less", "left": "loglik.x", "right": "loglik.x"}, False),
        ({"kind": "less", "left": "loglik.x", "right": "loglik.x", "strict": False}, True),
        ({"kind": "greater", "left": "abs(loglik.x)", "value": 9.0}, True),
        ({"kind": "ordered", "selects": ["loglik.x", "loglik.y", "loglik.z"]}, True),
        ({"kind": "ordered", "selects": ["loglik.z", "loglik.y"]}, False),
        ({"kind": "holds", "select": "checks.lam.constant_control"}, True),
        ({"kind": "holds", "select": "checks.lam.mean_unconfounded"}, False),
        ({"kind": "holds", "select": "checks.missing"}, False),
    ],
)
def test_criterion_kinds(criterion, passed):
    outcome = evaluate_criterion(REPORT, {"name": "c", **criterion})
    assert outcome.passed is passed
    assert outcome.line().startswith("PASS c:" if passed else "FAIL c:")


def test_selector_without_a_number_fails_instead_of_raising():
    outcome = evaluate_criterion(REPORT, {"name": "gone", "kind": "less", "left": "estimators.b.mean", "value": 1.0})
    assert not outcome.passed
    assert "estimators.b.mean" in outcome.detail


@pytest.mark.parametrize(
    "criterion",
    [
        {"kind": "between", "select": "loglik.x"},
        {"kind": "less", "left": "loglik.[[", "value": 1.0},
        {"kind": "less", "left": "loglik.x"},
        {"kind": "ordered", "selects": ["loglik.x"]},
        {"kind": "within", "select": 3, "target": 1.0, "tolerance": 1.0},
    ],
)
def test_malformed_criteria_are_spec_errors(criterion):
    with pytest.raises(SpecValidationError):
        evaluate_criterion(REPORT, criterion)


@pytest.mark.parametrize(
    "criterion, path",
    [
        ({"kind": "within", "select": "loglik.x", "target": -10.0, "tolerance": "abc"}, "checks[0].tolerance"),
        ({"kind": "within", "select": "estimators.a.mean", "target": 2.0, "stderr_select": "estimators.a.stderr",
          "stderr_multiple": "three"}, "checks[0].stderr_multiple"),
        ({"kind": "within", "select": "loglik.x", "target": "minus ten", "tolerance": 1.0}, "checks[0].target"),
        ({"kind": "less", "left": "loglik.x", "value": None}, "checks[0].value"),
        ({"kind": "greater", "left": "loglik.x", "value": True}, "checks[0].value"),
    ],
)
def test_non_numeric_constants_name_their_path(criterion, path):
    with pytest.raises(SpecValidationError) as err:
        evaluate_criterion(REPORT, criterion, "checks[0]")
    assert err.value.path == path


def test_criterion_must_be_a_mapping():
    with pytest.raises(SpecValidationError):
        evaluate_criterion(REPORT, ["kind", "holds"])


# ─────────────────────────────────────────────────────────────────────────────
# Registry and documents
# ─────────────────────────────────────────────────────────────────────────────

def test_registry():
    names = list_vignettes()
    assert set(names) == {"table2", "ccdr", "qte", "att", "twin", "thm2", "thm3"}
    for name in names:
        assert vignette_path(name).is_file()
    assert Vignettes().names() == list(names)


def test_unknown_vignette():
    with pytest.raises(UnknownVignetteError) as err:
        vignette_path("table9")
    assert err.value.details()["vignette"] == "table9"


DOC = {
    "schema_version": 1,
    "name": "mini",
    "dgp": {"K": 2, "marginal": [0.5, 0.5], "pi": [0.5, 0.5], "mu": [0.0, 4.0], "tau": [1.0, 1.0],
            "upsilon": {"kind": "normal", "sd": 1.0}},
    "stratifications": {"coarse": "constant", "fine": "identity"},
    "experiment": {"n": 30, "reps": 50, "seed": 3,
                   "estimators": [{"name": "fine", "method": "stratified", "stratification": "fine"}]},
    "oracle": [
        {"name": "v", "kind": "exact_variance", "stratification": "fine", "n": 8},
        {"name": "t2", "kind": "nested_strata", "coarse": "coarse", "fine": "fine", "n": 8, "seed": 1},
        {"name": "checks", "kind": "stratification_checks"},
    ],
    "acceptance": [
        {"name": "unbiased", "kind": "within", "select": "bias.fine", "target": 0.0, "tolerance": 1e-12},
        {"name": "fine_better", "kind": "less", "left": "oracle.t2.fine.variance", "right": "oracle.t2.coarse.variance"},
        {"name": "coarse_identifies", "kind": "holds", "select": "oracle.checks.coarse.mean_unconfounded"},
    ],
}


def test_run_document():
    result = run_document(DOC)
    assert result.name == "mini"
    assert result.passed, result.lines()
    report = result.to_dict()
    assert report["functionals"]["ate"] == 1.0
    assert report["estimators"]["fine"]["reps_used"] == 50
    assert report["oracle"]["v"]["mode"] == "ExactEnumeration"
    assert report["oracle"]["checks"]["fine"]["strata"] == 2
    assert [c["name"] for c in report["criteria"]] == ["unbiased", "fine_better", "coarse_identifies"]


def test_seed_override_reaches_experiment_and_analyses():
    result = run_document(DOC, seed=99)
    assert result.report["seed"] == 99
    assert DOC["experiment"]["seed"] == 3


def test_document_without_an_experiment():
    doc = {k: v for k, v in DOC.items() if k != "experiment"}
    doc["acceptance"] = DOC["acceptance"][1:]
    result = run_document(doc)
    assert "estimators" not in result.report
    assert result.passed


def test_unknown_analysis_kind():
    doc = {**DOC, "oracle": [{"kind": "nonsense"}]}
    with pytest.raises(SpecValidationError) as err:
        run_document(doc)
    assert err.value.path == "oracle[0]"


def test_analysis_parameters_are_checked():
    doc = {**DOC, "oracle": [{"kind": "exact_variance", "stratification": "fine", "n": "eight"}]}
    with pytest.raises(SpecValidationError) as err:
        run_document(doc)
    assert err.value.path == "oracle[0].n"
    doc = {**DOC, "oracle": [{"kind": "propensity_weights", "n": 8, "mode": "Guess"}]}
    with pytest.raises(SpecValidationError):
        run_document(doc)


# ─────────────────────────────────────────────────────────────────────────────
# Pinned reproductions
# ─────────────────────────────────────────────────────────────────────────────

@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(list_vignettes()))
def test_vignette_passes(name):
    result = run_vignette(name)
    assert result.passed, "\n".join(result.lines())
