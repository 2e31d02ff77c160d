"""Tests for seeded experiment runs, summaries and the log-likelihood."""

from __future__ import annotations

import math

import numpy as np
import pytest
import yaml

from RW.DGP import Dataset, NoiseSpec, TabularDGP, sample, to_seed
from RW.Estimators import Method, stratified
from RW.Features import Stratification
from RW.Lab import (
    EstimatorInfeasibleError,
    LabInputError,
    NonIdentifyingStratificationError,
    SpecValidationError,
)
from RW.MonteCarlo import (
    EstimatorSpec,
    ExperimentSpec,
    MonteCarlo,
    derive_seed,
    gaussian_stratified_loglik,
    run,
    splitmix64,
    summarise,
    twin_design_experiment,
    variance_ordering_experiment,
)

S = Stratification.from_labels


def _doc(**experiment) -> dict:
    exp = {"n": 40, "reps": 20, "seed": 5,
           "estimators": [{"name": "s", "method": "stratified", "stratification": "identity"}]}
    exp.update(experiment)
    return {
        "schema_version": 1,
        "dgp": {"K": 2, "marginal": [0.5, 0.5], "pi": [0.3, 0.6], "mu": [0.0, 2.0], "tau": [1.0, 3.0],
                "upsilon": {"kind": "normal", "sd": 1.0}},
        "experiment": exp,
    }


def _spec(dgp: TabularDGP, n: int = 40, reps: int = 30, seed: int = 1, **kw) -> ExperimentSpec:
    return ExperimentSpec(
        dgp=dgp, n=n, reps=reps, seed=seed,
        estimators=(
            EstimatorSpec("strat", Method.STRATIFIED, stratification=Stratification.identity(dgp.K)),
            EstimatorSpec("naive", Method.UNADJUSTED),
        ),
        **kw,
    )


# ─────────────────────────────────────────────────────────────────────────────
# Seeds
# ─────────────────────────────────────────────────────────────────────────────

def test_splitmix64_reference_output():
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_derive_seed():
    assert derive_seed(123, 7) == 123 ^ splitmix64(7)
    assert derive_seed(-1, 0) == to_seed(-1) ^ splitmix64(0)
    assert derive_seed(-1, 0) < 1 << 64
    assert len({derive_seed(9, r) for r in range(100)}) == 100


# ─────────────────────────────────────────────────────────────────────────────
# run
# ─────────────────────────────────────────────────────────────────────────────

def test_run_is_reproducible_and_thread_independent(small_dgp):
    spec = _spec(small_dgp)
    a, b, c = run(spec, threads=1), run(spec, threads=1), run(spec, threads=4)
    for name in ("strat", "naive"):
        np.testing.assert_array_equal(a.estimates[name], b.estimates[name])
        np.testing.assert_array_equal(a.estimates[name], c.estimates[name])
    assert a.to_dict() == c.to_dict()


def test_each_replication_can_be_rerun_alone(small_dgp):
    spec = _spec(small_dgp, reps=5, seed=42)
    report = run(spec)
    d = sample(small_dgp, spec.n, derive_seed(42, 3), require_full_cells=True)
    assert report.estimates["strat"][3] == stratified(d, Stratification.identity(3)).estimate


def test_single_replication_has_no_variance(small_dgp):
    summary = run(_spec(small_dgp, reps=1))["strat"]
    assert summary.variance is None
    assert summary.variance_ci is None
    assert summary.reps_used == 1


def test_failed_replications_are_counted(small_dgp):
    report = run(_spec(small_dgp, n=14, reps=60, require_full_cells=False))
    summary = report["strat"]
    assert summary.failures > 0
    assert summary.failures + summary.reps_used == 60
    assert np.isnan(report.estimates["strat"]).sum() == summary.failures


def test_mean_tracks_the_ate_and_sate_is_recorded(small_dgp):
    report = run(_spec(small_dgp, n=200, reps=200, seed=8, record_sate=True))
    s = report["strat"]
    assert abs(s.bias) <= 4 * s.stderr
    assert report.ate == pytest.approx(float(np.dot(small_dgp.marginal, small_dgp.tau)))
    assert abs(report.sate["mean"] - report.ate) < 0.1
    assert report.sate["variance"] > 0


@pytest.mark.slow
def test_stderr_is_calibrated_across_seeds(small_dgp):
    ate = float(np.dot(small_dgp.marginal, small_dgp.tau))
    hits = 0
    for seed in range(20):
        s = run(_spec(small_dgp, n=100, reps=200, seed=seed))["strat"]
        hits += abs(s.mean - ate) <= 4 * s.stderr
    assert hits >= 19


def test_loglik_is_averaged_per_estimator(table2_dgp):
    spec = ExperimentSpec(
        dgp=table2_dgp, n=200, reps=20, seed=3, loglik=True,
        estimators=(
            EstimatorSpec("empty", Method.STRATIFIED, stratification=Stratification.constant(4)),
            EstimatorSpec("x2", Method.STRATIFIED, stratification=S([1, 1, 2, 2])),
            EstimatorSpec("ipw", Method.IPW),
        ),
    )
    report = run(spec)
    assert set(report.loglik) == {"empty", "x2"}
    assert report.loglik["x2"] > report.loglik["empty"]


# ─────────────────────────────────────────────────────────────────────────────
# Summaries and reports
# ─────────────────────────────────────────────────────────────────────────────

def test_summarise_skips_failures():
    s = summarise("e", "stratified", np.array([1.0, 2.0, 3.0, math.nan]), target=1.5)
    assert (s.mean, s.bias, s.variance, s.failures, s.reps_used) == (2.0, 0.5, 1.0, 1, 3)
    assert s.stderr == pytest.approx(math.sqrt(1.0 / 3.0))
    lo, hi = s.variance_ci
    assert lo < 1.0 < hi


def test_summarise_needs_one_success():
    with pytest.raises(EstimatorInfeasibleError) as err:
        summarise("e", "ipw", np.array([math.nan, math.nan]), target=0.0)
    assert err.value.estimator == "e"


def test_report_tables(small_dgp):
    report = run(_spec(small_dgp, reps=25))
    assert report.to_csv().splitlines()[0] == "method,mean,bias,variance,q025,q50,q975,failures"
    assert list(report.to_frame()["method"]) == ["strat", "naive"]
    dump = report.dump_frame()
    assert list(dump.columns) == ["rep", "strat", "naive"]
    assert len(dump) == 25
    hist = report.histogram("strat", bins=5)
    assert len(hist) == 5
    assert hist["count"].sum() == report["strat"].reps_used
    with pytest.raises(LabInputError):
        report.histogram("missing")


def test_report_csv_to_file(small_dgp, tmp_path):
    report = run(_spec(small_dgp, reps=3))
    path = tmp_path / "summary.csv"
    text = report.to_csv(path)
    assert path.read_text(encoding="utf-8") == text


# ─────────────────────────────────────────────────────────────────────────────
# Log-likelihood
# ─────────────────────────────────────────────────────────────────────────────

def test_finer_strata_never_lower_the_loglik(small_dgp):
    d = sample(small_dgp, 300, seed=12, require_full_cells=True)
    coarse = gaussian_stratified_loglik(d, Stratification.constant(3))
    fine = gaussian_stratified_loglik(d, Stratification.identity(3))
    assert fine >= coarse


def test_perfect_fit_hits_the_variance_floor():
    d = Dataset([1, 1, 1, 1, 2, 2], [0, 0, 1, 1, 0, 1], [1.0, 1.0, 4.0, 4.0, 2.0, 2.0])
    value = gaussian_stratified_loglik(d, Stratification.identity(2))
    assert value == pytest.approx(-0.5 * 6 * math.log(2.0 * math.pi * 1e-12))


def test_loglik_needs_two_residual_degrees_of_freedom():
    d = Dataset([1, 1, 2, 2, 2], [0, 1, 0, 1, 1], [0.0, 1.0, 2.0, 3.0, 4.0])
    with pytest.raises(LabInputError):
        gaussian_stratified_loglik(d, Stratification.identity(2))


def test_loglik_rejects_levels_outside_the_stratification():
    d = Dataset([1, 1, 3, 3, 3, 3], [0, 1, 0, 1, 0, 1], [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    with pytest.raises(LabInputError, match="covers 1..2"):
        gaussian_stratified_loglik(d, Stratification.identity(2))


# ─────────────────────────────────────────────────────────────────────────────
# Spec parsing
# ─────────────────────────────────────────────────────────────────────────────

def test_spec_from_mapping():
    spec = ExperimentSpec.from_mapping(_doc())
    assert (spec.n, spec.reps, spec.seed) == (40, 20, 5)
    assert spec.estimators[0].stratification == Stratification.identity(2)
    assert spec.require_full_cells


def test_spec_estimator_variants():
    spec = ExperimentSpec.from_mapping(_doc(estimators=[
        {"method": "ipw", "weights": "true_pi"},
        {"name": "fixed", "method": "ipw", "weights": [0.4, 0.4]},
        {"method": "two_stage", "s1": "identity", "s2": "constant", "marginal": "population"},
        {"method": "att_naive"},
    ]))
    assert [e.name for e in spec.estimators] == ["ipw", "fixed", "two_stage", "att_naive"]
    assert spec.estimators[1].weights == (0.4, 0.4)
    assert spec.estimators[2].marginal_weights == (1.0,)


@pytest.mark.parametrize(
    "doc, path",
    [
        ({"schema_version": 1, "dgp": _doc()["dgp"]}, "experiment"),
        (_doc(n=0), "experiment.n"),
        (_doc(reps="many"), "experiment.reps"),
        (_doc(seed=1.5), "experiment.seed"),
        (_doc(estimators=[]), "experiment.estimators"),
        (_doc(estimators=[{"method": "magic"}]), "experiment.estimators[0].method"),
        (_doc(estimators=[{"method": "stratified"}]), "experiment.estimators[0].stratification"),
        (_doc(estimators=[{"method": "ipw", "weights": [0.5]}]), "experiment.estimators[0].weights"),
        (_doc(estimators=[{"method": "ipw", "weights": "guess"}]), "experiment.estimators[0].weights"),
        (_doc(estimators=[{"method": "two_stage", "s1": "identity", "s2": "identity", "marginal": [1.0]}]),
         "experiment.estimators[0].marginal"),
    ],
)
def test_spec_errors_name_the_offending_path(doc, path):
    with pytest.raises(SpecValidationError) as err:
        ExperimentSpec.from_mapping(doc)
    assert err.value.path == path


def test_duplicate_estimator_names():
    with pytest.raises(SpecValidationError):
        ExperimentSpec.from_mapping(_doc(estimators=[{"method": "unadjusted"}, {"method": "unadjusted"}]))


def test_stratification_must_match_the_dgp(small_dgp):
    with pytest.raises(LabInputError):
        ExperimentSpec(dgp=small_dgp, n=10, reps=2, seed=0,
                       estimators=(EstimatorSpec("s", Method.STRATIFIED, stratification=Stratification.identity(2)),))


def test_with_overrides():
    spec = ExperimentSpec.from_mapping(_doc())
    assert spec.with_overrides(seed=9, reps=3).seed == 9
    assert spec.with_overrides(n=100).n == 100
    with pytest.raises(LabInputError):
        spec.with_overrides(dgp=None)


def test_run_experiment_keyword(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(_doc(reps=4)), encoding="utf-8")
    out = MonteCarlo().run_experiment(str(path), seed=11)
    assert out["seed"] == 11
    assert out["estimators"]["s"]["reps_used"] == 4


# ─────────────────────────────────────────────────────────────────────────────
# Derived experiments
# ─────────────────────────────────────────────────────────────────────────────

def test_variance_ordering_is_sorted():
    dgp = TabularDGP.build([0.5, 0.5], [0.2, 0.7], [3.0, 3.0], [1.0, 1.0], NoiseSpec.normal(1.0))
    ranked = variance_ordering_experiment(
        dgp, {"fine": Stratification.identity(2), "coarse": Stratification.constant(2)}, n=30, reps=200, seed=4,
    )
    assert {name for name, _ in ranked} == {"fine", "coarse"}
    assert [v for _, v in ranked] == sorted(v for _, v in ranked)


def test_variance_ordering_rejects_biased_strata(table2_dgp):
    with pytest.raises(NonIdentifyingStratificationError):
        variance_ordering_experiment(table2_dgp, [("xa", S([1, 1, 1, 2]))], n=40, reps=5, seed=0)
    with pytest.raises(LabInputError):
        variance_ordering_experiment(table2_dgp, {}, n=40, reps=5, seed=0)


def test_twin_designs():
    dgp = TabularDGP.build([0.5, 0.5], [0.5, 0.5], [0.0, 10.0], [2.0, 2.0], NoiseSpec.normal(1.0))
    report = twin_design_experiment(dgp, pairs=30, reps=80, seed=6)
    assert set(report.per_design) == {"complete", "pair"}
    paired = report.per_design["pair"]["stratified"]
    assert paired.failures == 0
    assert paired.variance < report.per_design["complete"]["unadjusted"].variance
    assert set(report.to_dict()["designs"]["pair"]) == {"unadjusted", "stratified"}
    with pytest.raises(LabInputError):
        twin_design_experiment(dgp, pairs=5, reps=0, seed=0)
