"""Tests for DGP construction, loading and seeded sampling."""

from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest

from RW.DGP import (
    CovariateSpace,
    Dataset,
    NoiseSpec,
    TabularDGP,
    cell_counts,
    conditional_moments,
    dgp_from_mapping,
    load_dgp,
    sample,
    sample_twins,
    to_seed,
)
from RW.Lab import DegenerateCellsError, LabInputError, SpecValidationError


def _k1(pi: float = 0.5, **kw) -> TabularDGP:
    return TabularDGP.build([1.0], [pi], [0.0], [1.0], **kw)


# ─────────────────────────────────────────────────────────────────────────────
# Construction
# ─────────────────────────────────────────────────────────────────────────────

def test_noise_variances():
    assert NoiseSpec.normal(2.0).variance == 4.0
    assert math.isclose(NoiseSpec.uniform(0.5).variance, 1.0 / 12.0)
    assert NoiseSpec.degenerate().variance == 0.0


def test_negative_noise_scale_is_rejected():
    with pytest.raises(LabInputError):
        NoiseSpec.normal(-1.0)


@pytest.mark.parametrize("pi", [0.0, 1.0, 1.2])
def test_positivity_violation_is_rejected(pi):
    with pytest.raises(LabInputError, match="positivity"):
        _k1(pi)


def test_marginal_must_sum_to_one():
    with pytest.raises(LabInputError):
        CovariateSpace(2, np.array([0.5, 0.6]))
    with pytest.raises(LabInputError):
        CovariateSpace(2, np.array([1.5, -0.5]))


def test_table_lengths_must_match_k():
    with pytest.raises(LabInputError):
        TabularDGP.build([0.5, 0.5], [0.5], [0.0, 0.0], [1.0, 1.0])


def test_conditional_moments_per_cell(small_dgp):
    cm = conditional_moments(small_dgp)
    np.testing.assert_allclose(cm.mean[:, 0], small_dgp.mu)
    np.testing.assert_allclose(cm.mean[:, 1], small_dgp.mu + small_dgp.tau)
    np.testing.assert_allclose(cm.variance[:, 0], 1.0)
    # effect noise uniform(0.5) adds 1/12 under treatment
    np.testing.assert_allclose(cm.variance[:, 1], 1.0 + 1.0 / 12.0)


def test_to_seed_masks_negative_and_wide_seeds():
    assert to_seed(-1) == (1 << 64) - 1
    assert to_seed((1 << 64) + 5) == 5


# ─────────────────────────────────────────────────────────────────────────────
# Loading
# ─────────────────────────────────────────────────────────────────────────────

SPEC_TEXT = """
schema_version: 1
dgp:
  K: 2
  marginal: [0.5, 0.5]
  pi: [0.25, 0.75]
  mu: [0.0, 1.0]
  tau: [2.0, 2.0]
  upsilon: {kind: normal, sd: 1.0}
"""


def test_load_dgp_from_yaml_text_defaults_delta_to_degenerate():
    dgp = load_dgp(SPEC_TEXT)
    assert dgp.K == 2
    assert all(d.variance == 0.0 for d in dgp.delta)
    assert dgp.upsilon[1].scale == 1.0


def test_load_dgp_from_file(tmp_path):
    path = tmp_path / "dgp.yaml"
    path.write_text(SPEC_TEXT, encoding="utf-8")
    assert load_dgp(path).to_dict() == load_dgp(SPEC_TEXT).to_dict()


def test_missing_spec_file_is_a_validation_error(tmp_path):
    with pytest.raises(SpecValidationError):
        load_dgp(tmp_path / "missing.yaml")


def test_schema_version_is_required():
    with pytest.raises(SpecValidationError, match="schema_version"):
        load_dgp("dgp:\n  K: 1\n")


@pytest.mark.parametrize(
    "patch, path",
    [
        ({"K": 0}, "dgp.K"),
        ({"pi": [0.5]}, "dgp.pi"),
        ({"mu": [0.0, "a"]}, "dgp.mu[1]"),
        ({"upsilon": {"kind": "cauchy"}}, "dgp.upsilon"),
        ({"upsilon": {"kind": "normal"}}, "dgp.upsilon.sd"),
    ],
)
def test_dgp_from_mapping_reports_the_offending_path(patch, path):
    raw = {"K": 2, "marginal": [0.5, 0.5], "pi": [0.25, 0.75], "mu": [0.0, 1.0], "tau": [2.0, 2.0], **patch}
    with pytest.raises(SpecValidationError) as err:
        dgp_from_mapping(raw)
    assert err.value.path == path


def test_dgp_from_mapping_wraps_positivity_errors():
    raw = {"K": 1, "marginal": [1.0], "pi": [1.0], "mu": [0.0], "tau": [0.0]}
    with pytest.raises(SpecValidationError):
        dgp_from_mapping(raw)


# ─────────────────────────────────────────────────────────────────────────────
# Sampling
# ─────────────────────────────────────────────────────────────────────────────

def test_sample_is_deterministic_per_seed(small_dgp):
    a = sample(small_dgp, 200, seed=7)
    b = sample(small_dgp, 200, seed=7)
    c = sample(small_dgp, 200, seed=8)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)


def test_sample_ranges(small_dgp):
    d = sample(small_dgp, 500, seed=1)
    assert d.n == 500
    assert d.x.min() >= 1 and d.x.max() <= small_dgp.K
    assert set(np.unique(d.z).tolist()) <= {0, 1}


def test_outcome_equation_without_noise():
    dgp = TabularDGP.build([0.5, 0.5], [0.3, 0.6], [1.0, 5.0], [2.0, -1.0])
    d = sample(dgp, 300, seed=3)
    expected = dgp.mu[d.x - 1] + dgp.tau[d.x - 1] * d.z
    np.testing.assert_allclose(d.y, expected)
    np.testing.assert_allclose(d.ite, dgp.tau[d.x - 1])
    assert math.isclose(d.sate(), float(np.mean(dgp.tau[d.x - 1])))


def test_require_full_cells_fills_every_cell(small_dgp):
    for seed in range(20):
        d = sample(small_dgp, 2 * small_dgp.K, seed=seed, require_full_cells=True)
        assert cell_counts(d, small_dgp.K).is_full()


def test_require_full_cells_needs_two_k_units(small_dgp):
    with pytest.raises(LabInputError):
        sample(small_dgp, 5, seed=0, require_full_cells=True)


def test_zero_mass_level_can_never_fill():
    dgp = TabularDGP.build([1.0, 0.0], [0.5, 0.5], [0.0, 0.0], [1.0, 1.0])
    with pytest.raises(DegenerateCellsError) as err:
        sample(dgp, 10, seed=0, require_full_cells=True)
    assert err.value.details()["cell"]["x"] == 2


def test_attempt_cap_names_an_empty_cell():
    dgp = _k1(pi=1e-9)
    with pytest.raises(DegenerateCellsError) as err:
        sample(dgp, 2, seed=0, require_full_cells=True, max_attempts=3)
    assert err.value.attempts == 3
    assert err.value.details()["cell"] == {"x": 1, "z": 1}


@pytest.mark.parametrize("n", [0, -3, 2.5, True])
def test_n_must_be_a_positive_integer(small_dgp, n):
    with pytest.raises(LabInputError):
        sample(small_dgp, n, seed=0)


def test_twin_pairs_share_covariates():
    dgp = TabularDGP.build([0.5, 0.5], [0.5, 0.5], [0.0, 10.0], [2.0, 2.0], NoiseSpec.normal(1.0))
    for design in ("complete", "pair"):
        d = sample_twins(dgp, 50, seed=11, design=design)
        assert d.n == 100
        np.testing.assert_array_equal(d.x[0::2], d.x[1::2])


def test_pair_design_treats_exactly_one_twin():
    dgp = TabularDGP.build([1.0], [0.5], [0.0], [1.0])
    d = sample_twins(dgp, 40, seed=5, design="pair")
    np.testing.assert_array_equal(d.z[0::2] + d.z[1::2], np.ones(40))


def test_unknown_twin_design():
    with pytest.raises(LabInputError):
        sample_twins(_k1(), 10, seed=0, design="crossover")


# ─────────────────────────────────────────────────────────────────────────────
# Dataset
# ─────────────────────────────────────────────────────────────────────────────

def test_dataset_rejects_non_binary_treatment():
    with pytest.raises(LabInputError):
        Dataset([1, 2], [0, 2], [1.0, 2.0])


def test_dataset_rejects_mismatched_lengths():
    with pytest.raises(LabInputError):
        Dataset([1, 2], [0], [1.0, 2.0])


@pytest.mark.parametrize("x", [[0, 1], [1, -2]])
def test_dataset_rejects_levels_below_one(x):
    with pytest.raises(LabInputError, match="numbered from 1"):
        Dataset(x, [0, 1], [1.0, 2.0])


def test_dataset_csv_round_trip(tmp_path, small_dgp):
    d = sample(small_dgp, 50, seed=2)
    frame = pd.read_csv(d.to_csv(tmp_path / "d.csv"), float_precision="round_trip")
    assert list(frame.columns) == ["x", "z", "y"]
    np.testing.assert_array_equal(frame["x"].to_numpy(), d.x)
    np.testing.assert_array_equal(frame["y"].to_numpy(), d.y)


def test_cell_counts_table():
    d = Dataset([1, 1, 2, 2, 2], [0, 1, 1, 1, 0], [0.0] * 5)
    counts = cell_counts(d, 3)
    np.testing.assert_array_equal(counts.n_xz, [[1, 1], [1, 2], [0, 0]])
    assert counts.n == 5
    assert counts.empty_cells() == [(3, 0), (3, 1)]
    assert not counts.is_full()
