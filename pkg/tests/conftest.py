"""Shared fixtures: the graph/DGP corpus and small DGPs used across modules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
import pytest

from RW.DGP import NoiseSpec, TabularDGP, load_dgp
from RW.Graphs import BinaryCoding, Dag, flatten_binary_covariates, parse_dag
from RW.Vignettes import vignette_path


@dataclass(frozen=True)
class CorpusCase:
    name: str
    dag: Dag
    coding: BinaryCoding
    dgp: TabularDGP


def _joint(coding: BinaryCoding, prob: Callable[..., float]) -> np.ndarray:
    """Marginal from a factorised joint ``prob(**assignment)``."""
    marginal = coding.tabulate(prob)
    return marginal / marginal.sum()


def _bern(p: float, v: int) -> float:
    return p if v else 1.0 - p


def _triangle() -> CorpusCase:
    dag = parse_dag("X -> Z\nX -> Y\nZ -> Y\n")
    coding = flatten_binary_covariates(["X"])
    dgp = TabularDGP.build(
        coding.independent_marginal({"X": 0.4}),
        coding.tabulate(lambda X: 0.3 + 0.4 * X),
        coding.tabulate(lambda X: 2.0 * X),
        coding.tabulate(lambda X: 1.0 + X),
        NoiseSpec.normal(1.0),
    )
    return CorpusCase("triangle", dag, coding, dgp)


def _graph2() -> CorpusCase:
    dag = parse_dag("""
        # X1, X2 confound; X3 instrument; X4 prognostic
        X1 -> Z
        X1 -> Y
        X2 -> Z
        X2 -> Y
        X3 -> Z
        X4 -> Y
        Z -> Y
    """)
    coding = flatten_binary_covariates(["X1", "X2", "X3", "X4"])
    dgp = TabularDGP.build(
        coding.independent_marginal({"X1": 0.5, "X2": 0.4, "X3": 0.6, "X4": 0.5}),
        coding.tabulate(lambda X1, X2, X3, X4: 0.15 + 0.2 * X1 + 0.25 * X2 + 0.3 * X3),
        coding.tabulate(lambda X1, X2, X3, X4: X1 + 2.0 * X2 + 3.0 * X4),
        coding.tabulate(lambda X1, X2, X3, X4: 1.0 + X4),
        NoiseSpec.normal(1.0),
    )
    return CorpusCase("graph2", dag, coding, dgp)


BOX_DAG = """
X1 -> Z
X1 -> X2
X2 -> Y
X4 -> X3
X3 -> Z
X4 -> Y
Z -> Y
"""


def _box() -> CorpusCase:
    dag = parse_dag(BOX_DAG)
    coding = flatten_binary_covariates(["X1", "X2", "X3", "X4"])
    marginal = _joint(coding, lambda X1, X2, X3, X4: (
        _bern(0.5, X1) * _bern(0.2 + 0.6 * X1, X2) * _bern(0.5, X4) * _bern(0.3 + 0.4 * X4, X3)
    ))
    dgp = TabularDGP.build(
        marginal,
        coding.tabulate(lambda X1, X2, X3, X4: 0.2 + 0.3 * X1 + 0.3 * X3),
        coding.tabulate(lambda X1, X2, X3, X4: 4.0 * X2 - 2.0 * X4),
        coding.tabulate(lambda X1, X2, X3, X4: 1.0),
        NoiseSpec.normal(1.0),
    )
    return CorpusCase("box", dag, coding, dgp)


def _pseudo_collider() -> CorpusCase:
    dag = parse_dag("X1 -> Z\nX2 -> Y\nZ -> Y\n")
    coding = flatten_binary_covariates(["X1", "X2"])
    return CorpusCase("pseudo_collider", dag, coding, load_dgp(vignette_path("table2")))


def _m_structure() -> CorpusCase:
    dag = parse_dag("""
        A -> Z
        A -> M
        B -> M
        B -> Y
        Z -> Y
    """)
    coding = flatten_binary_covariates(["A", "M", "B"])
    marginal = _joint(coding, lambda A, M, B: _bern(0.5, A) * _bern(0.5, B) * _bern(0.1 + 0.4 * A + 0.4 * B, M))
    dgp = TabularDGP.build(
        marginal,
        coding.tabulate(lambda A, M, B: 0.2 + 0.6 * A),
        coding.tabulate(lambda A, M, B: 5.0 * B),
        coding.tabulate(lambda A, M, B: 1.0),
        NoiseSpec.normal(1.0),
    )
    return CorpusCase("m_structure", dag, coding, dgp)


def _transformed_w() -> CorpusCase:
    # W = 1 iff X1 == X2 with X2 ~ Bernoulli(0.7) exogenous; X3, X4 averaged out
    dag = parse_dag("X1 -> W\nW -> Z\nW -> Y\nZ -> Y\n")
    coding = flatten_binary_covariates(["X1", "W"])
    marginal = _joint(coding, lambda X1, W: _bern(0.4, X1) * _bern(0.7 if X1 else 0.3, W))
    dgp = TabularDGP.build(
        marginal,
        coding.tabulate(lambda X1, W: 0.2 + 0.4 * W + 0.3 * 0.5),
        coding.tabulate(lambda X1, W: 1.0 + 3.0 * W + 2.0 * 0.5),
        coding.tabulate(lambda X1, W: 2.0),
        NoiseSpec.normal(1.0),
    )
    return CorpusCase("transformed_w", dag, coding, dgp)


CORPUS: List[CorpusCase] = [_triangle(), _graph2(), _box(), _pseudo_collider(), _m_structure(), _transformed_w()]


@pytest.fixture(params=CORPUS, ids=lambda c: c.name)
def corpus_case(request) -> CorpusCase:
    return request.param


@pytest.fixture
def corpus() -> Dict[str, CorpusCase]:
    return {c.name: c for c in CORPUS}


@pytest.fixture
def table2_dgp() -> TabularDGP:
    return load_dgp(vignette_path("table2"))


@pytest.fixture
def att_dgp() -> TabularDGP:
    return load_dgp(vignette_path("att"))


@pytest.fixture
def qte_dgp() -> TabularDGP:
    return load_dgp(vignette_path("qte"))


@pytest.fixture
def small_dgp() -> TabularDGP:
    """K=3 with confounding through mu and pi."""
    return TabularDGP.build(
        [0.3, 0.3, 0.4],
        [0.3, 0.5, 0.7],
        [0.0, 1.0, 3.0],
        [1.0, 2.0, 1.5],
        NoiseSpec.normal(1.0),
        NoiseSpec.uniform(0.5),
    )


@pytest.fixture
def box_dag_file(tmp_path):
    path = tmp_path / "box.dag"
    path.write_text(BOX_DAG, encoding="utf-8")
    return path
