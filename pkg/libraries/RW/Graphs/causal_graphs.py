"""
Graphs keyword library: causal DAGs over named nodes with a treatment
``Z`` and outcome ``Y``, the backdoor check for adjustment sets, and the
binary-covariate coding that turns graph nodes into tabular levels.

Graphs must keep ``Y`` as the only descendant of ``Z``.

DAG text format
---------------
    # comment
    X1 -> Z
    X1 -> Y
    Z -> Y
    W            (a bare name declares an isolated node)

Scope: GLOBAL
"""

# ──────────────────────────────────────────────────────────────────────────────
# Imports
# ──────────────────────────────────────────────────────────────────────────────
from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from robot.api.deco import keyword

from RW.Features import Stratification
from RW.Lab import GraphError, LabInputError, SizeLimitError, SpecValidationError, robot_log

logger = logging.getLogger(__name__)

ROBOT_LIBRARY_SCOPE = "GLOBAL"

__all__ = [
    "TREATMENT",
    "OUTCOME",
    "Dag",
    "AdjustmentVerdict",
    "VariableRole",
    "BinaryCoding",
    "parse_dag",
    "load_dag",
    "is_collider_on_path",
    "backdoor_check",
    "enumerate_valid_sets",
    "classify_variables",
    "flatten_binary_covariates",
    "Graphs",
]

TREATMENT = "Z"
OUTCOME = "Y"
MAX_CANDIDATES = 20
MAX_BINARY_COVARIATES = 16
ARROW = "->"


# ===========================================================================
# DAG
# ===========================================================================

@dataclass(frozen=True, eq=False)
class Dag:
    nodes: Tuple[str, ...]
    edges: Tuple[Tuple[str, str], ...]
    graph: nx.DiGraph = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = tuple(str(n) for n in self.nodes)
        edges = tuple((str(a), str(b)) for a, b in self.edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

        if len(set(nodes)) != len(nodes):
            dupes = sorted({n for n in nodes if nodes.count(n) > 1})
            raise GraphError(f"duplicate node names {dupes}")
        for required in (TREATMENT, OUTCOME):
            if required not in nodes:
                raise GraphError(f"graph must contain node {required!r}")
        known = set(nodes)
        seen = set()
        for parent, child in edges:
            for name in (parent, child):
                if name not in known:
                    raise GraphError(f"edge {parent} -> {child} uses unknown node {name!r}")
            if parent == child:
                raise GraphError(f"self-loop on {parent!r}", witness=[(parent, child)])
            if (parent, child) in seen:
                raise GraphError(f"duplicate edge {parent} -> {child}", witness=[(parent, child)])
            seen.add((parent, child))

        g = nx.DiGraph()
        g.add_nodes_from(nodes)
        g.add_edges_from(edges)
        try:
            cycle = nx.find_cycle(g)
        except nx.NetworkXNoCycle:
            cycle = None
        if cycle:
            raise GraphError(
                "graph has a directed cycle: " + " -> ".join([u for u, _ in cycle] + [cycle[0][0]]),
                witness=[(u, v) for u, v in cycle],
            )
        extra = sorted(nx.descendants(g, TREATMENT) - {OUTCOME})
        if extra:
            raise GraphError(
                f"Y must be the only descendant of Z; Z also reaches {extra}",
                witness=extra,
            )
        object.__setattr__(self, "graph", g)

    @property
    def covariates(self) -> List[str]:
        return [n for n in self.nodes if n not in (TREATMENT, OUTCOME)]

    def descendants_or_self(self, node: str) -> FrozenSet[str]:
        return frozenset(nx.descendants(self.graph, node) | {node})

    def to_text(self) -> str:
        lines = [f"{a} {ARROW} {b}" for a, b in self.edges]
        lines += [n for n in self.nodes if self.graph.degree(n) == 0]
        return "\n".join(lines) + "\n"


def parse_dag(text: str, where: str = "<dag>") -> Dag:
    nodes: List[str] = []
    edges: List[Tuple[str, str]] = []

    def add(name: str) -> None:
        if name not in nodes:
            nodes.append(name)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ARROW in line:
            parts = [p.strip() for p in line.split(ARROW)]
            if len(parts) != 2 or not all(parts) or any(" " in p for p in parts):
                raise SpecValidationError(f"line {lineno}: expected 'parent -> child', got {raw.strip()!r}", path=where)
            add(parts[0])
            add(parts[1])
            edges.append((parts[0], parts[1]))
        elif " " in line:
            raise SpecValidationError(f"line {lineno}: expected 'parent -> child' or a node name, got {raw.strip()!r}", path=where)
        else:
            add(line)
    return Dag(tuple(nodes), tuple(edges))


def load_dag(path: Union[str, Path]) -> Dag:
    path = Path(path)
    if not path.is_file():
        raise SpecValidationError("DAG file not found", path=str(path))
    return parse_dag(path.read_text(encoding="utf-8"), where=str(path))


# ===========================================================================
# Backdoor criterion
# ===========================================================================

@dataclass(frozen=True)
class AdjustmentVerdict:
    valid: bool
    open_paths: Tuple[Tuple[str, ...], ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {"valid": self.valid, "open_paths": [list(p) for p in self.open_paths]}


def _check_path(g: Dag, path: Sequence[str]) -> None:
    if len(path) < 2:
        raise LabInputError("a path needs at least two nodes")
    for a, b in zip(path, path[1:]):
        if not (g.graph.has_edge(a, b) or g.graph.has_edge(b, a)):
            raise LabInputError(f"{a} and {b} are not adjacent")


def is_collider_on_path(g: Dag, path: Sequence[str], v: str) -> bool:
    """True iff both path edges at interior node ``v`` point into it."""
    _check_path(g, path)
    if v not in path[1:-1]:
        raise LabInputError(f"{v!r} is not an interior node of the path {list(path)}")
    i = list(path).index(v)
    return g.graph.has_edge(path[i - 1], v) and g.graph.has_edge(path[i + 1], v)


def _blocked(g: Dag, path: Sequence[str], s: FrozenSet[str]) -> bool:
    for i in range(1, len(path) - 1):
        w = path[i]
        if g.graph.has_edge(path[i - 1], w) and g.graph.has_edge(path[i + 1], w):
            if not (g.descendants_or_self(w) & s):
                return True
        elif w in s:
            return True
    return False


def _backdoor_paths(g: Dag) -> List[Tuple[str, ...]]:
    undirected = g.graph.to_undirected(as_view=True)
    paths = [tuple(p) for p in nx.all_simple_paths(undirected, TREATMENT, OUTCOME)]
    return sorted(p for p in paths if p != (TREATMENT, OUTCOME))


def _as_names(g: Dag, s: Iterable[str]) -> FrozenSet[str]:
    names = frozenset(s)
    unknown = sorted(names - set(g.nodes))
    if unknown:
        raise LabInputError(f"unknown nodes {unknown}")
    if names & {TREATMENT, OUTCOME}:
        raise LabInputError("an adjustment set cannot contain Z or Y")
    return names


def backdoor_check(g: Dag, s: Iterable[str]) -> AdjustmentVerdict:
    """
    Every path between Z and Y other than the direct edge must be blocked by
    ``s``: a non-collider in ``s``, or a collider with neither itself nor a
    descendant in ``s``.
    """
    names = _as_names(g, s)
    open_paths = tuple(p for p in _backdoor_paths(g) if not _blocked(g, p, names))
    return AdjustmentVerdict(valid=not open_paths, open_paths=open_paths)


def enumerate_valid_sets(
    g: Dag,
    candidates: Optional[Iterable[str]] = None,
    minimal_only: bool = False,
) -> List[FrozenSet[str]]:
    """
    Subsets of ``candidates`` passing the backdoor check, ordered by size and
    then lexicographically; ``minimal_only`` keeps the inclusion-minimal ones.
    """
    pool = sorted(_as_names(g, g.covariates if candidates is None else candidates))
    if len(pool) > MAX_CANDIDATES:
        raise SizeLimitError(f"{len(pool)} candidates exceeds the limit of {MAX_CANDIDATES} (2^{MAX_CANDIDATES} subsets)")
    paths = _backdoor_paths(g)
    found: List[FrozenSet[str]] = []
    for size in range(len(pool) + 1):
        for combo in itertools.combinations(pool, size):
            s = frozenset(combo)
            if minimal_only and any(v <= s for v in found):
                continue
            if all(_blocked(g, p, s) for p in paths):
                found.append(s)
    logger.debug("%d valid adjustment sets among %d candidates", len(found), len(pool))
    return found


class VariableRole(str, enum.Enum):
    CONFOUNDER = "Confounder"
    PROGNOSTIC = "Prognostic"
    INSTRUMENT = "Instrument"
    NOISE = "Noise"


def classify_variables(g: Dag) -> Dict[str, VariableRole]:
    """
    Confounder: ancestor of Z and of Y along a route avoiding Z;
    Prognostic: the latter only; Instrument: the former only; Noise: neither.
    """
    anc_z = nx.ancestors(g.graph, TREATMENT)
    without_z = g.graph.subgraph([n for n in g.nodes if n != TREATMENT])
    anc_y = nx.ancestors(without_z, OUTCOME)
    roles: Dict[str, VariableRole] = {}
    for node in g.covariates:
        if node in anc_z and node in anc_y:
            roles[node] = VariableRole.CONFOUNDER
        elif node in anc_y:
            roles[node] = VariableRole.PROGNOSTIC
        elif node in anc_z:
            roles[node] = VariableRole.INSTRUMENT
        else:
            roles[node] = VariableRole.NOISE
    return roles


# ===========================================================================
# Binary covariate coding
# ===========================================================================

@dataclass(frozen=True)
class BinaryCoding:
    """
    Levels 1..2^d for d binary nodes; node ``names[i]`` is bit i of x - 1,
    so with (X1, X2): (0,0)->1, (1,0)->2, (0,1)->3, (1,1)->4.
    """

    names: Tuple[str, ...]

    @property
    def d(self) -> int:
        return len(self.names)

    @property
    def K(self) -> int:
        return 1 << self.d

    def level(self, assignment: Mapping[str, int]) -> int:
        missing = [n for n in self.names if n not in assignment]
        if missing:
            raise LabInputError(f"assignment misses nodes {missing}")
        x = 0
        for bit, name in enumerate(self.names):
            value = assignment[name]
            if value not in (0, 1):
                raise LabInputError(f"{name}={value!r} is not binary")
            x |= int(value) << bit
        return x + 1

    def assignment(self, level: int) -> Dict[str, int]:
        if not 1 <= level <= self.K:
            raise LabInputError(f"level {level} outside 1..{self.K}")
        return {name: ((level - 1) >> bit) & 1 for bit, name in enumerate(self.names)}

    def assignments(self) -> List[Dict[str, int]]:
        return [self.assignment(x) for x in range(1, self.K + 1)]

    def tabulate(self, fn: Callable[..., float]) -> np.ndarray:
        """Evaluate ``fn(**assignment)`` on every level."""
        return np.array([float(fn(**a)) for a in self.assignments()])

    def stratification(self, nodes: Iterable[str]) -> Stratification:
        """Stratify levels by the values of ``nodes`` (empty -> one stratum)."""
        wanted = set(nodes)
        chosen = [n for n in self.names if n in wanted]
        unknown = wanted - set(self.names)
        if unknown:
            raise LabInputError(f"unknown covariates {sorted(unknown)}")
        return Stratification.from_keys([tuple(a[n] for n in chosen) for a in self.assignments()])

    def independent_marginal(self, probs: Mapping[str, float]) -> np.ndarray:
        """Joint law of independent Bernoulli(probs[name]) nodes."""
        return self.tabulate(lambda **a: np.prod([probs[n] if a[n] else 1.0 - probs[n] for n in self.names]))


def flatten_binary_covariates(assignments: Union[Sequence[str], Mapping[str, Sequence[int]]]) -> BinaryCoding:
    """
    Coding for a list of binary nodes, or a mapping node -> value table whose
    tables must be exactly (0, 1).
    """
    if isinstance(assignments, Mapping):
        for name, values in assignments.items():
            if sorted(set(values)) != [0, 1]:
                raise LabInputError(f"{name} takes values {sorted(set(values))}, expected binary (0, 1)")
        names = tuple(assignments)
    else:
        names = tuple(assignments)
    if not names:
        raise LabInputError("at least one covariate is required")
    if len(set(names)) != len(names):
        raise LabInputError("covariate names must be unique")
    if len(names) > MAX_BINARY_COVARIATES:
        raise SizeLimitError(f"{len(names)} binary covariates exceeds the limit of {MAX_BINARY_COVARIATES}")
    return BinaryCoding(names)


# ──────────────────────────────────────────────────────────────────────────────
#  Robot keywords
# ──────────────────────────────────────────────────────────────────────────────

class Graphs:
    """Robot library exposing keywords **Load DAG**, **Backdoor Check**,
    **Enumerate Valid Sets** and **Classify Variables**."""

    ROBOT_LIBRARY_SCOPE = "GLOBAL"

    @keyword("Load DAG")
    def load(self, path: str) -> Dag:
        return load_dag(path)

    @keyword("Backdoor Check")
    def check(self, dag: Dag, *nodes: str) -> Dict[str, Any]:
        verdict = backdoor_check(dag, nodes)
        robot_log(f"Adjustment set {sorted(nodes)} valid={verdict.valid}",
                  level="INFO" if verdict.valid else "WARN")
        return verdict.to_dict()

    @keyword("Enumerate Valid Sets")
    def enumerate_sets(self, dag: Dag, minimal: bool = True) -> List[List[str]]:
        return [sorted(s) for s in enumerate_valid_sets(dag, minimal_only=bool(minimal))]

    @keyword("Classify Variables")
    def classify(self, dag: Dag) -> Dict[str, str]:
        return {node: role.value for node, role in classify_variables(dag).items()}


# ──────────────────────────────────────────────────────────────────────────────
#  CLI helper for ad-hoc testing
# ──────────────────────────────────────────────────────────────────────────────

if __name__ == "__main__":
    import argparse
    import pprint

    ap = argparse.ArgumentParser(description="List minimal backdoor adjustment sets of a DAG file")
    ap.add_argument("file", type=Path, help="Path to DAG text")
    ns = ap.parse_args()

    dag = load_dag(ns.file)
    pprint.pp({"roles": {k: v.value for k, v in classify_variables(dag).items()},
               "minimal_sets": [sorted(s) for s in enumerate_valid_sets(dag, minimal_only=True)]})
