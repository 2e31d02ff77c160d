"""
strata-lab command line.

    strata-lab simulate  --spec table2.yaml --seed 7 --out r.json [--format csv]
    strata-lab oracle    --spec spec.yaml [--n 12 --mode ExactEnumeration]
    strata-lab backdoor  --dag box.dag --set X1,X4 | --enumerate [--minimal]
    strata-lab features  --spec spec.yaml [--search-coarsest NAME]
    strata-lab reproduce table2 | --list

Exit codes: 0 ok, 1 a reproduce criterion failed, 2 bad input, 3 runtime
failure. Errors go to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO

from RW.DGP import TabularDGP, dgp_from_mapping
from RW.Features import (
    is_constant_control,
    is_mean_unconfounded,
    iter_coarsenings,
    principal_deconfounder,
    relation,
    score_stratifications,
    stratification_from_spec,
)
from RW.Graphs import backdoor_check, classify_variables, enumerate_valid_sets, load_dag
from RW.Lab import LabError, LabInputError, SpecValidationError, load_yaml_document
from RW.MonteCarlo import ExperimentSpec, McReport, run
from RW.Oracle import (
    VarianceMode,
    exact_variance,
    population_functionals,
    stratification_bias,
    theorem2_terms,
    theorem3_comparison,
)
from RW.Vignettes import UnknownVignetteError, list_vignettes, run_vignette

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED_CRITERION = 1
EXIT_INPUT = 2
EXIT_RUNTIME = 3


# ──────────────────────────────────────────────────────────────────────────────
# Output helpers
# ──────────────────────────────────────────────────────────────────────────────

def _dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, default=str) + "\n"


def _emit(text: str, out: Optional[str], stdout: TextIO) -> None:
    if out:
        try:
            Path(out).write_text(text, encoding="utf-8")
        except OSError as e:
            raise LabInputError(f"cannot write {out}: {e.strerror}") from e
    else:
        stdout.write(text)


def _error_payload(err: BaseException) -> Dict[str, Any]:
    payload = {"error": type(err).__name__, "message": str(err)}
    if isinstance(err, LabError):
        payload.update({k: v for k, v in err.details().items() if k not in payload})
    return payload


def _spec_document(path: str) -> Dict[str, Any]:
    return load_yaml_document(Path(path))


def _named(doc: Dict[str, Any], dgp: TabularDGP) -> Dict[str, Any]:
    raw = doc.get("stratifications") or {}
    if not isinstance(raw, dict):
        raise SpecValidationError("expected a mapping of name -> stratification", path="stratifications")
    return {str(k): stratification_from_spec(v, dgp, f"stratifications.{k}") for k, v in raw.items()}


def _strat_arg(raw: str, named: Dict[str, Any], dgp: TabularDGP, flag: str):
    if raw in named:
        return named[raw]
    if "," in raw:
        try:
            labels = [int(v) for v in raw.split(",")]
        except ValueError:
            raise LabInputError(f"{flag}: expected a name or comma-separated labels, got {raw!r}") from None
        return stratification_from_spec(labels, dgp, flag)
    return stratification_from_spec(raw, dgp, flag)


# ──────────────────────────────────────────────────────────────────────────────
# Subcommands
# ──────────────────────────────────────────────────────────────────────────────

def _overrides(pairs: Sequence[str]) -> Dict[str, int]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or key not in ("n", "reps", "seed"):
            raise LabInputError(f"--set expects n=, reps= or seed=, got {item!r}")
        try:
            out[key] = int(value)
        except ValueError:
            raise LabInputError(f"--set {key} needs an integer, got {value!r}") from None
    return out


def _extra_outputs(args: argparse.Namespace) -> Dict[str, str]:
    # stdout carries only the summary; each extra table needs its own file
    extras = {}
    if args.dump_estimates is not None:
        extras["dump"] = args.dump_estimates
    if args.histogram is not None:
        extras["histogram"] = args.histogram[1]
    for key, path in extras.items():
        flag = "--dump-estimates" if key == "dump" else "--histogram"
        if not path.strip() or path == "-":
            raise LabInputError(f"{flag} needs a file path; stdout is reserved for the summary")
    targets = [p for p in (args.out, *extras.values()) if p]
    if len({str(Path(p).resolve()) for p in targets}) != len(targets):
        raise LabInputError("--out, --dump-estimates and --histogram must name different files")
    return extras


def cmd_simulate(args: argparse.Namespace, stdout: TextIO) -> int:
    spec = ExperimentSpec.from_mapping(_spec_document(args.spec), name=Path(args.spec).stem)
    overrides = _overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        spec = spec.with_overrides(**overrides)
    extras = _extra_outputs(args)
    report: McReport = run(spec, args.threads)

    text = report.to_csv() if args.format == "csv" else _dumps(report.to_dict())
    _emit(text, args.out, stdout)
    if "dump" in extras:
        _emit(report.dump_frame().to_csv(index=False, lineterminator="\n"), extras["dump"], stdout)
    if "histogram" in extras:
        _emit(report.histogram(args.histogram[0], args.bins).to_csv(index=False, lineterminator="\n"), extras["histogram"], stdout)
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace, stdout: TextIO) -> int:
    doc = _spec_document(args.spec)
    dgp = dgp_from_mapping(doc.get("dgp"))
    named = _named(doc, dgp)
    result: Dict[str, Any] = {
        "functionals": population_functionals(dgp, named).to_dict(),
        "bias": {k: stratification_bias(dgp, s) for k, s in named.items()},
    }
    mode = VarianceMode(args.mode)
    if args.n is not None:
        result["variance"] = {
            k: exact_variance(dgp, s, args.n, mode, args.draws, args.seed).to_dict() for k, s in named.items()
        }
        if args.coarse and args.fine:
            result["nested"] = theorem2_terms(
                dgp, _strat_arg(args.coarse, named, dgp, "--coarse"), _strat_arg(args.fine, named, dgp, "--fine"),
                args.n, mode, args.draws, args.seed,
            ).to_dict()
        if args.propensities:
            result["propensities"] = theorem3_comparison(dgp, args.n, mode, args.draws, args.seed).to_dict()
    elif args.coarse or args.fine or args.propensities:
        raise LabInputError("--coarse/--fine and --propensities need --n")
    _emit(_dumps(result), args.out, stdout)
    return EXIT_OK


def cmd_backdoor(args: argparse.Namespace, stdout: TextIO) -> int:
    g = load_dag(args.dag)
    result: Dict[str, Any] = {}
    if args.set is not None:
        nodes = [n.strip() for n in args.set.split(",") if n.strip()]
        result.update(backdoor_check(g, nodes).to_dict())
        result["set"] = nodes
    if args.enumerate:
        result["valid_sets"] = [sorted(s) for s in enumerate_valid_sets(g, minimal_only=args.minimal)]
        result["minimal"] = args.minimal
    if args.classify:
        result["roles"] = {k: v.value for k, v in classify_variables(g).items()}
    if not result:
        raise LabInputError("backdoor needs --set, --enumerate or --classify")
    _emit(_dumps(result), args.out, stdout)
    return EXIT_OK


def cmd_features(args: argparse.Namespace, stdout: TextIO) -> int:
    doc = _spec_document(args.spec)
    dgp = dgp_from_mapping(doc.get("dgp"))
    named = _named(doc, dgp)
    principal = principal_deconfounder(dgp)
    result: Dict[str, Any] = {
        "principal": principal.to_list(),
        "scores": {k: s.to_list() for k, s in score_stratifications(dgp).as_dict().items()},
        "stratifications": {
            k: {
                "labels": s.to_list(),
                "mean_unconfounded": is_mean_unconfounded(dgp, s),
                "constant_control": is_constant_control(dgp, s),
                "bias": stratification_bias(dgp, s),
                "vs_principal": relation(s, principal).value,
            }
            for k, s in named.items()
        },
    }
    if args.search_coarsest:
        start = _strat_arg(args.search_coarsest, named, dgp, "--search-coarsest")
        if not is_mean_unconfounded(dgp, start):
            raise LabInputError(f"{args.search_coarsest!r} is not mean-unconfounded; nothing to coarsen")
        valid = [c for c in iter_coarsenings(start) if is_mean_unconfounded(dgp, c)]
        best = min(valid, key=lambda c: (c.J, c.to_list()), default=start)
        result["coarsest"] = {"from": start.to_list(), "labels": best.to_list(), "strata": best.J,
                              "valid_coarsenings": len(valid)}
    _emit(_dumps(result), args.out, stdout)
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace, stdout: TextIO) -> int:
    if args.list:
        stdout.write("".join(f"{name}\t{text}\n" for name, text in list_vignettes().items()))
        return EXIT_OK
    if not args.name:
        raise LabInputError(f"reproduce needs a vignette name: {', '.join(list_vignettes())}")
    if args.name not in list_vignettes():
        raise UnknownVignetteError(args.name)
    result = run_vignette(args.name, args.seed, args.threads)
    if args.out:
        _emit(_dumps(result.to_dict()), args.out, stdout)
    stdout.write("".join(line + "\n" for line in result.lines()))
    return EXIT_OK if result.passed else EXIT_FAILED_CRITERION


# ──────────────────────────────────────────────────────────────────────────────
# Parser
# ──────────────────────────────────────────────────────────────────────────────

class LabArgumentParser(argparse.ArgumentParser):
    """Argument parser that raises LabInputError on usage errors instead of exiting."""

    def error(self, message: str):
        raise LabInputError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = LabArgumentParser(prog="strata-lab", description="Finite-sample stratification lab")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the experiment section of a spec")
    sim.add_argument("--spec", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out")
    sim.add_argument("--format", choices=["json", "csv"], default="json")
    sim.add_argument("--threads", type=int)
    sim.add_argument("--set", action="append", metavar="KEY=VALUE", help="override n, reps or seed")
    sim.add_argument("--dump-estimates", metavar="PATH", help="per-replication estimates as CSV")
    sim.add_argument("--histogram", nargs=2, metavar=("ESTIMATOR", "PATH"), help="(bin, count) CSV of one estimator")
    sim.add_argument("--bins", type=int, default=30)
    sim.set_defaults(func=cmd_simulate)

    ora = sub.add_parser("oracle", help="population functionals and exact variances")
    ora.add_argument("--spec", required=True)
    ora.add_argument("--n", type=int)
    ora.add_argument("--mode", choices=[m.value for m in VarianceMode], default=VarianceMode.EXACT.value)
    ora.add_argument("--draws", type=int)
    ora.add_argument("--seed", type=int, default=0)
    ora.add_argument("--coarse")
    ora.add_argument("--fine")
    ora.add_argument("--propensities", action="store_true", help="true versus empirical propensity variances")
    ora.add_argument("--out")
    ora.set_defaults(func=cmd_oracle)

    bd = sub.add_parser("backdoor", help="check adjustment sets on a DAG file")
    bd.add_argument("--dag", required=True)
    bd.add_argument("--set", help="comma-separated conditioning set (empty string for none)")
    bd.add_argument("--enumerate", action="store_true")
    bd.add_argument("--minimal", action="store_true")
    bd.add_argument("--classify", action="store_true")
    bd.add_argument("--out")
    bd.set_defaults(func=cmd_backdoor)

    ft = sub.add_parser("features", help="deconfounding checks for the document's stratifications")
    ft.add_argument("--spec", required=True)
    ft.add_argument("--search-coarsest", metavar="STRATIFICATION")
    ft.add_argument("--out")
    ft.set_defaults(func=cmd_features)

    rp = sub.add_parser("reproduce", help="run a pinned vignette")
    rp.add_argument("name", nargs="?")
    rp.add_argument("--list", action="store_true")
    rp.add_argument("--seed", type=int)
    rp.add_argument("--threads", type=int)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_reproduce)
    return ap


def main(argv: Optional[List[str]] = None, stdout: TextIO = None, stderr: TextIO = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, stdout)
    except LabInputError as e:
        stderr.write(json.dumps(_error_payload(e), default=str) + "\n")
        return EXIT_INPUT
    except LabError as e:
        stderr.write(json.dumps(_error_payload(e), default=str) + "\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
