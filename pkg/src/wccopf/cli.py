"""Command-line front end: ``wccopf solve | validate | compare``.

Run configs are JSON::

    {
      "formulation": "cc" | "wcc-linear" | "wcc-quadratic",
      "policy": {"type": "affine"} | {"type": "piecewise", "omega_plus_mw": 70, "omega_minus_mw": -70},
      "epsilon": {"cc": {"line": 0.1, "gen": 0.001, "overrides": {"line:3": 0.05}}, ...},
      "fluctuation": {"std_mw": [9.4, 13.1], "correlation": 0.2},
      "validation": {"sample_count": 10000, "seed": 0, "thresholds": [0, 1, 2, 5, 10]},
      "output": {"dir": "results"}
    }

Every field is optional.  Precedence is command-line flag, then config
field, then built-in default.  The output directory falls back to
``$WCCOPF_OUT_DIR`` and then ``./wccopf-out``.

Exit codes: 0 success (optimal), 1 bad input or usage, 2 infeasible,
3 iteration limit.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

from . import chance as ch
from . import montecarlo as mc
from . import netmodel as nm
from . import solver as sv
from .policy import FluctuationModel

ENV_OUT_DIR = "WCCOPF_OUT_DIR"
FALLBACK_OUT_DIR = "wccopf-out"

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_ITERATION_LIMIT = 0, 1, 2, 3
STATUS_EXIT = {sv.STATUS_OPTIMAL: EXIT_OK, sv.STATUS_INFEASIBLE: EXIT_INFEASIBLE,
               sv.STATUS_ITERATION_LIMIT: EXIT_ITERATION_LIMIT}

DEFAULTS = {
    "formulation": "cc",
    "policy": {"type": "affine"},
    "epsilon": {
        "cc": {"line": 0.1, "gen": 0.001},
        "wcc-linear": {"line": 0.1, "gen": 0.001},
        "wcc-quadratic": {"line": 0.1, "gen": 1e-5},
    },
    "piecewise": {"omega_plus_mw": 70.0, "omega_minus_mw": -70.0},
    "fluctuation": {"std_mw": [9.4, 13.1], "correlation": 0.2},
    "validation": {"sample_count": 10_000, "seed": 0, "thresholds": list(mc.DEFAULT_THRESHOLDS)},
}
_CONFIG_KEYS = {"formulation", "policy", "epsilon", "fluctuation", "validation", "output"}


class UsageError(Exception):
    pass


# -- JSON with 17 significant digits -------------------------------------------

def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = format(x, ".17g")
    if not any(c in s for c in ".eE"):
        s += ".0"
    return s


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, int):
        return str(obj)
    if hasattr(obj, "dtype") and getattr(obj, "ndim", 1) == 0:
        return dumps(obj.item(), indent, _level)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)) or hasattr(obj, "tolist"):
        seq = obj.tolist() if hasattr(obj, "tolist") else obj
        if not seq:
            return "[]"
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in seq):
            return "[" + ", ".join(dumps(v) for v in seq) + "]"
        items = [pad + dumps(v, indent, _level + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _read_json(path: str, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from exc


# -- configuration ---------------------------------------------------------------

def resolve_config(doc: dict | None, args) -> dict:
    """Merge flags over the config document over :data:`DEFAULTS`."""
    doc = copy.deepcopy(doc or {})
    if not isinstance(doc, dict):
        raise ch.ConfigError("config: expected a JSON object")
    unknown = doc.keys() - _CONFIG_KEYS
    if unknown:
        raise ch.ConfigError(f"{sorted(unknown)[0]}: unknown config field")
    cfg = {}
    cfg["formulation"] = getattr(args, "formulation", None) or doc.get("formulation") or DEFAULTS["formulation"]
    if cfg["formulation"] not in ch.FORMULATION_KIND:
        raise ch.ConfigError(f"formulation: expected one of {sorted(ch.FORMULATION_KIND)}, "
                             f"got {cfg['formulation']!r}")

    pol = dict(doc.get("policy") or DEFAULTS["policy"])
    if getattr(args, "policy", None):
        if args.policy != pol.get("type"):
            pol = {"type": args.policy}
    ptype = pol.get("type", "affine")
    if ptype not in ("affine", "piecewise"):
        raise ch.ConfigError(f"policy.type: expected 'affine' or 'piecewise', got {ptype!r}")
    if ptype == "piecewise":
        if cfg["formulation"] == "cc":
            raise ch.ConfigError("policy.type: piecewise is unsupported with formulation 'cc'")
        for key in ("omega_plus_mw", "omega_minus_mw"):
            pol.setdefault(key, DEFAULTS["piecewise"][key])
            if not isinstance(pol[key], (int, float)) or isinstance(pol[key], bool):
                raise ch.ConfigError(f"policy.{key}: must be a number")
        if not pol["omega_minus_mw"] < 0 < pol["omega_plus_mw"]:
            raise ch.ConfigError("policy: need omega_minus_mw < 0 < omega_plus_mw")
    else:
        pol = {"type": "affine"}
    cfg["policy"] = pol

    eps = copy.deepcopy(DEFAULTS["epsilon"])
    user_eps = doc.get("epsilon", {})
    if not isinstance(user_eps, dict):
        raise ch.ConfigError("epsilon: expected an object keyed by formulation")
    for form, table in user_eps.items():
        if form not in ch.FORMULATION_KIND:
            raise ch.ConfigError(f"epsilon.{form}: unknown formulation")
        if not isinstance(table, dict):
            raise ch.ConfigError(f"epsilon.{form}: expected an object")
        eps[form].update(table)
    cfg["epsilon"] = eps

    fl = dict(DEFAULTS["fluctuation"])
    fl.update(doc.get("fluctuation") or {})
    cfg["fluctuation"] = fl

    val = dict(DEFAULTS["validation"])
    val.update(doc.get("validation") or {})
    if getattr(args, "samples", None) is not None:
        val["sample_count"] = args.samples
    if getattr(args, "seed", None) is not None:
        val["seed"] = args.seed
    try:
        vcfg = mc.ValidationConfig(val["sample_count"], val["seed"], tuple(val["thresholds"]))
    except (TypeError, ValueError) as exc:
        raise ch.ConfigError(f"validation: {exc}") from exc
    cfg["validation"] = {"sample_count": vcfg.sample_count, "seed": vcfg.seed,
                         "thresholds": list(vcfg.thresholds)}

    out = getattr(args, "out_dir", None) or (doc.get("output") or {}).get("dir") \
        or os.environ.get(ENV_OUT_DIR) or FALLBACK_OUT_DIR
    cfg["output"] = {"dir": str(out)}
    return cfg


def fluctuation_model(case: nm.NetworkCase, fl: dict) -> FluctuationModel:
    std = fl.get("std_mw")
    if not isinstance(std, list) or len(std) != len(case.wind):
        raise ch.ConfigError(f"fluctuation.std_mw: need one value per wind source ({len(case.wind)})")
    try:
        return FluctuationModel.from_wind(case, std, fl.get("correlation", 0.0))
    except (TypeError, ValueError) as exc:
        raise ch.ConfigError(f"fluctuation: {exc}") from exc


def _load(args):
    if not args.case:
        raise UsageError("--case is required")
    try:
        case = nm.load_case(args.case)
    except OSError as exc:
        raise UsageError(f"cannot read case {args.case}: {exc.strerror}") from exc
    doc = _read_json(args.config, "config") if args.config else None
    cfg = resolve_config(doc, args)
    return case, cfg


def _out_dir(cfg) -> Path:
    p = Path(cfg["output"]["dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


# -- commands --------------------------------------------------------------------

def summary_table(report: sv.SolutionReport) -> str:
    lines = [f"status      {report.status}",
             f"formulation {report.formulation} / {report.policy_form}"]
    if report.decision is None:
        return "\n".join(lines)
    lines.append(f"objective   {report.objective:.4f}  (gap {report.gap:.2e})")
    binding = report.binding()
    lines.append("binding     " + (", ".join(binding) if binding else "none"))
    d = report.decision
    head = "gen        p_MW      alpha"
    if d.beta_plus is not None:
        head += "    beta+_MW   beta-_MW"
    lines.append(head)
    for i in range(d.p.size):
        row = f"{i:<4}{d.p[i]:>11.3f}{d.alpha[i]:>11.4f}"
        if d.beta_plus is not None:
            row += f"{d.beta_plus[i]:>12.3f}{d.beta_minus[i]:>11.3f}"
        lines.append(row)
    return "\n".join(lines)


def cmd_solve(args) -> int:
    case, cfg = _load(args)
    fm = fluctuation_model(case, cfg["fluctuation"])
    report = sv.solve_config(case, fm, cfg)
    out = _out_dir(cfg)
    doc = report.to_dict()
    doc["case"] = case.name
    doc["fluctuation"] = cfg["fluctuation"]
    (out / "solution.json").write_text(dumps(doc) + "\n")
    _say(args, summary_table(report))
    _say(args, f"wrote {out / 'solution.json'}")
    return STATUS_EXIT[report.status]


def threshold_bars(reports) -> str:
    """Plot-ready rows: line, side, label, threshold, eps_e (lines with any violation)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["constraint_id", "formulation", "threshold_mw", "epsilon_e"])
    active = set()
    for r in reports:
        for c in r.constraints:
            if c.kind == "line" and c.epsilon_e[0] > 0:
                active.add(c.constraint_id)
    order = [c.constraint_id for c in reports[0].constraints if c.constraint_id in active]
    for cid in order:
        for r in reports:
            c = r.by_id()[cid]
            for t, e in zip(r.thresholds, c.epsilon_e):
                w.writerow([cid, r.label, repr(float(t)), repr(float(e))])
    return buf.getvalue()


def cmd_validate(args) -> int:
    case, cfg = _load(args)
    if not args.solution:
        raise UsageError("--solution is required")
    sol_doc = _read_json(args.solution, "solution")
    try:
        report = sv.SolutionReport.from_dict(sol_doc)
    except (KeyError, TypeError) as exc:
        raise ch.ConfigError(f"solution: missing field {exc}") from exc
    if report.decision is None:
        raise ch.ConfigError(f"solution: status {report.status!r} carries no decision")
    d = report.decision
    if d.p.size != case.n_gens or d.alpha.size != case.n_gens:
        raise ch.ConfigError(f"solution: decision has {d.p.size} generators, case has {case.n_gens}")
    # the Sigma used at solve time is the default; the config wins when it names one
    fl = cfg["fluctuation"]
    if args.config is None or "fluctuation" not in _read_json(args.config, "config"):
        fl = sol_doc.get("fluctuation", fl)
    fm = fluctuation_model(case, fl)
    M = nm.build_flow_matrix(case).M
    v = cfg["validation"]
    vcfg = mc.ValidationConfig(v["sample_count"], v["seed"], tuple(v["thresholds"]))
    label = f"{report.formulation}/{report.policy_form}"
    rep = mc.validate(case, M, report.policy, fm, vcfg, label=label)
    rep.meta = {"formulation": report.formulation, "policy": report.policy_form,
                "objective": report.objective, "case": case.name}
    out = _out_dir(cfg)
    (out / "violations.csv").write_text(rep.to_csv())
    (out / "violations.json").write_text(dumps(rep.to_dict()) + "\n")
    (out / "threshold_bars.csv").write_text(threshold_bars([rep]))
    if not args.quiet:
        for c in rep.constraints:
            if c.epsilon_e[0] > 0:
                eps = "  ".join(f">{t:g}:{e:.4f}" for t, e in zip(rep.thresholds, c.epsilon_e))
                print(f"{c.constraint_id:<18}{eps}  E[y+]={c.mean_overload:.4g}")
        print(f"wrote {out / 'violations.csv'}, violations.json, threshold_bars.csv")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two report files")
    reports = []
    for path in args.reports:
        try:
            reports.append(mc.ViolationReport.from_dict(_read_json(path, "report")))
        except (KeyError, TypeError) as exc:
            raise UsageError(f"report {path}: missing field {exc}") from exc
    for i, r in enumerate(reports):
        if not r.label:
            r.label = f"report{i}"
    try:
        table = mc.compare(reports)
    except mc.UsageError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out_dir or os.environ.get(ENV_OUT_DIR) or FALLBACK_OUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["constraint_id", "threshold_mw"] + table.labels)
    w.writerow(["cost", ""] + [repr(c) for c in table.costs])
    w.writerow(["cost_delta", ""] + table.cost_deltas)
    for cid, t, vals in table.rows:
        w.writerow([cid, repr(float(t))] + [repr(v) for v in vals])
    (out / "comparison.csv").write_text(buf.getvalue())
    (out / "threshold_bars.csv").write_text(threshold_bars(reports))
    doc = {"labels": table.labels, "costs": table.costs, "cost_deltas": table.cost_deltas,
           "ordering_flags": table.ordering_flags, "checks": table.checks}
    (out / "comparison.json").write_text(dumps(doc) + "\n")
    _say(args, table.render())
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wccopf", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, case=True):
        if case:
            p.add_argument("--case", help="case JSON file")
            p.add_argument("--config", help="run config JSON file")
        p.add_argument("--out-dir", dest="out_dir", help="output directory")
        p.add_argument("--quiet", action="store_true", help="suppress tables on stdout")

    p = sub.add_parser("solve", help="solve the chance-constrained OPF")
    common(p)
    p.add_argument("--formulation", choices=sorted(ch.FORMULATION_KIND))
    p.add_argument("--policy", choices=["affine", "piecewise"])
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate", help="Monte Carlo validation of a solution")
    common(p)
    p.add_argument("--solution", help="solution.json written by solve")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="compare validation reports")
    common(p, case=False)
    p.add_argument("reports", nargs="*", help="violations.json files")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ch.ConfigError, nm.CaseParseError, nm.CaseStructureError,
            nm.SingularNetworkError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
