"""Sampling-based validation of a dispatch and its balancing policy.

Sampling rule (stable across platforms and worker counts): samples are drawn
in blocks of ``BLOCK`` rows.  Block ``k`` uses a PCG64 generator seeded with
``SeedSequence([seed, k])`` and consumes ``BLOCK * r`` doubles in row-major
order, where ``r`` is the number of buses with nonzero variance.  Each double
``u`` in [0, 1) becomes ``u + 2**-54`` and then a standard normal via the
inverse CDF.  The normals are coloured by the Cholesky factor of the support
covariance (eigen factor when Cholesky fails) and scattered into bus space.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .gaussmath import std_quantile
from .netmodel import NetworkCase, line_flow
from .policy import FluctuationModel

BLOCK = 65536
DEFAULT_THRESHOLDS = (0.0, 1.0, 2.0, 5.0, 10.0)
CSV_COLUMNS = ("constraint_id", "kind", "threshold_mw", "epsilon_e", "mean_overload_mw",
               "mean_sq_overload_mw2", "max_overload_mw")


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ValidationConfig:
    sample_count: int = 10_000
    seed: int = 0
    thresholds: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if int(self.sample_count) != self.sample_count or self.sample_count < 1:
            raise ValueError(f"sample_count must be a positive integer, got {self.sample_count}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        th = tuple(float(t) for t in self.thresholds)
        if not th:
            raise ValueError("thresholds must not be empty")
        if any(b < a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be sorted ascending")
        object.__setattr__(self, "thresholds", th)
        object.__setattr__(self, "sample_count", int(self.sample_count))
        object.__setattr__(self, "seed", int(self.seed))


def _colour(fm: FluctuationModel):
    sup = fm.support()
    S = fm.covariance[np.ix_(sup, sup)]
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        L = V * np.sqrt(np.clip(w, 0.0, None))
    return sup, L


def _block(seed: int, k: int, rows: int, width: int) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, k])))
    u = gen.random((rows, width)) + 2.0**-54
    return std_quantile(u)


def sample_fluctuations(fm: FluctuationModel, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. draws of the per-bus deviation vector, shape ``(n, m)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    out = np.zeros((n, fm.dim))
    sup, L = _colour(fm)
    if sup.size == 0:
        return out
    for k in range(math.ceil(n / BLOCK)):
        lo, hi = k * BLOCK, min(n, (k + 1) * BLOCK)
        z = _block(seed, k, hi - lo, sup.size)
        out[lo:hi, sup] = z @ L.T
    return out


@dataclass(frozen=True)
class ConstraintStats:
    constraint_id: str
    kind: str  # "gen" or "line"
    epsilon_e: tuple  # one entry per threshold
    mean_overload: float
    mean_sq_overload: float
    se_overload: float
    se_sq_overload: float
    max_overload: float


@dataclass
class ViolationReport:
    thresholds: tuple
    sample_count: int
    seed: int
    constraints: list
    cost: dict
    label: str = ""
    meta: dict = field(default_factory=dict)

    def by_id(self) -> dict:
        return {c.constraint_id: c for c in self.constraints}

    def to_rows(self) -> list[dict]:
        rows = []
        for c in self.constraints:
            for t, e in zip(self.thresholds, c.epsilon_e):
                rows.append({
                    "constraint_id": c.constraint_id, "kind": c.kind, "threshold_mw": t,
                    "epsilon_e": e, "mean_overload_mw": c.mean_overload,
                    "mean_sq_overload_mw2": c.mean_sq_overload,
                    "max_overload_mw": c.max_overload,
                })
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.to_rows():
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "thresholds": list(self.thresholds),
            "cost": dict(self.cost),
            "meta": dict(self.meta),
            "constraints": {
                c.constraint_id: {
                    "kind": c.kind,
                    "epsilon_e": list(c.epsilon_e),
                    "mean_overload_mw": c.mean_overload,
                    "mean_sq_overload_mw2": c.mean_sq_overload,
                    "se_overload_mw": c.se_overload,
                    "se_sq_overload_mw2": c.se_sq_overload,
                    "max_overload_mw": c.max_overload,
                }
                for c in self.constraints
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ViolationReport":
        cons = [
            ConstraintStats(cid, v["kind"], tuple(v["epsilon_e"]), v["mean_overload_mw"],
                            v["mean_sq_overload_mw2"], v.get("se_overload_mw", math.nan),
                            v.get("se_sq_overload_mw2", math.nan), v["max_overload_mw"])
            for cid, v in doc["constraints"].items()
        ]
        return cls(tuple(doc["thresholds"]), doc["sample_count"], doc["seed"], cons,
                   dict(doc.get("cost", {})), doc.get("label", ""), dict(doc.get("meta", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def overloads(case: NetworkCase, M, policy, omega) -> tuple[list[str], list[str], np.ndarray]:
    """Overload of every constraint per sample: ids, kinds and an ``(n, c)`` array.

    Order matches the constraint set: generator upper/lower pairs, then line
    upper/lower pairs.  Positive entries are violations in MW.
    """
    p = policy.respond(omega)
    flows = line_flow(case, M, None, omega, policy=policy)
    ids, kinds, cols = [], [], []
    for i, g in enumerate(case.generators):
        ids += [f"gen:{i}:upper", f"gen:{i}:lower"]
        kinds += ["gen", "gen"]
        cols += [p[:, i] - g.p_max, g.p_min - p[:, i]]
    for j, ln in enumerate(case.lines):
        ids += [f"line:{j}:upper", f"line:{j}:lower"]
        kinds += ["line", "line"]
        cols += [flows[:, j] - ln.flow_limit, -flows[:, j] - ln.flow_limit]
    return ids, kinds, np.column_stack(cols)


def validate(case: NetworkCase, M, policy, fm: FluctuationModel,
             vcfg: ValidationConfig | None = None, label: str = "",
             omega=None) -> ViolationReport:
    """Empirical violation statistics of ``policy`` over sampled deviations.

    ``omega`` may be passed to reuse a sample matrix; otherwise it is drawn
    from ``vcfg``.
    """
    vcfg = vcfg or ValidationConfig()
    if policy.n_gens != case.n_gens:
        raise ValueError(f"policy has {policy.n_gens} generators, case has {case.n_gens}")
    if omega is None:
        omega = sample_fluctuations(fm, vcfg.sample_count, vcfg.seed)
    n = omega.shape[0]
    ids, kinds, y = overloads(case, M, policy, omega)
    pos = np.maximum(y, 0.0)
    sq = pos * pos
    th = np.asarray(vcfg.thresholds)
    # strict counting: an overload of exactly t MW is not "larger than t"
    exceed = (y[:, :, None] > th[None, None, :]).mean(axis=0)
    root_n = math.sqrt(n)
    sd = pos.std(axis=0, ddof=1) if n > 1 else np.zeros(len(ids))
    sd2 = sq.std(axis=0, ddof=1) if n > 1 else np.zeros(len(ids))
    stats = [
        ConstraintStats(ids[c], kinds[c], tuple(float(e) for e in exceed[c]),
                        float(pos[:, c].mean()), float(sq[:, c].mean()),
                        float(sd[c] / root_n), float(sd2[c] / root_n), float(y[:, c].max()))
        for c in range(len(ids))
    ]
    sample_cost = policy.respond(omega) @ case.cost
    cost = {
        "scheduled": float(case.cost @ policy.p),
        "mean": float(sample_cost.mean()),
        "std": float(sample_cost.std(ddof=1)) if n > 1 else 0.0,
        "min": float(sample_cost.min()),
        "max": float(sample_cost.max()),
    }
    return ViolationReport(tuple(vcfg.thresholds), n, vcfg.seed, stats, cost, label)


def format_delta(value: float, reference: float) -> str:
    """Percent change of ``value`` against ``reference``, e.g. ``"+0.01%"``."""
    d = 100.0 * (value - reference) / abs(reference) if reference else 0.0
    return f"{d:+.2f}%"


@dataclass
class Comparison:
    labels: list
    thresholds: tuple
    costs: list
    cost_deltas: list  # formatted, relative to the first report
    rows: list  # (constraint_id, threshold, [eps per report])
    ordering_flags: list  # constraint ids whose large-overload ordering differs
    checks: dict

    def render(self) -> str:
        w = max([12] + [len(lbl) for lbl in self.labels]) + 2
        out = ["cost".ljust(24) + "".join(lbl.rjust(w) for lbl in self.labels)]
        cells = [f"{c:.2f}" + ("" if i == 0 else f" ({d})")
                 for i, (c, d) in enumerate(zip(self.costs, self.cost_deltas))]
        out.append("".ljust(24) + "".join(c.rjust(w) for c in cells))
        out.append("")
        out.append("eps_e (> t MW)".ljust(24) + "".join(lbl.rjust(w) for lbl in self.labels))
        for cid, t, vals in self.rows:
            if not any(vals):
                continue
            out.append(f"{cid} >{t:g}".ljust(24) + "".join(f"{v:.4f}".rjust(w) for v in vals))
        if self.ordering_flags:
            out.append("")
            out.append("large-overload ordering differs: " + ", ".join(self.ordering_flags))
        for name, ok in self.checks.items():
            out.append(f"{name}: {'pass' if ok else 'FAIL'}")
        return "\n".join(out)


def compare(reports: list, large_threshold: float | None = None) -> Comparison:
    """Join reports side by side; deltas are relative to ``reports[0]``.

    A constraint is flagged when the ranking of the reports by eps_e at the
    smallest threshold differs from the ranking at ``large_threshold``
    (default: the largest threshold with any nonzero entry).
    """
    if len(reports) < 2:
        raise UsageError("compare needs at least two reports")
    th = reports[0].thresholds
    for r in reports[1:]:
        if tuple(r.thresholds) != tuple(th):
            raise UsageError("reports were produced with different thresholds")
    labels = [r.label or f"report{i}" for i, r in enumerate(reports)]
    costs = [r.cost["scheduled"] for r in reports]
    deltas = [format_delta(c, costs[0]) for c in costs]
    maps = [r.by_id() for r in reports]
    ids = [c.constraint_id for c in reports[0].constraints]
    rows, flags = [], []
    for cid in ids:
        eps = np.array([[m[cid].epsilon_e[k] if cid in m else math.nan for k in range(len(th))]
                        for m in maps])
        for k, t in enumerate(th):
            rows.append((cid, t, [float(v) for v in eps[:, k]]))
        if large_threshold is None:
            nz = [k for k in range(len(th)) if np.nanmax(eps[:, k]) > 0]
            big = nz[-1] if nz else 0
        else:
            big = min(int(np.searchsorted(th, large_threshold)), len(th) - 1)
        if big > 0:
            small_sign = np.sign(eps[1:, 0] - eps[0, 0])
            big_sign = np.sign(eps[1:, big] - eps[0, big])
            if np.any((small_sign * big_sign) < 0):
                flags.append(cid)
    checks = {}
    meta = [r.meta for r in reports]
    forms = [(m.get("formulation"), m.get("policy")) for m in meta]
    for i, (f, p) in enumerate(forms):
        if p != "piecewise":
            continue
        for j, (f2, p2) in enumerate(forms):
            if p2 == "affine" and f2 == f:
                tol = 1e-6 * abs(costs[j])
                checks[f"{labels[i]} cost <= {labels[j]} cost"] = costs[i] <= costs[j] + tol
    return Comparison(labels, tuple(th), costs, deltas, rows, flags, checks)
