"""Cutting-plane solver for the (weighted) chance-constrained DC-OPF.

The objective ``sum(c_i p_i)`` and all deterministic constraints (power
balance, participation simplex, variable boxes and the mean-overload rows
implied by each chance constraint) live in a base LP.  The convex chance
constraints enter as linear cuts ``g(z0) + grad(z0) . (z - z0) <= 0``.

The loop keeps a strictly feasible interior point (found in a phase-1 run
that minimises the largest scaled residual).  Each LP optimum is joined to
that point by a segment; the boundary crossing is a feasible incumbent and
supplies a supporting cut.  The LP value is a lower bound, the incumbent an
upper bound, and the run stops when the relative gap closes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import chance as ch
from .lp import OPTIMAL, INFEASIBLE, lp_solve
from .netmodel import NetworkCase, build_flow_matrix
from .policy import AffinePolicy, FluctuationModel, PiecewiseAffinePolicy

logger = logging.getLogger(__name__)

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_ITERATION_LIMIT = "iteration-limit"

RESIDUAL_TOL = {"standard": 1e-6, "linear": 1e-4, "quadratic": 1e-3}


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolveOptions:
    max_iterations: int = 500
    objective_rtol: float = 1e-6
    residual_tol: float | None = None  # default per constraint kind
    lp_tol: float = 1e-9
    max_cuts: int = 5000
    phase1_iterations: int = 300

    def __post_init__(self):
        for name in ("objective_rtol", "lp_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.residual_tol is not None and not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")
        if self.max_iterations < 1 or self.max_cuts < 1:
            raise ValueError("iteration and cut limits must be >= 1")


@dataclass
class DecisionVector:
    p: np.ndarray
    alpha: np.ndarray
    beta_plus: np.ndarray | None = None
    beta_minus: np.ndarray | None = None

    def policy(self, omega_plus=None, omega_minus=None):
        base = AffinePolicy(self.p, self.alpha)
        if self.beta_plus is None:
            return base
        return PiecewiseAffinePolicy(base, self.beta_plus, self.beta_minus, omega_plus, omega_minus)


@dataclass
class SolutionReport:
    status: str
    formulation: str
    policy_form: str
    decision: DecisionVector | None
    objective: float
    lower_bound: float
    gap: float
    residuals: dict
    epsilons: dict
    iterations: list = field(default_factory=list)
    omega_plus: float | None = None
    omega_minus: float | None = None
    n_cuts: int = 0

    @property
    def policy(self):
        if self.decision is None:
            return None
        return self.decision.policy(self.omega_plus, self.omega_minus)

    def binding(self, tol: float | None = None) -> list[str]:
        """Constraint ids whose residual is within ``tol`` of zero.

        The default is ``10 * RESIDUAL_TOL`` for the standard kind and 1% of
        each budget for the weighted kinds, whose budgets can be far below
        the absolute solver tolerance.
        """
        kind = ch.FORMULATION_KIND[self.formulation]
        out = []
        for cid, r in self.residuals.items():
            if tol is not None:
                t = tol
            elif kind == "standard":
                t = 10 * RESIDUAL_TOL[kind]
            else:
                t = 0.01 * self.epsilons[cid]
            if r >= -t:
                out.append(cid)
        return out

    def to_dict(self) -> dict:
        d = self.decision
        out = {
            "status": self.status,
            "formulation": self.formulation,
            "policy": {"type": self.policy_form},
            "objective": self.objective,
            "lower_bound": self.lower_bound,
            "gap": self.gap,
            "n_cuts": self.n_cuts,
            "decision": None if d is None else {
                "p": [float(x) for x in d.p],
                "alpha": [float(x) for x in d.alpha],
            },
            "residuals": dict(self.residuals),
            "epsilons": dict(self.epsilons),
            "iterations": list(self.iterations),
        }
        if self.policy_form == "piecewise":
            out["policy"]["omega_plus_mw"] = self.omega_plus
            out["policy"]["omega_minus_mw"] = self.omega_minus
            if d is not None:
                out["decision"]["beta_plus"] = [float(x) for x in d.beta_plus]
                out["decision"]["beta_minus"] = [float(x) for x in d.beta_minus]
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "SolutionReport":
        pol = doc.get("policy", {"type": "affine"})
        dec = doc.get("decision")
        decision = None
        if dec is not None:
            decision = DecisionVector(
                np.asarray(dec["p"], float), np.asarray(dec["alpha"], float),
                None if "beta_plus" not in dec else np.asarray(dec["beta_plus"], float),
                None if "beta_minus" not in dec else np.asarray(dec["beta_minus"], float),
            )
        return cls(
            status=doc["status"], formulation=doc["formulation"], policy_form=pol["type"],
            decision=decision, objective=doc["objective"], lower_bound=doc["lower_bound"],
            gap=doc["gap"], residuals=dict(doc.get("residuals", {})),
            epsilons=dict(doc.get("epsilons", {})), iterations=list(doc.get("iterations", [])),
            omega_plus=pol.get("omega_plus_mw"), omega_minus=pol.get("omega_minus_mw"),
            n_cuts=doc.get("n_cuts", 0),
        )


class CutModel:
    """Accumulated linear cuts ``grad . z <= rhs`` with deduplication and a cap."""

    def __init__(self, n_vars: int, max_cuts: int):
        self.n_vars = n_vars
        self.max_cuts = max_cuts
        self.rows: list[np.ndarray] = []
        self.rhs: list[float] = []
        self.owner: list[int] = []
        self._keys: set = set()

    def __len__(self):
        return len(self.rows)

    def matrix(self):
        if not self.rows:
            return np.zeros((0, self.n_vars)), np.zeros(0), np.zeros(0, dtype=int)
        return np.array(self.rows), np.array(self.rhs), np.array(self.owner)

    def prune(self, z: np.ndarray) -> None:
        """Drop the slackest cuts at ``z`` until the cap is respected."""
        excess = len(self.rows) - self.max_cuts
        if excess <= 0:
            return
        A, b, _ = self.matrix()
        slack = b - A @ z
        drop = set(np.argsort(-slack, kind="stable")[:excess].tolist())
        keep = [i for i in range(len(self.rows)) if i not in drop]
        self.rows = [self.rows[i] for i in keep]
        self.rhs = [self.rhs[i] for i in keep]
        self.owner = [self.owner[i] for i in keep]
        self._keys = {self._key(o, r, h) for o, r, h in zip(self.owner, self.rows, self.rhs)}

    @staticmethod
    def _key(owner, row, rhs):
        norm = float(np.abs(row).max(initial=0.0)) or 1.0
        return (owner, tuple(np.round(row / norm, 10)), round(rhs / norm, 8))


def add_cut(model: CutModel, owner: int, value: float, grad: np.ndarray, at: np.ndarray,
            tol: float) -> bool:
    """Append the linearisation ``value + grad . (z - at) <= 0``.

    Skipped (returns False) when the constraint is comfortably satisfied at
    ``at`` (``value < -tol/10``) or an identical cut already exists.
    """
    grad = np.asarray(grad, dtype=float)
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise NumericalError(f"non-finite cut for constraint {owner}")
    if value < -tol / 10.0:
        return False
    if not np.any(grad):
        return False
    rhs = float(grad @ at - value)
    key = CutModel._key(owner, grad, rhs)
    if key in model._keys:
        return False
    model._keys.add(key)
    model.rows.append(grad.copy())
    model.rhs.append(rhs)
    model.owner.append(owner)
    return True


class _Problem:
    """Base LP data plus the vectorised constraint system."""

    def __init__(self, case, fm, specs, policy_form, omega_plus, omega_minus, M):
        self.case = case
        self.system = ch.ConstraintSystem(case, M, fm, specs, policy_form, omega_plus, omega_minus)
        self.kind = self.system.kind
        self.policy_form = policy_form
        g = case.n_gens
        self.g = g
        n = self.system.n_vars
        self.n = n
        self.cost = np.zeros(n)
        self.cost[:g] = case.cost
        net = case.net_load
        self.bounds = [(0.0, max(net, 0.0))] * g + [(0.0, 1.0)] * g
        if policy_form == "piecewise":
            # a reserve block cannot exceed the unit's output range
            span = [(-(hi - lo), hi - lo) for lo, hi in zip(case.p_min, case.p_max)]
            self.bounds += span * 2
        eq_rows, eq_rhs = [], []
        row = np.zeros(n)
        row[:g] = 1.0
        eq_rows.append(row)
        eq_rhs.append(net)
        row = np.zeros(n)
        row[g:2 * g] = 1.0
        eq_rows.append(row)
        eq_rhs.append(1.0)
        if policy_form == "piecewise":
            for blk in (2, 3):
                row = np.zeros(n)
                row[blk * g:(blk + 1) * g] = 1.0
                eq_rows.append(row)
                eq_rhs.append(0.0)
        self.A_eq = np.array(eq_rows)
        self.b_eq = np.array(eq_rhs)
        # mean-overload rows implied by every constraint (Jensen / quantile sign)
        sys_ = self.system
        eps = sys_.eps
        slack = {"standard": np.zeros_like(eps), "linear": eps, "quadratic": np.sqrt(eps)}[self.kind]
        mean_rows = np.zeros((len(specs), n))
        mean_rows[:, :g] = sys_.H
        if policy_form == "piecewise":
            s = fm.total_std
            p_hi = 0.5 * math.erfc(omega_plus / (s * math.sqrt(2.0)))
            p_lo = 0.5 * math.erfc(-omega_minus / (s * math.sqrt(2.0)))
            mean_rows[:, 2 * g:3 * g] = p_hi * sys_.H
            mean_rows[:, 3 * g:] = p_lo * sys_.H
        self.A_mean = mean_rows
        self.b_mean = slack - sys_.k
        tol = RESIDUAL_TOL[self.kind]
        self.tol = tol

    def cut_values(self, z, rows=None):
        """Residuals used for cuts, with their Jacobian.

        Quadratic risks are cut through ``sqrt(risk) - sqrt(eps)``: the root
        of a second moment of a positive part is a norm, so it stays convex,
        has the same zero set, and grows linearly instead of quadratically.
        """
        vals, jac = self.system.evaluate(z, rows=rows)
        if self.kind != "quadratic":
            return vals, jac
        eps = self.system.eps if rows is None else self.system.eps[rows]
        risk = np.maximum(vals + eps, 0.0)
        root = np.sqrt(risk)
        scale = np.where(root > 0, 0.5 / np.where(root > 0, root, 1.0), 0.0)
        return root - np.sqrt(eps), jac * scale[:, None]

    def phase1_scale(self) -> np.ndarray:
        """Per-constraint divisors putting the zero-risk residual near -1."""
        eps = self.system.eps
        if self.kind == "linear":
            return eps.copy()
        if self.kind == "quadratic":
            return np.sqrt(eps)
        out = []
        for s in self.system.specs:
            if s.target == "line":
                out.append(self.case.lines[s.index].flow_limit)
            else:
                out.append(max(self.case.generators[s.index].p_max, 1.0))
        return np.array(out)

    def solve_lp(self, cuts: CutModel, objective, extra_cols=0, phase1=None, lp_tol=1e-9,
                 extra_bounds=()):
        A_cut, b_cut, owner = cuts.matrix()
        n = self.n + extra_cols
        A_ub = [np.hstack([self.A_mean, np.zeros((self.A_mean.shape[0], extra_cols))])]
        b_ub = [self.b_mean]
        if len(A_cut):
            if phase1 is not None:
                # cut_j(z) <= scale_j * t
                rows = np.hstack([A_cut, -phase1[owner][:, None]])
                rhs = b_cut
            else:
                rows, rhs = A_cut, b_cut
            # row scaling leaves each half-space unchanged but keeps HiGHS well conditioned
            norm = np.maximum(np.abs(rows).max(axis=1), 1e-300)
            A_ub.append(rows / norm[:, None])
            b_ub.append(rhs / norm)
        A_eq = np.hstack([self.A_eq, np.zeros((self.A_eq.shape[0], extra_cols))])
        A = np.vstack(A_ub + [A_eq])
        b = np.concatenate(b_ub + [self.b_eq])
        sense = ["<="] * (A.shape[0] - A_eq.shape[0]) + ["="] * A_eq.shape[0]
        bounds = list(self.bounds) + list(extra_bounds)
        assert len(bounds) == n
        return lp_solve(A, b, sense, objective, bounds, tol=lp_tol)


def _line_search(prob: _Problem, center, target, rows):
    """Largest step in [0, 1] from ``center`` toward ``target`` keeping ``rows`` feasible.

    The max residual is convex along the segment, negative at the center and
    positive at the target, so Newton from the far end approaches the
    crossing from the infeasible side; bisection then steps back inside.
    """
    system = prob.system
    d = target - center
    lam = 1.0
    for _ in range(60):
        vals, jac = system.evaluate(center + lam * d, rows=rows)
        j = int(np.argmax(vals))
        if vals[j] <= 0.0:
            return lam
        slope = float(jac[j] @ d)
        if slope <= 0 or not math.isfinite(slope):
            break
        step = vals[j] / slope
        lam = max(lam - step, 0.0)
        if step <= 1e-13 * max(lam, 1e-300):
            break
    lo, hi = 0.0, lam
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        vals, _ = system.evaluate(center + mid * d, rows=rows)
        if vals.max() <= 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15:
            break
    return lo


def _cut_tolerances(prob: _Problem, options: SolveOptions) -> float:
    return options.residual_tol if options.residual_tol is not None else prob.tol


def _phase1(prob: _Problem, cuts: CutModel, z0: np.ndarray, options: SolveOptions, log):
    """Find a strictly feasible point by minimising the largest scaled residual.

    Returns ``(z, t)`` where ``t = max_j g_j(z)/scale_j``; ``t`` is ``None``
    when the cut relaxation proves infeasibility.
    """
    n = prob.n
    scale = prob.phase1_scale()
    obj = np.zeros(n + 1)
    obj[-1] = 1.0
    best_z, best_t = None, math.inf
    z = z0
    t_lb = -1.0
    for it in range(options.phase1_iterations):
        vals, jac = prob.cut_values(z)
        scaled = vals / scale
        t_true = float(scaled.max())
        if t_true < best_t:
            best_z, best_t = z.copy(), t_true
        # every residual above the LP epigraph level gets a cut
        for j in np.flatnonzero(scaled >= min(t_lb, t_true) - 1e-12):
            add_cut(cuts, int(j), float(vals[j]), jac[j], z, tol=math.inf)
        res = prob.solve_lp(cuts, obj, extra_cols=1, phase1=scale, lp_tol=options.lp_tol,
                            extra_bounds=[(-1.0, None)])
        if res.status != OPTIMAL:
            return None, math.inf
        t_lb = float(res.x[-1])
        log.append({"phase": 1, "iteration": it, "t_lp": t_lb, "t_best": best_t})
        if t_lb > 1e-9:
            return None, t_lb
        if best_t < 0 and (best_t - t_lb <= 0.2 * abs(best_t) or best_t <= -0.9):
            break
        z = res.x[:-1]
    return best_z, best_t


def solve(case: NetworkCase, fm: FluctuationModel, formulation: str, policy_form: str = "affine",
          options: SolveOptions | None = None, *, epsilon: dict | None = None,
          omega_plus: float | None = None, omega_minus: float | None = None,
          M=None) -> SolutionReport:
    """Minimise dispatch cost under the chosen chance-constraint family.

    ``epsilon`` holds the budgets for ``formulation``:
    ``{"line": .., "gen": .., "overrides": {"line:3": ..}}``.
    """
    options = options or SolveOptions()
    if formulation not in ch.FORMULATION_KIND:
        raise ch.ConfigError(f"formulation: unknown value {formulation!r}")
    if policy_form not in ("affine", "piecewise"):
        raise ch.ConfigError(f"policy.type: unknown value {policy_form!r}")
    if formulation == "cc" and policy_form != "affine":
        raise ch.ConfigError("the cc formulation supports only the affine policy")
    if epsilon is None:
        raise ch.ConfigError(f"epsilon.{formulation}: missing")
    config = {"formulation": formulation, "policy": {"type": policy_form},
              "epsilon": {formulation: epsilon}}
    specs = ch.build_constraint_set(case, config)
    M = build_flow_matrix(case).M if M is None else np.asarray(M)
    prob = _Problem(case, fm, specs, policy_form, omega_plus, omega_minus, M)
    tol = _cut_tolerances(prob, options)
    cuts = CutModel(prob.n, options.max_cuts)
    log: list[dict] = []
    eps_out = {s.id: s.epsilon for s in specs}

    def report(status, z, ub, lb):
        decision = None
        residuals = {}
        if z is not None:
            vals, _ = prob.system.evaluate(z, check=policy_form == "piecewise")
            residuals = {s.id: float(v) for s, v in zip(specs, vals)}
            parts = prob.system.unpack(z)
            decision = DecisionVector(parts["p"].copy(), parts["alpha"].copy(),
                                      parts.get("beta_plus"), parts.get("beta_minus"))
            if decision.beta_plus is not None:
                decision.beta_plus = decision.beta_plus.copy()
                decision.beta_minus = decision.beta_minus.copy()
        gap = (ub - lb) / max(abs(lb), 1.0) if math.isfinite(ub) and math.isfinite(lb) else math.inf
        return SolutionReport(status, formulation, policy_form, decision,
                              float(ub) if z is not None else math.nan, float(lb), float(gap),
                              residuals, eps_out, log, omega_plus, omega_minus, len(cuts))

    # deterministic OPF warm start with uniform participation
    res = prob.solve_lp(cuts, prob.cost, lp_tol=options.lp_tol)
    if res.status != OPTIMAL:
        logger.info("base LP is %s", res.status)
        return report(STATUS_INFEASIBLE, None, math.inf, math.inf)
    z0 = res.x.copy()
    g = prob.g
    z0[g:2 * g] = 1.0 / g
    if policy_form == "piecewise":
        z0[2 * g:] = 0.0

    center, t_center = _phase1(prob, cuts, z0, options, log)
    if center is None:
        return report(STATUS_INFEASIBLE, None, math.inf, math.inf)
    if not t_center < 0:
        logger.info("phase 1 found no strictly feasible point (t=%.3g)", t_center)
        return report(STATUS_ITERATION_LIMIT, None, math.inf, math.inf)

    best_z = center.copy()
    ub = float(prob.cost @ center)
    lb = -math.inf
    for it in range(options.max_iterations):
        cuts.prune(best_z)
        res = prob.solve_lp(cuts, prob.cost, lp_tol=options.lp_tol)
        if res.status == INFEASIBLE:
            return report(STATUS_INFEASIBLE, None, math.inf, math.inf)
        if res.status != OPTIMAL:
            raise NumericalError(f"LP subproblem failed with status {res.status}")
        z_lp = res.x
        lb = max(lb, res.objective)
        vals, _ = prob.system.evaluate(z_lp)
        worst = float(vals.max())
        # only exactly feasible points are returned; budgets can sit far below
        # the absolute tolerance (1e-5 MW^2 against 1e-3)
        if worst <= 0.0:
            best_z, ub = z_lp.copy(), float(prob.cost @ z_lp)
            log.append({"phase": 2, "iteration": it, "lower_bound": lb, "upper_bound": ub,
                        "max_residual": worst, "cuts": len(cuts)})
            break
        cv, cj = prob.cut_values(z_lp)
        for j in np.flatnonzero(vals > -tol / 10.0):
            add_cut(cuts, int(j), float(cv[j]), cj[j], z_lp, math.inf)
        rows = np.flatnonzero(vals > 0)
        lam = _line_search(prob, center, z_lp, rows)
        z_b = center + lam * (z_lp - center)
        obj_b = float(prob.cost @ z_b)
        if obj_b < ub:
            best_z, ub = z_b, obj_b
        vb, _ = prob.system.evaluate(z_b)
        cv, cj = prob.cut_values(z_b)
        for j in np.flatnonzero(vb > -tol / 10.0):
            add_cut(cuts, int(j), float(cv[j]), cj[j], z_b, math.inf)
        gap = (ub - lb) / max(abs(lb), 1.0)
        log.append({"phase": 2, "iteration": it, "lower_bound": lb, "upper_bound": ub,
                    "max_residual": worst, "step": lam, "cuts": len(cuts)})
        if gap <= options.objective_rtol:
            break
    else:
        return report(STATUS_ITERATION_LIMIT, best_z, ub, lb)
    return report(STATUS_OPTIMAL, best_z, ub, lb)


def solve_config(case: NetworkCase, fm: FluctuationModel, config: dict,
                 options: SolveOptions | None = None, M=None) -> SolutionReport:
    """Run :func:`solve` from a run-config dict (see :mod:`wccopf.cli`)."""
    formulation = config.get("formulation")
    if formulation not in ch.FORMULATION_KIND:
        raise ch.ConfigError(f"formulation: expected one of {sorted(ch.FORMULATION_KIND)}")
    pol = config.get("policy") or {"type": "affine"}
    eps = ch._epsilon_table(config, formulation)
    return solve(case, fm, formulation, pol.get("type", "affine"), options, epsilon=eps,
                 omega_plus=pol.get("omega_plus_mw"), omega_minus=pol.get("omega_minus_mw"), M=M)
