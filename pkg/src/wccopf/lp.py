"""Dense LP subproblem solver used inside the cutting-plane loop."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

OPTIMAL, INFEASIBLE, UNBOUNDED, FAILED = "optimal", "infeasible", "unbounded", "failed"


@dataclass
class LPResult:
    x: np.ndarray | None
    dual: np.ndarray | None
    status: str
    objective: float = float("nan")


def lp_solve(A, b, sense, c, bounds, tol: float = 1e-9) -> LPResult:
    """Minimise ``c @ x`` subject to ``A[i] @ x (sense[i]) b[i]`` and variable bounds.

    ``sense`` entries are ``"<="``, ``">="`` or ``"="``.  ``bounds`` is a list
    of ``(lo, hi)`` pairs with ``None`` for an infinite side.  Duals are the
    constraint marginals in the order of ``A``.  Backed by the HiGHS dual
    simplex, which is deterministic for identical input.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float)) if len(A) else np.zeros((0, len(c)))
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    sense = list(sense)
    if A.shape[0] != b.size or len(sense) != b.size:
        raise ValueError("A, b and sense disagree on the number of rows")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
        raise ValueError("LP data must be finite")

    ub_rows, ub_sign, eq_rows = [], [], []
    for i, s in enumerate(sense):
        if s == "<=":
            ub_rows.append(i)
            ub_sign.append(1.0)
        elif s == ">=":
            ub_rows.append(i)
            ub_sign.append(-1.0)
        elif s in ("=", "=="):
            eq_rows.append(i)
        else:
            raise ValueError(f"unknown constraint sense {s!r}")
    sgn = np.array(ub_sign)
    A_ub = A[ub_rows] * sgn[:, None] if ub_rows else None
    b_ub = b[ub_rows] * sgn if ub_rows else None
    A_eq = A[eq_rows] if eq_rows else None
    b_eq = b[eq_rows] if eq_rows else None
    res = linprog(
        c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs-ds",
        options={"primal_feasibility_tolerance": tol, "dual_feasibility_tolerance": tol},
    )
    if res.status == 2:
        return LPResult(None, None, INFEASIBLE)
    if res.status == 3:
        return LPResult(None, None, UNBOUNDED)
    if res.status != 0:
        return LPResult(None, None, FAILED)
    dual = np.zeros(b.size)
    if ub_rows:
        dual[ub_rows] = res.ineqlin.marginals * sgn
    if eq_rows:
        dual[eq_rows] = res.eqlin.marginals
    return LPResult(np.asarray(res.x), dual, OPTIMAL, float(res.fun))
