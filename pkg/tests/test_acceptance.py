"""Acceptance criteria 1-9.

Each test records one line in ``RESULTS``; ``conftest.py`` prints them at the
end of the session as ``criterion N: PASS|FAIL  detail``.
"""
import math
import time

import numpy as np
import pytest
from scipy import linalg

from wccopf import chance as ch
from wccopf import gaussmath as gm
from wccopf import montecarlo as mc
from wccopf import netmodel as nm
from wccopf import solver as sv
from oracles import quad_positive_moment, random_connected_case, random_decision, risky_point
from test_chance import TARGETS, check_gradient, midpoint_gap

RESULTS = {}

EPS = {
    "cc": {"line": 0.1, "gen": 0.001},
    "wcc-linear": {"line": 0.1, "gen": 0.001},
    "wcc-quadratic": {"line": 0.1, "gen": 1e-5},
}
RUNS = [("cc", "affine"), ("wcc-linear", "affine"), ("wcc-linear", "piecewise"),
        ("wcc-quadratic", "affine"), ("wcc-quadratic", "piecewise")]


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def rts24_runs(rts24):
    """All desk-scale solves on the 24-bus case, with their wall time."""
    case, M, fm = rts24
    t0 = time.perf_counter()
    out = {}
    for form, pol in RUNS:
        kw = {"omega_plus": 70.0, "omega_minus": -70.0} if pol == "piecewise" else {}
        out[form, pol] = sv.solve(case, fm, form, pol, epsilon=EPS[form], M=M, **kw)
    try:
        sv.solve(case, fm, "cc", "piecewise", epsilon=EPS["cc"], omega_plus=70.0, omega_minus=-70.0, M=M)
        cc_piecewise_rejected = False
    except ch.ConfigError:
        cc_piecewise_rejected = True
    return out, time.perf_counter() - t0, cc_piecewise_rejected


def test_criterion_1_closed_forms():
    t0 = time.perf_counter()
    worst = 0.0
    for mu in np.linspace(-10, 10, 20):
        for sigma in np.geomspace(0.01, 50, 20):
            worst = max(worst, abs(gm.trunc_mean(mu, sigma) - quad_positive_moment(mu, sigma, 1)),
                        abs(gm.trunc_second_moment(mu, sigma) - quad_positive_moment(mu, sigma, 2)))
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-8 and dt < 5, f"400-point grid, max abs error {worst:.2e}, {dt:.2f} s")


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    worst, where = 0.0, None
    cases = [(k, "affine") for k in ch.KINDS] + [(k, "piecewise") for k in ("linear", "quadratic")]
    for kind, form in cases:
        for target, side in TARGETS:
            for seed in range(50):
                e = check_gradient(kind, target, side, form, seed)
                if e > worst:
                    worst, where = e, (kind, target, side, form, seed)
    dt = time.perf_counter() - t0
    record(2, worst <= 1e-4 and dt < 30,
           f"{len(cases) * len(TARGETS) * 50} checks, worst rel error {worst:.2e} at {where}, {dt:.1f} s")


def angle_solve(case, u):
    """Flows from the reduced bus-susceptance system, written out independently."""
    m, s = case.n_buses, case.slack_bus
    B = np.zeros((m, m))
    for ln in case.lines:
        i, j, b = ln.from_bus, ln.to_bus, ln.susceptance
        B[i, i] += b
        B[j, j] += b
        B[i, j] -= b
        B[j, i] -= b
    keep = [k for k in range(m) if k != s]
    theta = np.zeros(m)
    theta[keep] = linalg.solve(B[np.ix_(keep, keep)], u[keep], assume_a="sym")
    return np.array([ln.susceptance * (theta[ln.from_bus] - theta[ln.to_bus]) for ln in case.lines])


def test_criterion_3_flow_matrix():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for m in (5, 12, 18, 24, 30):
        case = nm.load_case(random_connected_case(rng, m=m))
        M = nm.build_flow_matrix(case).M
        for _ in range(100):
            u = rng.normal(0, 100, m)
            u -= u.mean()
            ref = angle_solve(case, u)
            worst = max(worst, np.max(np.abs(M @ u - ref)) / max(1.0, np.abs(ref).max()))
    record(3, worst <= 1e-9, f"5 graphs x 100 injections, max error {worst:.2e}")


def test_criterion_4_convexity():
    worst = -math.inf
    for kind in ("linear", "quadratic"):
        for form in ("affine", "piecewise"):
            for seed in range(200):
                gap, scale = midpoint_gap(kind, form, 10_000 + seed)
                worst = max(worst, gap / scale)
    record(4, worst <= 1e-9, f"800 pairs, worst scaled midpoint excess {worst:.2e}")


def test_criterion_5_standard_calibration(tail3):
    case, M, fm = tail3
    rep = sv.solve(case, fm, "cc", epsilon=EPS["cc"], M=M)
    lines = [c for c in rep.binding() if c.startswith("line")]
    assert rep.status == sv.STATUS_OPTIMAL and lines
    v = mc.validate(case, M, rep.policy, fm, mc.ValidationConfig(10_000, 7)).by_id()
    e = {c: v[c].epsilon_e[0] for c in lines}
    ok = all(abs(x - 0.1) <= 0.009 for x in e.values())
    record(5, ok, f"binding {lines}, eps_e(>0) = {', '.join(f'{x:.4f}' for x in e.values())}")


def test_criterion_6_weighted_calibration(rts24, rts24_runs):
    case, M, fm = rts24
    runs, _, _ = rts24_runs
    vcfg = mc.ValidationConfig(10_000, 11)
    bad, closest = [], math.inf
    for form in ("wcc-linear", "wcc-quadratic"):
        rep = runs[form, "affine"]
        for c in mc.validate(case, M, rep.policy, fm, vcfg).constraints:
            eps = rep.epsilons[c.constraint_id]
            emp, se = (c.mean_overload, c.se_overload) if form == "wcc-linear" else \
                (c.mean_sq_overload, c.se_sq_overload)
            margin = eps + 3 * se - emp
            closest = min(closest, margin)
            if margin < 0:
                bad.append(f"{form}:{c.constraint_id}")
    record(6, not bad, f"{2 * 2 * (case.n_gens + case.n_lines)} constraints, "
                       f"smallest margin {closest:.3g}" + (f", violated {bad}" if bad else ""))


def test_criterion_7_tail_suppression(tail3):
    case, M, fm = tail3
    cc = sv.solve(case, fm, "cc", epsilon=EPS["cc"], M=M)
    # weighted budgets: the cc solution's realised risk, the largest per family
    budgets = {}
    for form in ("wcc-linear", "wcc-quadratic"):
        specs = ch.build_constraint_set(case, {"formulation": form,
                                               "epsilon": {form: {"line": 1.0, "gen": 1.0}}})
        risk = {s.id: ch.evaluate(s, cc.policy, case, M, fm).value + 1.0 for s in specs}
        budgets[form] = {fam: max(r for cid, r in risk.items() if cid.startswith(fam))
                         for fam in ("line", "gen")}
    quad = sv.solve(case, fm, "wcc-quadratic", epsilon=budgets["wcc-quadratic"], M=M)
    lin = sv.solve(case, fm, "wcc-linear", epsilon=budgets["wcc-linear"], M=M)
    vcfg = mc.ValidationConfig(100_000, 7)
    r_cc = mc.validate(case, M, cc.policy, fm, vcfg).by_id()
    r_q = mc.validate(case, M, quad.policy, fm, vcfg).by_id()
    r_l = mc.validate(case, M, lin.policy, fm, vcfg).by_id()
    k5 = vcfg.thresholds.index(5.0)
    tail = [cid for cid, s in r_cc.items() if s.kind == "line" and s.epsilon_e[k5] > 0]
    assert tail, "no line overloads by more than 5 MW under cc"
    cid = max(tail, key=lambda c: r_cc[c].epsilon_e[k5])
    ok = r_q[cid].epsilon_e[k5] < r_cc[cid].epsilon_e[k5]
    record(7, ok and quad.status == lin.status == sv.STATUS_OPTIMAL,
           f"{cid}: eps_e(>5 MW) cc {r_cc[cid].epsilon_e[k5]:.5f}, quadratic {r_q[cid].epsilon_e[k5]:.5f}, "
           f"linear {r_l[cid].epsilon_e[k5]:.5f}; eps_e(>0) cc {r_cc[cid].epsilon_e[0]:.4f}, "
           f"quadratic {r_q[cid].epsilon_e[0]:.4f}")


def test_criterion_8_policy_flexibility(rts24, rts24_runs):
    case, M, fm = rts24
    runs, _, _ = rts24_runs
    aff = runs["wcc-linear", "affine"]
    th = 1.5 * fm.total_std
    pw = sv.solve(case, fm, "wcc-linear", "piecewise", epsilon=EPS["wcc-linear"],
                  omega_plus=th, omega_minus=-th, M=M)
    cheaper = pw.objective <= aff.objective + 1e-6 * abs(aff.objective)
    pol = pw.policy
    # response along a fixed direction of total deviation
    direction = fm.covariance.sum(axis=1) / fm.covariance.sum()

    def response(Om):
        return pol.respond((Om * direction)[None, :])[0]

    same_at_zero = np.allclose(response(0.0), pol.p, atol=1e-12)
    d = 1e-7 * th
    jump_hi = response(th + d) - response(th)
    jump_lo = response(-th - d) - response(-th)
    jumps = (np.allclose(jump_hi, pol.beta_plus, atol=1e-6) and np.allclose(jump_lo, pol.beta_minus, atol=1e-6)
             and max(np.abs(pol.beta_plus).max(), np.abs(pol.beta_minus).max()) > 1e-3)
    inside = np.allclose(response(0.5 * th) - response(0.0), -0.5 * th * pol.alpha, atol=1e-9)
    record(8, cheaper and same_at_zero and jumps and inside,
           f"piecewise {pw.objective:.2f} vs affine {aff.objective:.2f} "
           f"({mc.format_delta(pw.objective, aff.objective)}), thresholds +-{th:.1f} MW, "
           f"max |beta| {max(np.abs(pol.beta_plus).max(), np.abs(pol.beta_minus).max()):.2f} MW")


def test_criterion_9_certificates(rts24, rts24_runs):
    case, M, fm = rts24
    runs, seconds, cc_piecewise_rejected = rts24_runs
    problems = []
    for (form, pol), rep in runs.items():
        if rep.status != sv.STATUS_OPTIMAL or rep.gap > 1e-6:
            problems.append(f"{form}/{pol}: {rep.status}, gap {rep.gap:.1e}")
            continue
        tol = sv.RESIDUAL_TOL[ch.FORMULATION_KIND[form]]
        specs = ch.build_constraint_set(case, {"formulation": form, "policy": {"type": pol},
                                               "epsilon": {form: EPS[form]}})
        worst = max(ch.evaluate(s, rep.policy, case, M, fm).value for s in specs)
        if worst > tol:
            problems.append(f"{form}/{pol}: residual {worst:.2e}")
        if abs(rep.decision.p.sum() - case.net_load) > 1e-8:
            problems.append(f"{form}/{pol}: balance")
    if not cc_piecewise_rejected:
        problems.append("cc/piecewise was not rejected")
    gaps = max(r.gap for r in runs.values())
    record(9, not problems and seconds < 60,
           f"{len(runs)} runs in {seconds:.1f} s, max gap {gaps:.1e}"
           + (f", problems {problems}" if problems else ", cc/piecewise rejected as unsupported"))
