import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wccopf import netmodel as nm
from wccopf import policy as pl
from wccopf.policy import AffinePolicy, Basis, FluctuationModel, GeneralPolicy, PiecewiseAffinePolicy
from conftest import WIND_RHO, WIND_STD, data_path
from oracles import random_instance


def two_source_case(**over):
    doc = {"buses": 3, "slack_bus": 2,
           "lines": [{"from": 0, "to": 1, "susceptance": 10.0, "limit_mw": 100.0},
                     {"from": 1, "to": 2, "susceptance": 10.0, "limit_mw": 100.0},
                     {"from": 0, "to": 2, "susceptance": 10.0, "limit_mw": 100.0}],
           "generators": [{"bus": 0, "cost": 10.0, "p_min": 0.0, "p_max": 150.0},
                          {"bus": 2, "cost": 20.0, "p_min": 0.0, "p_max": 150.0}],
           "wind": [{"bus": 0, "forecast_mw": 40.0}, {"bus": 1, "forecast_mw": 60.0}],
           "demand": [{"bus": 1, "mw": 200.0}]}
    doc.update(over)
    return nm.load_case(doc)


def two_source_sigma():
    s1, s2 = WIND_STD
    c = WIND_RHO * s1 * s2
    return np.array([[s1 * s1, c], [c, s2 * s2]])


def test_fluctuation_from_wind_embeds_sources():
    case = two_source_case()
    fm = FluctuationModel.from_wind(case, WIND_STD, WIND_RHO)
    S = np.zeros((3, 3))
    S[:2, :2] = two_source_sigma()
    assert np.allclose(fm.covariance, S)
    assert fm.total_variance == pytest.approx(S.sum())
    assert np.allclose(fm.cross, S.sum(axis=1))
    assert list(fm.support()) == [0, 1]


def test_fluctuation_validation():
    with pytest.raises(ValueError):
        FluctuationModel(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        FluctuationModel(np.array([[1.0, 0.0], [0.0, -1.0]]))
    # tiny negative eigenvalues are clipped
    S = np.array([[1.0, 1.0], [1.0, 1.0]]) - 1e-12 * np.eye(2)
    fm = FluctuationModel(S)
    assert np.linalg.eigvalsh(fm.covariance).min() >= -1e-15
    assert not fm.covariance.flags.writeable


def test_affine_respond_at_zero():
    pol = AffinePolicy(np.array([10.0, 20.0]), np.array([0.25, 0.75]))
    assert np.array_equal(pol.respond(np.zeros(3)), pol.p)


def test_affine_respond_uses_total_deviation():
    pol = AffinePolicy(np.array([10.0, 20.0]), np.array([0.25, 0.75]))
    out = pol.respond(np.array([[1.0, 2.0, 1.0]]))
    assert out[0] == pytest.approx([9.0, 17.0])


def test_piecewise_boundary_is_middle_region():
    base = AffinePolicy(np.array([10.0, 20.0]), np.array([0.5, 0.5]))
    pol = PiecewiseAffinePolicy(base, np.array([5.0, -5.0]), np.array([-3.0, 3.0]), 70.0, -70.0)
    at_plus = np.array([70.0, 0.0, 0.0])
    at_minus = np.array([-70.0, 0.0, 0.0])
    assert np.array_equal(pol.respond(at_plus), base.respond(at_plus))
    assert np.array_equal(pol.respond(at_minus), base.respond(at_minus))
    just_above = np.array([70.0 + 1e-9, 0.0, 0.0])
    assert pol.respond(just_above) == pytest.approx(base.respond(just_above) + [5.0, -5.0])
    just_below = np.array([-70.0 - 1e-9, 0.0, 0.0])
    assert pol.respond(just_below) == pytest.approx(base.respond(just_below) + [-3.0, 3.0])


@given(st.lists(st.floats(-200, 200), min_size=3, max_size=3))
def test_piecewise_with_zero_beta_is_affine(omega):
    base = AffinePolicy(np.array([10.0, 20.0]), np.array([0.3, 0.7]))
    pol = PiecewiseAffinePolicy(base, np.zeros(2), np.zeros(2), 40.0, -30.0)
    assert np.array_equal(pol.respond(np.array(omega)), base.respond(np.array(omega)))


def test_piecewise_three_pieces_along_omega():
    base = AffinePolicy(np.array([10.0, 20.0]), np.array([0.3, 0.7]))
    pol = PiecewiseAffinePolicy(base, np.array([4.0, -4.0]), np.array([-2.0, 2.0]), 30.0, -30.0)
    Om = np.linspace(-100, 100, 2001)
    out = pol.respond(np.stack([Om, np.zeros_like(Om)], axis=1))[:, 0]
    jumps = np.flatnonzero(np.abs(np.diff(out) - np.median(np.diff(out))) > 1e-9)
    assert len(jumps) == 2


def test_piecewise_threshold_validation():
    base = AffinePolicy(np.array([1.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        PiecewiseAffinePolicy(base, np.zeros(1), np.zeros(1), -1.0, -2.0)
    with pytest.raises(ValueError):
        PiecewiseAffinePolicy(base, np.zeros(2), np.zeros(1), 1.0, -1.0)


def test_balance_affine_identity():
    case = two_source_case()
    fm = FluctuationModel.from_wind(case, WIND_STD, WIND_RHO)
    rng = np.random.default_rng(0)
    omega = rng.multivariate_normal(np.zeros(3), fm.covariance, size=100)
    pol = AffinePolicy(np.array([60.0, 40.0]), np.array([0.4, 0.6]))
    rep = pl.check_balance(pol, case, omega)
    assert rep.ok and rep.max_residual <= 1e-8


def test_balance_flags_short_alpha():
    case = two_source_case()
    omega = np.array([[3.0, 7.0, 0.0], [-20.0, 0.0, 0.0]])
    pol = AffinePolicy(np.array([60.0, 40.0]), np.array([0.4, 0.5]))
    rep = pl.check_balance(pol, case, omega)
    assert not rep.ok
    assert rep.worst_sample == 1
    assert rep.max_residual == pytest.approx(0.1 * 20.0)
    assert np.allclose(rep.residuals, 0.1 * omega.sum(axis=1))


def test_balance_flags_piecewise_only_above_threshold():
    case = two_source_case()
    base = AffinePolicy(np.array([60.0, 40.0]), np.array([0.5, 0.5]))
    pol = PiecewiseAffinePolicy(base, np.array([5.0, 0.0]), np.zeros(2), 10.0, -10.0)
    Om = np.array([-50.0, -10.0, 0.0, 10.0, 10.5, 40.0])
    omega = np.stack([Om, np.zeros_like(Om), np.zeros_like(Om)], axis=1)
    rep = pl.check_balance(pol, case, omega)
    flagged = np.abs(rep.residuals) > 1e-8
    assert list(flagged) == list(Om > 10.0)
    assert rep.max_residual == pytest.approx(5.0)


def test_policy_violations():
    assert AffinePolicy(np.array([1.0, 2.0]), np.array([0.5, 0.5])).violations() == []
    assert AffinePolicy(np.array([1.0, 2.0]), np.array([0.5, 0.4])).violations()
    assert AffinePolicy(np.array([1.0, 2.0]), np.array([1.5, -0.5])).violations()
    base = AffinePolicy(np.array([1.0, 2.0]), np.array([0.5, 0.5]))
    bad = PiecewiseAffinePolicy(base, np.array([1.0, 0.0]), np.zeros(2), 5.0, -5.0)
    assert any("beta_plus" in v for v in bad.violations())


def test_general_policy_reproduces_full_affine():
    rng = np.random.default_rng(2)
    A = rng.dirichlet(np.ones(3), size=4).T  # 3 gens x 4 buses, columns sum to 1
    p = rng.uniform(0, 50, 3)
    gen = GeneralPolicy.from_affine_matrix(p, A)
    omega = rng.normal(0, 10, (20, 4))
    assert np.allclose(gen.respond(omega), p - omega @ A.T, rtol=0, atol=1e-12)


def test_general_policy_from_piecewise():
    base = AffinePolicy(np.array([10.0, 20.0]), np.array([0.3, 0.7]))
    pw = PiecewiseAffinePolicy(base, np.array([4.0, -4.0]), np.array([-2.0, 2.0]), 30.0, -30.0)
    gen = pw.as_general()
    Om = np.array([-50.0, -30.0, 0.0, 30.0, 31.0])
    omega = np.stack([Om, np.zeros_like(Om)], axis=1)
    assert np.allclose(gen.respond(omega), pw.respond(omega))


def test_general_policy_balance_check():
    case = two_source_case()
    gen = GeneralPolicy(np.array([60.0, 40.0]), [(np.array([0.5, 0.5]), Basis.total()),
                                                 (np.array([1.0, -1.0]), Basis.power(2))])
    omega = np.random.default_rng(1).normal(0, 5, (30, 3))
    assert pl.check_balance(gen, case, omega).ok
    bad = GeneralPolicy(np.array([60.0, 40.0]), [(np.array([0.5, 0.4]), Basis.total())])
    assert not pl.check_balance(bad, case, omega).ok


def test_basis_registry():
    with pytest.raises(ValueError):
        Basis("sine")
    with pytest.raises(TypeError):
        GeneralPolicy(np.zeros(1), [(np.ones(1), lambda w: w)])
    b = Basis.indicator(0.0, 1.0, closed_lo=False)
    assert list(b(np.array([[0.0], [0.5], [1.0]]))) == [0.0, 1.0, 1.0]


# -- conditional moments --------------------------------------------------------

def test_single_source_conditional_variance_is_zero():
    case = two_source_case(wind=[{"bus": 0, "forecast_mw": 40.0}])
    fm = FluctuationModel.from_wind(case, [10.0])
    M = nm.build_flow_matrix(case).M
    pol = AffinePolicy(np.array([60.0, 40.0]), np.array([0.3, 0.7]))
    g = pl.conditional_moments_gen(pol, fm, 0, "upper", 5.0, case)
    assert g.sigma == 0.0
    for line in range(case.n_lines):
        assert pl.conditional_moments_line(pol, fm, case, M, line, "upper", 5.0).sigma == 0.0


def test_gen_conditional_mean_at_zero():
    case = two_source_case()
    fm = FluctuationModel.from_wind(case, WIND_STD, WIND_RHO)
    pol = AffinePolicy(np.array([60.0, 40.0]), np.array([0.3, 0.7]))
    g = pl.conditional_moments_gen(pol, fm, 1, "upper", 0.0, case)
    assert g.mu == pytest.approx(40.0 - 150.0)
    lower = pl.conditional_moments_gen(pol, fm, 1, "lower", 0.0, case)
    assert lower.mu == pytest.approx(0.0 - 40.0)


def test_gen_conditional_mean_follows_policy():
    case = two_source_case()
    fm = FluctuationModel.from_wind(case, WIND_STD, WIND_RHO)
    pol = AffinePolicy(np.array([60.0, 40.0]), np.array([0.3, 0.7]))
    # the generator output is an exact function of Omega, so the conditional
    # law is a point mass at the affine response
    for Om in (-40.0, 0.0, 25.0):
        g = pl.conditional_moments_gen(pol, fm, 0, "upper", Om, case)
        assert g.mu == pytest.approx(60.0 - 0.3 * Om - 150.0)
        assert g.sigma == 0.0


def _binned(values, Omega, target, width):
    sel = np.abs(Omega - target) < width
    return values[sel].mean(), values[sel].var(), sel.sum()


def test_line_conditional_moments_match_binned_samples():
    case = two_source_case()
    fm = FluctuationModel.from_wind(case, WIND_STD, WIND_RHO)
    M = nm.build_flow_matrix(case).M
    base = AffinePolicy(np.array([70.0, 30.0]), np.array([0.8, 0.2]))
    pol = PiecewiseAffinePolicy(base, np.array([-6.0, 6.0]), np.array([4.0, -4.0]), 20.0, -20.0)
    rng = np.random.default_rng(11)
    omega = np.zeros((1_000_000, 3))
    omega[:, :2] = rng.multivariate_normal(np.zeros(2), two_source_sigma(), size=1_000_000)
    Omega = omega.sum(axis=1)
    flows = nm.line_flow(case, M, None, omega, policy=pol)
    for Om in (-30.0, 0.0, 12.0, 35.0):
        for line in range(case.n_lines):
            g = pl.conditional_moments_line(pol, fm, case, M, line, "upper", Om)
            y = flows[:, line] - case.lines[line].flow_limit
            mean, var, n = _binned(y, Omega, Om, 0.25)
            assert n > 1000
            assert mean == pytest.approx(g.mu, rel=0.02, abs=0.05)
            assert var == pytest.approx(g.sigma ** 2, rel=0.02, abs=0.05)


def test_conditional_variance_independent_of_omega_and_beta():
    rng = np.random.default_rng(5)
    case, M, fm = random_instance(rng, n_wind=3)
    base = AffinePolicy(rng.uniform(0, 50, case.n_gens), rng.dirichlet(np.ones(case.n_gens)))
    bp = rng.normal(0, 5, case.n_gens)
    pw = PiecewiseAffinePolicy(base, bp - bp.mean(), np.zeros(case.n_gens), 10.0, -10.0)
    for line in range(case.n_lines):
        ref = pl.conditional_moments_line(base, fm, case, M, line, "upper", 0.0).sigma
        for Om in (-50.0, 3.0, 80.0):
            assert pl.conditional_moments_line(pw, fm, case, M, line, "upper", Om).sigma == ref
            assert pl.conditional_moments_line(pw, fm, case, M, line, "lower", Om).sigma == ref


def test_total_expectation_recovers_affine_mean():
    rng = np.random.default_rng(8)
    case, M, fm = random_instance(rng, n_wind=3)
    pol = AffinePolicy(rng.uniform(0, 50, case.n_gens), rng.dirichlet(np.ones(case.n_gens)))
    s = fm.total_std
    x, w = np.polynomial.hermite_e.hermegauss(40)
    w = w / w.sum()
    G = case.gen_bus_matrix
    for line in range(case.n_lines):
        mus = [pl.conditional_moments_line(pol, fm, case, M, line, "upper", s * xi).mu for xi in x]
        uncond = M[line] @ (G @ pol.p - case.demand + case.forecast) - case.lines[line].flow_limit
        assert float(np.dot(w, mus)) == pytest.approx(uncond, abs=1e-10 * max(1, abs(uncond)))


def test_total_variance_recovers_affine_variance():
    rng = np.random.default_rng(9)
    case, M, fm = random_instance(rng, n_wind=2)
    pol = AffinePolicy(rng.uniform(0, 50, case.n_gens), rng.dirichlet(np.ones(case.n_gens)))
    T = fm.total_variance
    a_bus = case.gen_bus_matrix @ pol.alpha
    for line in range(case.n_lines):
        row = M[line] - (M[line] @ a_bus)
        uncond_var = row @ fm.covariance @ row
        g0 = pl.conditional_moments_line(pol, fm, case, M, line, "upper", 0.0)
        g1 = pl.conditional_moments_line(pol, fm, case, M, line, "upper", 1.0)
        slope = g1.mu - g0.mu
        assert g0.sigma ** 2 + slope ** 2 * T == pytest.approx(uncond_var, rel=1e-9, abs=1e-9)


def test_conditional_needs_positive_variance():
    case = two_source_case()
    fm = FluctuationModel(np.zeros((3, 3)))
    pol = AffinePolicy(np.array([60.0, 40.0]), np.array([0.5, 0.5]))
    with pytest.raises(pl.DegenerateFluctuationError):
        pl.conditional_moments_gen(pol, fm, 0, "upper", 0.0, case)
