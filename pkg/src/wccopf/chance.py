"""Chance-constraint construction and evaluation.

Every constraint bounds the overload ``y`` of one generator or line limit
(upper or lower side).  Three risk measures are supported:

``standard``   ``P[y > 0] <= eps`` written as ``mu + z_{1-eps} sigma <= 0`` (MW)
``linear``     ``E[max(y, 0)] <= eps`` (MW)
``quadratic``  ``E[max(y, 0)^2] <= eps`` (MW^2)

Decision variables are the dispatch ``p``, participation factors ``alpha`` and,
for piecewise-affine policies, the reserve blocks ``beta_plus`` and
``beta_minus``.  Gradients are taken with respect to all of them.

Each constraint reduces to a handful of numbers.  With ``c = w . alpha`` the
overload under an affine policy is Gaussian with

    mu    = h . p + k
    sigma = sqrt(A - 2 B c + T c^2)

and, conditioned on the total deviation Omega, has mean
``h . (p + beta(Omega)) + k + s (B/T - c) Omega`` and the constant variance
``A - B^2/T`` (``s`` is +1 for upper, -1 for lower limits).  See
:func:`constraint_data`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gaussmath as gm
from .netmodel import NetworkCase
from .policy import FluctuationModel, PiecewiseAffinePolicy

KINDS = ("standard", "linear", "quadratic")
FORMULATION_KIND = {"cc": "standard", "wcc-linear": "linear", "wcc-quadratic": "quadratic"}
SIGMA_FLOOR = 1e-9
TAIL_STDS = 8.0
GL_NODES = 64
QUAD_RTOL = 1e-8
QUAD_ATOL = 1e-12
# half-width (in conditional std units) of the sharp piece around a kink
_KINK_HALF_WIDTH = 6.0


class ConfigError(ValueError):
    """Run configuration is missing or inconsistent."""


class QuadratureError(ArithmeticError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved relative error {achieved:.3g})")
        self.achieved = achieved


@dataclass(frozen=True)
class ConstraintSpec:
    kind: str
    target: str  # "gen" or "line"
    index: int
    side: str  # "upper" or "lower"
    epsilon: float
    policy_form: str = "affine"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.target not in ("gen", "line"):
            raise ValueError(f"target must be 'gen' or 'line', got {self.target!r}")
        if self.side not in ("upper", "lower"):
            raise ValueError(f"side must be 'upper' or 'lower', got {self.side!r}")
        if self.policy_form not in ("affine", "piecewise"):
            raise ValueError(f"unknown policy form {self.policy_form!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.kind == "standard" and not self.epsilon < 1:
            raise ValueError("standard chance constraints need epsilon in (0, 1)")

    @property
    def id(self) -> str:
        return f"{self.target}:{self.index}:{self.side}"


@dataclass(frozen=True)
class ConstraintEval:
    """Residual (risk minus budget) and its gradient blocks."""

    value: float
    grad_p: np.ndarray
    grad_alpha: np.ndarray
    grad_beta_plus: np.ndarray | None = None
    grad_beta_minus: np.ndarray | None = None

    def gradient(self) -> np.ndarray:
        parts = [self.grad_p, self.grad_alpha]
        if self.grad_beta_plus is not None:
            parts += [self.grad_beta_plus, self.grad_beta_minus]
        return np.concatenate(parts)


@dataclass(frozen=True)
class OverloadMoments(gm.Gauss1D):
    """Gaussian overload moments with their sensitivities to ``p`` and ``alpha``."""

    dmu_dp: np.ndarray = None
    dsigma_dalpha: np.ndarray = None


@dataclass(frozen=True)
class ConstraintData:
    h: np.ndarray  # d mu / d p (also d mu / d beta)
    k: float
    w: np.ndarray  # c = w . alpha
    A: float
    B: float
    sign: float


def constraint_data(spec: ConstraintSpec, case: NetworkCase, M, fm: FluctuationModel) -> ConstraintData:
    s = 1.0 if spec.side == "upper" else -1.0
    g = case.n_gens
    if spec.target == "gen":
        gen = case.generators[spec.index]
        e = np.zeros(g)
        e[spec.index] = 1.0
        k = -gen.p_max if s > 0 else gen.p_min
        return ConstraintData(s * e, k, e, 0.0, 0.0, s)
    ell = np.asarray(M)[spec.index]
    w = case.gen_bus_matrix.T @ ell
    k = s * float(ell @ (case.forecast - case.demand)) - case.lines[spec.index].flow_limit
    A = float(ell @ fm.covariance @ ell)
    B = float(ell @ fm.cross)
    return ConstraintData(s * w, k, w, A, B, s)


def affine_overload_moments(spec: ConstraintSpec, p, alpha, case: NetworkCase, M,
                            fm: FluctuationModel) -> OverloadMoments:
    """Mean and std of the overload under the affine policy ``p - alpha * Omega``."""
    d = constraint_data(spec, case, M, fm)
    p = np.asarray(p, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    T = fm.total_variance
    c = float(d.w @ alpha)
    var = max(d.A - 2.0 * d.B * c + T * c * c, 0.0)
    sigma = math.sqrt(var)
    dsig = (T * c - d.B) / sigma * d.w if sigma > SIGMA_FLOOR else np.zeros_like(d.w)
    return OverloadMoments(float(d.h @ p + d.k), sigma, d.h.copy(), dsig)


def _floored(moments: gm.Gauss1D) -> float:
    return max(moments.sigma, SIGMA_FLOOR)


def _grads(moments, d_mu, d_sigma):
    gp = getattr(moments, "dmu_dp", None)
    gs = getattr(moments, "dsigma_dalpha", None)
    if gp is None or gs is None:
        return np.zeros(0), np.zeros(0)
    if moments.sigma <= SIGMA_FLOOR:
        d_sigma = 0.0
    return d_mu * gp, d_sigma * gs


def eval_standard(spec: ConstraintSpec, moments: gm.Gauss1D) -> ConstraintEval:
    """``mu + z_{1-eps} sigma`` in MW; nonpositive iff ``P[y > 0] <= eps``."""
    if not 0 < spec.epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    z = gm.std_quantile(1.0 - spec.epsilon)
    value = moments.mu + z * moments.sigma
    gp, ga = _grads(moments, 1.0, z)
    return ConstraintEval(float(value), gp, ga)


def eval_linear_affine(spec: ConstraintSpec, moments: gm.Gauss1D) -> ConstraintEval:
    """Expected overload ``E[max(y, 0)]`` minus the MW budget."""
    sigma = _floored(moments)
    value = gm.trunc_mean(moments.mu, sigma) - spec.epsilon
    d_mu, d_sigma = gm.trunc_mean_grad(moments.mu, sigma)
    gp, ga = _grads(moments, d_mu, d_sigma)
    return ConstraintEval(float(value), gp, ga)


def eval_quadratic_affine(spec: ConstraintSpec, moments: gm.Gauss1D) -> ConstraintEval:
    """Expected squared overload ``E[max(y, 0)^2]`` minus the MW^2 budget."""
    sigma = _floored(moments)
    value = gm.trunc_second_moment(moments.mu, sigma) - spec.epsilon
    d_mu, d_sigma = gm.trunc_second_moment_grad(moments.mu, sigma)
    gp, ga = _grads(moments, d_mu, d_sigma)
    return ConstraintEval(float(value), gp, ga)


def eval_affine(spec: ConstraintSpec, p, alpha, case, M, fm) -> ConstraintEval:
    moments = affine_overload_moments(spec, p, alpha, case, M, fm)
    return {"standard": eval_standard, "linear": eval_linear_affine,
            "quadratic": eval_quadratic_affine}[spec.kind](spec, moments)


def eval_weighted_piecewise(spec: ConstraintSpec, policy: PiecewiseAffinePolicy, case: NetworkCase,
                            M, fm: FluctuationModel, check: bool = True) -> ConstraintEval:
    """Weighted risk under a piecewise-affine policy, integrated over Omega."""
    if spec.kind == "standard":
        raise ValueError("standard chance constraints are only available for affine policies")
    system = ConstraintSystem(case, M, fm, [spec], "piecewise",
                              policy.omega_plus, policy.omega_minus)
    z = system.pack(policy.p, policy.alpha, policy.beta_plus, policy.beta_minus)
    values, jac = system.evaluate(z, check=check)
    g = case.n_gens
    row = jac[0]
    return ConstraintEval(float(values[0]), row[:g], row[g:2 * g], row[2 * g:3 * g], row[3 * g:])


def evaluate(spec: ConstraintSpec, policy, case, M, fm) -> ConstraintEval:
    """Evaluate one constraint for an affine or piecewise policy."""
    if isinstance(policy, PiecewiseAffinePolicy):
        if spec.kind == "standard":
            raise ValueError("standard chance constraints are only available for affine policies")
        return eval_weighted_piecewise(spec, policy, case, M, fm)
    return eval_affine(spec, policy.p, policy.alpha, case, M, fm)


def _epsilon_table(config: dict, formulation: str) -> dict:
    table = config.get("epsilon", {})
    if not isinstance(table, dict):
        raise ConfigError("epsilon: expected an object keyed by formulation")
    eps = table.get(formulation)
    if eps is None:
        raise ConfigError(f"epsilon.{formulation}: missing budgets for formulation {formulation!r}")
    return eps


def build_constraint_set(case: NetworkCase, config: dict) -> list[ConstraintSpec]:
    """Upper and lower constraints for every generator and line.

    ``config`` carries ``formulation`` (``cc``, ``wcc-linear`` or
    ``wcc-quadratic``), an optional ``policy`` ({"type": "affine"|"piecewise"})
    and ``epsilon[formulation] = {"line": .., "gen": .., "overrides": {..}}``.
    Overrides are keyed ``line:<i>`` or ``gen:<i>``.  Budgets are kept per
    formulation because their units differ (probability, MW, MW^2).
    """
    formulation = config.get("formulation")
    if formulation not in FORMULATION_KIND:
        raise ConfigError(f"formulation: expected one of {sorted(FORMULATION_KIND)}, got {formulation!r}")
    kind = FORMULATION_KIND[formulation]
    policy_form = (config.get("policy") or {}).get("type", "affine")
    if policy_form not in ("affine", "piecewise"):
        raise ConfigError(f"policy.type: expected 'affine' or 'piecewise', got {policy_form!r}")
    eps = _epsilon_table(config, formulation)
    overrides = eps.get("overrides", {}) or {}
    for key in overrides:
        family, _, idx = key.partition(":")
        limit = case.n_lines if family == "line" else case.n_gens if family == "gen" else -1
        if limit < 0 or not idx.isdigit() or int(idx) >= limit:
            raise ConfigError(f"epsilon.{formulation}.overrides: bad key {key!r}")

    def budget(family: str, i: int) -> float:
        key = f"{family}:{i}"
        if key in overrides:
            value = overrides[key]
        elif family in eps:
            value = eps[family]
        else:
            raise ConfigError(f"epsilon.{formulation}.{family}: missing")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
            raise ConfigError(f"epsilon.{formulation}.{family}: must be a positive number")
        return float(value)

    specs = []
    for i in range(case.n_gens):
        for side in ("upper", "lower"):
            specs.append(ConstraintSpec(kind, "gen", i, side, budget("gen", i), policy_form))
    for i in range(case.n_lines):
        for side in ("upper", "lower"):
            specs.append(ConstraintSpec(kind, "line", i, side, budget("line", i), policy_form))
    return specs


class ConstraintSystem:
    """Vectorised evaluation of a list of constraints sharing one policy form.

    The decision vector is ``z = [p, alpha]`` (affine) or
    ``z = [p, alpha, beta_plus, beta_minus]`` (piecewise).
    """

    def __init__(self, case: NetworkCase, M, fm: FluctuationModel, specs: Sequence[ConstraintSpec],
                 policy_form: str = "affine", omega_plus: float | None = None,
                 omega_minus: float | None = None, nodes: int = GL_NODES):
        self.case = case
        self.specs = list(specs)
        self.policy_form = policy_form
        kinds = {s.kind for s in self.specs}
        if len(kinds) > 1:
            raise ValueError("all constraints in a system must share one kind")
        self.kind = kinds.pop() if kinds else "linear"
        if policy_form == "piecewise":
            if self.kind == "standard":
                raise ValueError("standard chance constraints are only available for affine policies")
            if omega_plus is None or omega_minus is None or not omega_minus < 0 < omega_plus:
                raise ValueError("piecewise systems need omega_minus < 0 < omega_plus")
            if not fm.total_variance > 0:
                raise ValueError("piecewise evaluation needs a positive total wind variance")
        self.omega_plus = omega_plus
        self.omega_minus = omega_minus
        self.g = case.n_gens
        self.T = fm.total_variance
        data = [constraint_data(s, case, M, fm) for s in self.specs]
        J = len(data)
        self.H = np.array([d.h for d in data]).reshape(J, self.g)
        self.k = np.array([d.k for d in data])
        self.W = np.array([d.w for d in data]).reshape(J, self.g)
        self.A = np.array([d.A for d in data])
        self.B = np.array([d.B for d in data])
        self.sign = np.array([d.sign for d in data])
        self.eps = np.array([s.epsilon for s in self.specs])
        if self.kind == "standard":
            self.z_quant = np.array([gm.std_quantile(1.0 - e) for e in self.eps])
        if policy_form == "piecewise":
            self.cond_sigma = np.sqrt(np.maximum(self.A - self.B ** 2 / self.T, 0.0))
            # treat round-off residue as an exactly degenerate conditional law
            self.cond_sigma[self.cond_sigma ** 2 <= 1e-12 * np.maximum(self.A, 1.0)] = 0.0
        self._gl = {}
        self._gl_n = nodes

    @property
    def n_vars(self) -> int:
        return 2 * self.g if self.policy_form == "affine" else 4 * self.g

    def pack(self, p, alpha, beta_plus=None, beta_minus=None) -> np.ndarray:
        parts = [np.asarray(p, float), np.asarray(alpha, float)]
        if self.policy_form == "piecewise":
            bp = np.zeros(self.g) if beta_plus is None else np.asarray(beta_plus, float)
            bm = np.zeros(self.g) if beta_minus is None else np.asarray(beta_minus, float)
            parts += [bp, bm]
        return np.concatenate(parts)

    def unpack(self, z):
        g = self.g
        out = {"p": z[:g], "alpha": z[g:2 * g]}
        if self.policy_form == "piecewise":
            out["beta_plus"] = z[2 * g:3 * g]
            out["beta_minus"] = z[3 * g:4 * g]
        return out

    def evaluate(self, z, check: bool = False, rows=None):
        """Return ``(values, jacobian)`` for all constraints (or the ``rows`` subset)."""
        z = np.asarray(z, dtype=float)
        sel = slice(None) if rows is None else np.asarray(rows)
        if self.policy_form == "affine":
            return self._affine(z, sel)
        return self._piecewise(z, sel, check)

    def _affine(self, z, sel):
        g = self.g
        p, alpha = z[:g], z[g:2 * g]
        H, W = self.H[sel], self.W[sel]
        c = W @ alpha
        mu = H @ p + self.k[sel]
        var = np.maximum(self.A[sel] - 2.0 * self.B[sel] * c + self.T * c * c, 0.0)
        sigma = np.sqrt(var)
        live = sigma > SIGMA_FLOOR
        dsig_dc = np.where(live, (self.T * c - self.B[sel]) / np.where(live, sigma, 1.0), 0.0)
        sig = np.maximum(sigma, SIGMA_FLOOR)
        if self.kind == "standard":
            zq = self.z_quant[sel]
            values = mu + zq * sigma
            d_mu, d_sigma = np.ones_like(mu), zq
        elif self.kind == "linear":
            values = gm.trunc_mean(mu, sig) - self.eps[sel]
            d_mu, d_sigma = gm.trunc_mean_grad(mu, sig)
        else:
            values = gm.trunc_second_moment(mu, sig) - self.eps[sel]
            d_mu, d_sigma = gm.trunc_second_moment_grad(mu, sig)
        jac = np.hstack([d_mu[:, None] * H, (d_sigma * dsig_dc)[:, None] * W])
        return np.atleast_1d(values), jac

    def _nodes(self, n):
        if n not in self._gl:
            self._gl[n] = np.polynomial.legendre.leggauss(n)
        return self._gl[n]

    def _region_integrals(self, a, b, sc, lo, hi, n):
        """Integrals over ``[lo, hi]`` of ``f(a + b*Om)``, ``f_mu`` and ``f_mu*Om`` against N(0, T).

        ``a``, ``lo``, ``hi`` have shape (J,); ``b`` and ``sc`` are per constraint.
        """
        s = math.sqrt(self.T)
        # split around the kink of the integrand, where a + b*Om == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            kink = np.where(b != 0, -a / b, lo)
            half = np.where(b != 0, _KINK_HALF_WIDTH * sc / np.abs(b), 0.0)
        kink = np.nan_to_num(kink, nan=0.0, posinf=hi.max() if hi.size else 0.0, neginf=0.0)
        pts = np.stack([lo, kink - half, kink, kink + half, hi], axis=1)
        pts = np.clip(pts, lo[:, None], hi[:, None])
        pts = np.sort(pts, axis=1)
        left, right = pts[:, :-1], pts[:, 1:]  # (J, 4)
        x, wts = self._nodes(n)
        mid = 0.5 * (left + right)
        rad = 0.5 * (right - left)
        Om = mid[..., None] + rad[..., None] * x  # (J, 4, n)
        dens = np.exp(-0.5 * (Om / s) ** 2) / (s * math.sqrt(2.0 * math.pi))
        weight = rad[..., None] * wts * dens
        mu = a[:, None, None] + b[:, None, None] * Om
        sig = np.broadcast_to(sc[:, None, None], mu.shape)
        pos = sig > 0
        sig_safe = np.where(pos, sig, 1.0)
        t = mu / sig_safe
        if self.kind == "linear":
            f = np.where(pos, mu * gm.std_cdf(t) + sig * gm.std_pdf(t), np.maximum(mu, 0.0))
            fmu = np.where(pos, gm.std_cdf(t), (mu > 0).astype(float))
        else:
            tm = np.where(pos, mu * gm.std_cdf(t) + sig * gm.std_pdf(t), np.maximum(mu, 0.0))
            f = np.where(pos, (mu * mu + sig * sig) * gm.std_cdf(t) + mu * sig * gm.std_pdf(t),
                         np.maximum(mu, 0.0) ** 2)
            fmu = 2.0 * tm
        I = (f * weight).sum(axis=(1, 2))
        I0 = (fmu * weight).sum(axis=(1, 2))
        I1 = (fmu * Om * weight).sum(axis=(1, 2))
        return I, I0, I1

    def _piecewise(self, z, sel, check):
        g = self.g
        p, alpha = z[:g], z[g:2 * g]
        betas = {1: z[2 * g:3 * g], -1: z[3 * g:4 * g], 0: np.zeros(g)}
        H, W = self.H[sel], self.W[sel]
        sign, k = self.sign[sel], self.k[sel]
        sc = self.cond_sigma[sel]
        J = H.shape[0]
        c = W @ alpha
        b = sign * (self.B[sel] / self.T - c)
        base = H @ p + k
        edge = TAIL_STDS * math.sqrt(self.T)
        bounds = {
            -1: (-edge, min(self.omega_minus, edge)),
            0: (max(self.omega_minus, -edge), min(self.omega_plus, edge)),
            1: (max(self.omega_plus, -edge), edge),
        }
        total = np.zeros(J)
        I1_total = np.zeros(J)
        I0 = {}
        fine_total = np.zeros(J)
        for r, (lo, hi) in bounds.items():
            if hi <= lo:
                I0[r] = np.zeros(J)
                continue
            a = base + H @ betas[r]
            lo_v, hi_v = np.full(J, lo), np.full(J, hi)
            I, i0, i1 = self._region_integrals(a, b, sc, lo_v, hi_v, self._gl_n)
            total += I
            I0[r] = i0
            I1_total += i1
            if check:
                fine_total += self._region_integrals(a, b, sc, lo_v, hi_v, 2 * self._gl_n)[0]
        if check:
            err = np.abs(total - fine_total)
            bad = err > QUAD_RTOL * np.abs(fine_total) + QUAD_ATOL
            if np.any(bad):
                j = int(np.argmax(np.where(bad, err / np.maximum(np.abs(fine_total), 1e-300), 0)))
                raise QuadratureError(
                    f"piecewise quadrature did not converge for constraint {self.specs[j].id}",
                    float(err[j] / max(abs(fine_total[j]), 1e-300)),
                )
        values = total - self.eps[sel]
        d_p = (I0[-1] + I0[0] + I0[1])[:, None] * H
        d_alpha = (-sign * I1_total)[:, None] * W
        d_bp = I0[1][:, None] * H
        d_bm = I0[-1][:, None] * H
        return values, np.hstack([d_p, d_alpha, d_bp, d_bm])
