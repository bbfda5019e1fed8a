"""Wind fluctuation model and generation-control policies.

Fluctuations ``omega`` are per-bus MW deviations from the wind forecast with
zero mean and covariance ``Sigma``; buses without wind have zero rows.  The
default policies respond to the total deviation ``Omega = sum(omega)``:

* :class:`AffinePolicy`: ``p - alpha * Omega``
* :class:`PiecewiseAffinePolicy`: the affine response plus a reserve block
  ``beta_plus`` when ``Omega > omega_plus`` or ``beta_minus`` when
  ``Omega < omega_minus``.  The middle interval is closed.

:class:`GeneralPolicy` is the linear-in-parameter family
``p - sum_k alpha_k g_k(omega)`` with basis functions drawn from a small
registry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gaussmath import Gauss1D
from .netmodel import NetworkCase

_SYM_TOL = 1e-12
_EIG_TOL = 1e-10


class DegenerateFluctuationError(ValueError):
    """Conditioning on Omega is impossible because Omega has zero variance."""


@dataclass(frozen=True)
class FluctuationModel:
    """Zero-mean multivariate Gaussian over per-bus wind deviations (MW^2)."""

    covariance: np.ndarray

    def __post_init__(self):
        S = np.array(self.covariance, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"covariance must be square, got shape {S.shape}")
        if not np.all(np.isfinite(S)):
            raise ValueError("covariance has non-finite entries")
        scale = max(1.0, float(np.abs(S).max(initial=0.0)))
        if np.abs(S - S.T).max(initial=0.0) > _SYM_TOL * scale:
            raise ValueError("covariance is not symmetric")
        S = 0.5 * (S + S.T)
        w, V = np.linalg.eigh(S)
        if w.size and w.min() < -_EIG_TOL * scale:
            raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {w.min():.3g})")
        if w.size and w.min() < 0:
            S = (V * np.clip(w, 0.0, None)) @ V.T
            S = 0.5 * (S + S.T)
        S.flags.writeable = False
        object.__setattr__(self, "covariance", S)

    @classmethod
    def from_wind(cls, case: NetworkCase, std_mw: Sequence[float], correlation=0.0):
        """Embed per-source standard deviations and a correlation into bus space.

        ``correlation`` is either one coefficient shared by all source pairs or
        a full correlation matrix over ``case.wind``.
        """
        std = np.asarray(std_mw, dtype=float)
        k = len(case.wind)
        if std.shape != (k,):
            raise ValueError(f"need {k} standard deviations, got {std.shape}")
        if np.any(std < 0):
            raise ValueError("standard deviations must be >= 0")
        R = np.asarray(correlation, dtype=float)
        if R.ndim == 0:
            R = np.full((k, k), float(R))
            np.fill_diagonal(R, 1.0)
        if R.shape != (k, k):
            raise ValueError(f"correlation matrix must be {k}x{k}")
        src = R * np.outer(std, std)
        W = np.zeros((case.n_buses, k))
        for j, w in enumerate(case.wind):
            W[w.bus, j] = 1.0
        return cls(W @ src @ W.T)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @property
    def cross(self) -> np.ndarray:
        """``Sigma @ 1``: covariance of each bus deviation with ``Omega``."""
        return self.covariance.sum(axis=1)

    @property
    def total_variance(self) -> float:
        """``1' Sigma 1``: variance of the total deviation ``Omega``."""
        return float(self.covariance.sum())

    @property
    def total_std(self) -> float:
        return math.sqrt(max(self.total_variance, 0.0))

    def support(self) -> np.ndarray:
        """Indices of buses with nonzero variance."""
        return np.flatnonzero(np.diag(self.covariance) > 0)


def total_deviation(omega) -> np.ndarray:
    return np.asarray(omega, dtype=float).sum(axis=-1)


@dataclass(frozen=True)
class AffinePolicy:
    """Scheduled dispatch ``p`` with participation factors ``alpha`` against Omega."""

    p: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        a = np.array(self.alpha, dtype=float)
        if p.ndim != 1 or p.shape != a.shape:
            raise ValueError("p and alpha must be 1-D arrays of equal length")
        p.flags.writeable = False
        a.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "alpha", a)

    form = "affine"

    @property
    def n_gens(self) -> int:
        return self.p.size

    def reserve(self, Omega) -> np.ndarray:
        Omega = np.asarray(Omega, dtype=float)
        return np.zeros(Omega.shape + (self.n_gens,))

    def respond(self, omega) -> np.ndarray:
        Omega = total_deviation(omega)
        return self.p - Omega[..., None] * self.alpha

    def violations(self, tol: float = 1e-9) -> list[str]:
        """Names of violated structural invariants (empty when feasible)."""
        out = []
        if abs(self.alpha.sum() - 1.0) > tol:
            out.append(f"sum(alpha) = {self.alpha.sum():.12g} != 1")
        if np.any(self.alpha < -tol):
            out.append("alpha has negative entries")
        if np.any(self.p < -tol):
            out.append("p has negative entries")
        return out


@dataclass(frozen=True)
class PiecewiseAffinePolicy:
    """Affine response plus reserve blocks deployed beyond the Omega thresholds."""

    base: AffinePolicy
    beta_plus: np.ndarray
    beta_minus: np.ndarray
    omega_plus: float
    omega_minus: float

    form = "piecewise"

    def __post_init__(self):
        bp = np.array(self.beta_plus, dtype=float)
        bm = np.array(self.beta_minus, dtype=float)
        if bp.shape != self.base.p.shape or bm.shape != self.base.p.shape:
            raise ValueError("beta vectors must match the generator count")
        if not (math.isfinite(self.omega_plus) and math.isfinite(self.omega_minus)):
            raise ValueError("thresholds must be finite")
        if not self.omega_minus < 0 < self.omega_plus:
            raise ValueError("need omega_minus < 0 < omega_plus")
        bp.flags.writeable = False
        bm.flags.writeable = False
        object.__setattr__(self, "beta_plus", bp)
        object.__setattr__(self, "beta_minus", bm)
        object.__setattr__(self, "omega_plus", float(self.omega_plus))
        object.__setattr__(self, "omega_minus", float(self.omega_minus))

    @property
    def p(self) -> np.ndarray:
        return self.base.p

    @property
    def alpha(self) -> np.ndarray:
        return self.base.alpha

    @property
    def n_gens(self) -> int:
        return self.base.n_gens

    def region(self, Omega) -> np.ndarray:
        """-1 below ``omega_minus``, +1 above ``omega_plus``, 0 on the closed middle."""
        Omega = np.asarray(Omega, dtype=float)
        return np.where(Omega > self.omega_plus, 1, np.where(Omega < self.omega_minus, -1, 0))

    def reserve(self, Omega) -> np.ndarray:
        r = self.region(Omega)[..., None]
        return np.where(r > 0, self.beta_plus, np.where(r < 0, self.beta_minus, 0.0))

    def respond(self, omega) -> np.ndarray:
        Omega = total_deviation(omega)
        return self.base.respond(omega) + self.reserve(Omega)

    def violations(self, tol: float = 1e-9) -> list[str]:
        out = self.base.violations(tol)
        for name, b in (("beta_plus", self.beta_plus), ("beta_minus", self.beta_minus)):
            if abs(b.sum()) > tol * max(1.0, np.abs(b).max()):
                out.append(f"sum({name}) = {b.sum():.12g} != 0")
        return out

    def as_general(self) -> "GeneralPolicy":
        return GeneralPolicy(
            self.p,
            [
                (self.alpha, Basis.total()),
                (-self.beta_plus, Basis.indicator(self.omega_plus, math.inf, closed_lo=False)),
                (-self.beta_minus, Basis.indicator(-math.inf, self.omega_minus, closed_hi=False)),
            ],
        )


@dataclass(frozen=True)
class Basis:
    """Scalar basis function ``g(omega)`` from a fixed registry.

    kinds: ``component`` (``omega[index]``), ``total`` (``Omega``),
    ``power`` (``Omega**degree``), ``indicator`` (``1`` when Omega lies in an
    interval with configurable closed ends).
    """

    kind: str
    index: int = 0
    degree: int = 1
    lo: float = -math.inf
    hi: float = math.inf
    closed_lo: bool = True
    closed_hi: bool = True

    _KINDS = ("component", "total", "power", "indicator")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}; expected one of {self._KINDS}")

    @classmethod
    def component(cls, index: int) -> "Basis":
        return cls("component", index=index)

    @classmethod
    def total(cls) -> "Basis":
        return cls("total")

    @classmethod
    def power(cls, degree: int) -> "Basis":
        return cls("power", degree=degree)

    @classmethod
    def indicator(cls, lo: float, hi: float, closed_lo: bool = True, closed_hi: bool = True):
        return cls("indicator", lo=lo, hi=hi, closed_lo=closed_lo, closed_hi=closed_hi)

    def __call__(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        if self.kind == "component":
            return omega[..., self.index]
        Omega = omega.sum(axis=-1)
        if self.kind == "total":
            return Omega
        if self.kind == "power":
            return Omega ** self.degree
        above = Omega >= self.lo if self.closed_lo else Omega > self.lo
        below = Omega <= self.hi if self.closed_hi else Omega < self.hi
        return (above & below).astype(float)


@dataclass(frozen=True)
class GeneralPolicy:
    """Linear-in-parameter policy ``p - sum_k alpha_k * g_k(omega)``."""

    p: np.ndarray
    terms: list = field(default_factory=list)

    form = "general"

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        terms = [(np.array(a, dtype=float), b) for a, b in self.terms]
        for a, b in terms:
            if a.shape != p.shape:
                raise ValueError("every alpha_k must have one entry per generator")
            if not isinstance(b, Basis):
                raise TypeError("basis functions must come from the Basis registry")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "terms", terms)

    @classmethod
    def from_affine_matrix(cls, p, alpha_matrix) -> "GeneralPolicy":
        """Full-matrix affine policy ``p - alpha @ omega`` (one term per bus)."""
        A = np.asarray(alpha_matrix, dtype=float)
        return cls(p, [(A[:, k], Basis.component(k)) for k in range(A.shape[1])])

    @property
    def n_gens(self) -> int:
        return self.p.size

    def respond(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        out = np.broadcast_to(self.p, omega.shape[:-1] + self.p.shape).copy()
        for a, g in self.terms:
            out -= np.asarray(g(omega))[..., None] * a
        return out


@dataclass(frozen=True)
class BalanceReport:
    ok: bool
    max_residual: float
    worst_sample: int
    worst_total_deviation: float
    residuals: np.ndarray = field(repr=False)


def check_balance(policy, case: NetworkCase, samples, tol: float = 1e-8) -> BalanceReport:
    """Check ``sum(p_tilde(omega)) + sum(v) + sum(omega) - sum(d) == 0`` per sample."""
    omega = np.atleast_2d(np.asarray(samples, dtype=float))
    if omega.shape[-1] != case.n_buses:
        raise ValueError("samples must have one column per bus")
    if policy.n_gens != case.n_gens:
        raise ValueError("policy and case disagree on the generator count")
    out = policy.respond(omega)
    resid = out.sum(axis=-1) + case.forecast.sum() + omega.sum(axis=-1) - case.demand.sum()
    worst = int(np.argmax(np.abs(resid)))
    return BalanceReport(
        ok=bool(np.abs(resid[worst]) <= tol),
        max_residual=float(np.abs(resid[worst])),
        worst_sample=worst,
        worst_total_deviation=float(omega[worst].sum()),
        residuals=resid,
    )


def _conditional_terms(row: np.ndarray, fm: FluctuationModel):
    """Slope of ``E[row . omega | Omega]`` and the conditional variance."""
    T = fm.total_variance
    if not T > 0:
        raise DegenerateFluctuationError("total wind variance is zero")
    Sr = fm.covariance @ row
    cross = float(row @ fm.cross)
    var = float(row @ Sr) - cross * cross / T
    scale = max(float(row @ Sr), 1.0)
    if var < 1e-12 * scale:
        var = 0.0
    return cross / T, var


def _side_sign(side: str) -> float:
    if side not in ("upper", "lower"):
        raise ValueError(f"side must be 'upper' or 'lower', got {side!r}")
    return 1.0 if side == "upper" else -1.0


def conditional_moments_gen(policy, fm: FluctuationModel, gen_index: int, side: str,
                            Omega: float, case: NetworkCase) -> Gauss1D:
    """Distribution of a generator overload given the total deviation Omega.

    Upper side overload is ``p_tilde_i - p_max_i``; lower is ``p_min_i - p_tilde_i``.
    """
    s = _side_sign(side)
    g = case.generators[gen_index]
    pol = policy if isinstance(policy, PiecewiseAffinePolicy) else None
    alpha = policy.alpha
    # fluctuation part of p_tilde_i is -alpha_i * Omega = row . omega
    row = -alpha[gen_index] * np.ones(fm.dim)
    slope, var = _conditional_terms(row, fm)
    beta = pol.reserve(Omega)[gen_index] if pol is not None else 0.0
    level = policy.p[gen_index] + beta + slope * Omega
    mean = level - g.p_max if s > 0 else g.p_min - level
    return Gauss1D(float(mean), math.sqrt(var))


def conditional_moments_line(policy, fm: FluctuationModel, case: NetworkCase, M, line: int,
                             side: str, Omega: float) -> Gauss1D:
    """Distribution of a line overload given the total deviation Omega."""
    s = _side_sign(side)
    ell = np.asarray(M)[line]
    G = case.gen_bus_matrix
    pol = policy if isinstance(policy, PiecewiseAffinePolicy) else None
    beta = pol.reserve(Omega) if pol is not None else np.zeros(case.n_gens)
    # ell (I - a 1') with a the bus-level participation vector
    a_bus = G @ policy.alpha
    row = ell - (ell @ a_bus) * np.ones(case.n_buses)
    slope, var = _conditional_terms(row, fm)
    flow = ell @ (G @ (policy.p + beta) - case.demand + case.forecast) + slope * Omega
    limit = case.lines[line].flow_limit
    mean = flow - limit if s > 0 else -flow - limit
    return Gauss1D(float(mean), math.sqrt(var))
