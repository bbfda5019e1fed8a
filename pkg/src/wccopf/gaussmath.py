"""Scalar Gaussian helpers and truncated-moment closed forms.

All functions accept floats or numpy arrays and broadcast.  ``trunc_mean`` and
``trunc_second_moment`` are the integrals ``E[y 1(y>0)]`` and
``E[y^2 1(y>0)]`` for ``y ~ N(mu, sigma^2)``; they are the risk measures behind
the linear and quadratic weighted chance constraints.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
# exp(-708) is near the smallest normal double; lower exponents hit the slow
# subnormal path and contribute nothing at double precision.
_MIN_EXPONENT = -708.0


class DegenerateInputError(ValueError):
    """Raised when a derivative is requested at sigma == 0."""


@dataclass(frozen=True)
class Gauss1D:
    """Univariate Gaussian ``N(mu, sigma^2)`` in MW."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma)):
            raise ValueError(f"non-finite Gaussian parameters ({self.mu}, {self.sigma})")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def std_cdf(x):
    """Standard normal CDF."""
    return special.ndtr(x)


def std_pdf(x):
    x = np.asarray(x, dtype=float)
    expo = np.maximum(-0.5 * x * x, _MIN_EXPONENT)
    out = INV_SQRT_2PI * np.exp(expo)
    return out if out.ndim else float(out)


def std_quantile(q):
    """Inverse of :func:`std_cdf` on the open interval (0, 1)."""
    qa = np.asarray(q, dtype=float)
    if np.any(~((qa > 0.0) & (qa < 1.0))):
        raise ValueError(f"quantile argument must lie in (0, 1), got {q}")
    out = special.ndtri(qa)
    return out if out.ndim else float(out)


def _unpack(g_or_mu, sigma):
    if sigma is None:
        return g_or_mu.mu, g_or_mu.sigma
    return g_or_mu, sigma


def _ratio(mu, sigma):
    # t = mu / sigma, with sigma == 0 mapped to +-inf (or 0 when mu == 0)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    safe = np.where(sigma > 0, sigma, 1.0)
    with np.errstate(invalid="ignore"):
        t = np.where(sigma > 0, mu / safe, np.sign(mu) * np.inf)
    return mu, sigma, np.nan_to_num(t, nan=0.0, posinf=np.inf, neginf=-np.inf)


def _scalar(a):
    return float(a) if np.ndim(a) == 0 else a


def trunc_mean(g_or_mu, sigma=None):
    """``mu*Phi(mu/sigma) + sigma*phi(mu/sigma)``; ``max(mu, 0)`` when sigma is 0.

    Call as ``trunc_mean(Gauss1D(...))`` or ``trunc_mean(mu, sigma)``.
    """
    mu, sigma = _unpack(g_or_mu, sigma)
    mu, sigma, t = _ratio(mu, sigma)
    smooth = mu * std_cdf(t) + sigma * std_pdf(np.where(np.isfinite(t), t, 0.0))
    # cancellation deep in the left tail can leave a -1e-300 residue
    out = np.where(sigma > 0, np.maximum(smooth, 0.0), np.maximum(mu, 0.0))
    return _scalar(out)


def trunc_second_moment(g_or_mu, sigma=None):
    """``(mu^2+sigma^2)*Phi(mu/sigma) + mu*sigma*phi(mu/sigma)``; ``max(mu, 0)^2`` at sigma 0."""
    mu, sigma = _unpack(g_or_mu, sigma)
    mu, sigma, t = _ratio(mu, sigma)
    smooth = (mu * mu + sigma * sigma) * std_cdf(t) + mu * sigma * std_pdf(
        np.where(np.isfinite(t), t, 0.0)
    )
    out = np.where(sigma > 0, np.maximum(smooth, 0.0), np.maximum(mu, 0.0) ** 2)
    return _scalar(out)


def _require_positive(sigma):
    if np.any(np.asarray(sigma) <= 0):
        raise DegenerateInputError("truncated-moment derivatives need sigma > 0")


def trunc_mean_grad(g_or_mu, sigma=None):
    """Partials ``(d/dmu, d/dsigma) = (Phi(t), phi(t))`` of :func:`trunc_mean`."""
    mu, sigma = _unpack(g_or_mu, sigma)
    _require_positive(sigma)
    t = np.asarray(mu, dtype=float) / np.asarray(sigma, dtype=float)
    return _scalar(std_cdf(t)), _scalar(std_pdf(t))


def trunc_second_moment_grad(g_or_mu, sigma=None):
    """Partials ``(2*trunc_mean, 2*sigma*Phi(t))`` of :func:`trunc_second_moment`."""
    mu, sigma = _unpack(g_or_mu, sigma)
    _require_positive(sigma)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    t = mu / sigma
    d_mu = 2.0 * (mu * std_cdf(t) + sigma * std_pdf(t))
    d_sigma = 2.0 * sigma * std_cdf(t)
    return _scalar(d_mu), _scalar(d_sigma)
