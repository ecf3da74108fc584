"""Weakly informative priors for the mixture and GLMM parameters."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import gammaln, multigammaln, xlogy

from .mixture import MixtureParams, NotPositiveDefiniteError, chol_logdet, safe_cholesky
from .model import GlmmParams, ValidatedDataset

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PriorSpec:
    """Hyperparameters.

    Weights ~ Dirichlet(delta); mu_k ~ N(xi, diag(C)); D_k^{-1} ~ Wishart(zeta, Xi^{-1})
    with diagonal Xi whose entries have Gamma(gamma_shape, gamma_rate_j) priors;
    fixed effects ~ N(alpha_prior_mean, alpha_prior_var); gaussian dispersions
    ~ InvGamma(phi_prior_shape, phi_prior_rate).
    """

    delta: float
    xi: np.ndarray
    C: np.ndarray
    zeta: float
    gamma_shape: float
    gamma_rate: np.ndarray
    alpha_prior_mean: float = 0.0
    alpha_prior_var: float = 1e4
    phi_prior_shape: float = 1.0
    phi_prior_rate: float = 0.005
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float).reshape(-1)
        self.C = np.asarray(self.C, dtype=float).reshape(-1)
        self.gamma_rate = np.asarray(self.gamma_rate, dtype=float).reshape(-1)
        q = self.xi.size
        if self.C.size != q or self.gamma_rate.size != q:
            raise ValueError("prior vectors must all have length q")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if np.any(self.C <= 0):
            raise ValueError("prior covariance C must be positive")
        if self.zeta < q:
            raise ValueError(f"Wishart degrees of freedom zeta={self.zeta} must be >= q={q}")
        for name in ("gamma_shape", "alpha_prior_var", "phi_prior_shape", "phi_prior_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if np.any(self.gamma_rate <= 0):
            raise ValueError("gamma_rate must be positive")

    @property
    def q(self) -> int:
        return self.xi.size

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def with_overrides(self, overrides: dict | None) -> "PriorSpec":
        if not overrides:
            return self
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ValueError(f"unknown prior hyperparameters: {sorted(unknown)}")
        vals = {}
        for k, v in overrides.items():
            cur = getattr(self, k)
            vals[k] = np.broadcast_to(np.asarray(v, float), cur.shape).copy() if isinstance(cur, np.ndarray) else v
        return replace(self, **vals)


def default_hyperparameters(ds: ValidatedDataset, K: int, init_effects: np.ndarray) -> PriorSpec:
    """Data-scaled defaults from crude per-subject random-effect estimates (N,q)."""
    init_effects = np.atleast_2d(np.asarray(init_effects, dtype=float))
    lo, hi = init_effects.min(axis=0), init_effects.max(axis=0)
    rng_ = hi - lo
    warnings = []
    degenerate = ~(rng_ > 0)
    if degenerate.any():
        msg = f"zero range of initial random effects in coordinates {np.flatnonzero(degenerate).tolist()}; using 1"
        log.warning(msg)
        warnings.append(msg)
        rng_ = np.where(degenerate, 1.0, rng_)
    q = init_effects.shape[1]
    return PriorSpec(
        delta=1.0,
        xi=0.5 * (lo + hi),
        C=rng_**2,
        zeta=q + 1.0,
        gamma_shape=0.2,
        gamma_rate=10.0 / rng_**2,
        warnings=warnings,
    )


def log_dirichlet(w, delta) -> float:
    w = np.asarray(w, float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        return -math.inf
    K = w.size
    return float(gammaln(K * delta) - K * gammaln(delta) + np.sum(xlogy(delta - 1.0, w)))


def log_mvn_diag(x, mean, var) -> float:
    x, mean, var = (np.asarray(a, float) for a in (x, mean, var))
    return float(-0.5 * np.sum(_LOG_2PI + np.log(var) + (x - mean) ** 2 / var))


def log_wishart(Q, df, scale_inv) -> float:
    """Wishart(df, S) log-density of Q where ``scale_inv`` = S^{-1}."""
    q = Q.shape[0]
    try:
        LQ = np.linalg.cholesky(0.5 * (Q + Q.T))
        LS = np.linalg.cholesky(0.5 * (scale_inv + scale_inv.T))
    except np.linalg.LinAlgError:
        return -math.inf
    return float(
        0.5 * (df - q - 1) * chol_logdet(LQ)
        - 0.5 * np.trace(scale_inv @ Q)
        - 0.5 * df * q * math.log(2.0)
        + 0.5 * df * chol_logdet(LS)
        - multigammaln(0.5 * df, q)
    )


def log_gamma_density(x, shape, rate) -> float:
    x = np.asarray(x, float)
    if np.any(x <= 0):
        return -math.inf
    return float(np.sum(shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x))


def log_inv_gamma(x, shape, rate) -> float:
    x = np.asarray(x, float)
    if np.any(x <= 0):
        return -math.inf
    return float(np.sum(shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x))


def log_prior_blocks(psi: GlmmParams, theta: MixtureParams, hyper_scale, spec: PriorSpec) -> dict:
    """The independent log-prior blocks; any out-of-support block is -inf."""
    hyper_scale = np.asarray(hyper_scale, float)
    blocks = {"weights": log_dirichlet(theta.w, spec.delta)}
    blocks["means"] = sum(log_mvn_diag(m, spec.xi, spec.C) for m in theta.mu)
    cov = 0.0
    for Dk in theta.D:
        try:
            L = safe_cholesky(Dk, 0.0)
        except NotPositiveDefiniteError:
            cov = -math.inf
            break
        Q = np.linalg.inv(L @ L.T)
        cov += log_wishart(Q, spec.zeta, np.diag(hyper_scale)) if np.all(hyper_scale > 0) else -math.inf
    blocks["covariances"] = cov
    blocks["hyper_scale"] = log_gamma_density(hyper_scale, spec.gamma_shape, spec.gamma_rate)
    a = psi.alpha
    blocks["alpha"] = log_mvn_diag(a, spec.alpha_prior_mean, spec.alpha_prior_var) if a.size else 0.0
    phi = psi.phi[np.isfinite(psi.phi)]
    blocks["phi"] = log_inv_gamma(phi, spec.phi_prior_shape, spec.phi_prior_rate) if phi.size else 0.0
    return blocks


def log_prior(psi: GlmmParams, theta: MixtureParams, hyper_scale, spec: PriorSpec) -> float:
    """Sum of the prior blocks; returns ``-inf`` outside the support rather than raising."""
    total = 0.0
    for v in log_prior_blocks(psi, theta, hyper_scale, spec).values():
        if v == -math.inf:
            return -math.inf
        total += v
    return total
