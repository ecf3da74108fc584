"""Heteroscedastic multivariate normal mixture on the stacked random-effects vector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

_LOG_2PI = math.log(2.0 * math.pi)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def safe_cholesky(S: np.ndarray, jitter: float = 1e-10) -> np.ndarray:
    """Lower Cholesky factor; adds ``jitter * trace/q`` to the diagonal once before failing."""
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    q = S.shape[-1]
    tr = np.trace(S, axis1=-2, axis2=-1)[..., None, None]
    bump = jitter * np.maximum(np.abs(tr), 1e-300) / q * np.eye(q)
    try:
        return np.linalg.cholesky(S + bump)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc


def chol_logdet(L: np.ndarray) -> np.ndarray:
    return 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)


def chol_inverse(L: np.ndarray) -> np.ndarray:
    """Inverse of L L' from its lower Cholesky factor (batched)."""
    q = L.shape[-1]
    eye = np.broadcast_to(np.eye(q), L.shape)
    Linv = np.linalg.solve(L, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv


def mvn_logpdf_components(b: np.ndarray, mu: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """log phi(b_i; mu_k, D_k) for every row of ``b`` (N,q) and component (K): returns (N,K)."""
    b = np.atleast_2d(b)
    K, q = mu.shape
    out = np.empty((b.shape[0], K))
    for k in range(K):
        resid = (b - mu[k]).T
        z = solve_triangular(chol[k], resid, lower=True, check_finite=False)
        out[:, k] = -0.5 * (q * _LOG_2PI + chol_logdet(chol[k]) + np.sum(z * z, axis=0))
    return out


@dataclass(eq=False)
class MixtureParams:
    """Weights ``w`` (K,), means ``mu`` (K,q) and covariances ``D`` (K,q,q)."""

    w: np.ndarray
    mu: np.ndarray
    D: np.ndarray
    jitter: float = 1e-10

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        D = np.asarray(self.D, dtype=float)
        if D.ndim == 1:
            D = D.reshape(-1, 1, 1)
        self.D = D
        K = self.w.size
        if self.mu.shape[0] != K or self.D.shape != (K, self.q, self.q):
            raise ValueError(f"inconsistent mixture shapes: w{self.w.shape} mu{self.mu.shape} D{self.D.shape}")
        if np.any(self.w < 0) or abs(self.w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to one")
        self.chol = safe_cholesky(self.D, self.jitter)

    @property
    def K(self) -> int:
        return int(self.w.size)

    @property
    def q(self) -> int:
        return int(self.mu.shape[1])

    @property
    def precision(self) -> np.ndarray:
        return chol_inverse(self.chol)

    @classmethod
    def unchecked(cls, w, mu, D) -> "MixtureParams":
        """Build without validation (for support checks on invalid values)."""
        obj = cls.__new__(cls)
        obj.w, obj.mu, obj.D = np.asarray(w, float), np.atleast_2d(np.asarray(mu, float)), np.asarray(D, float)
        obj.jitter, obj.chol = 0.0, None
        return obj

    def permuted(self, perm) -> "MixtureParams":
        perm = np.asarray(perm)
        return MixtureParams(self.w[perm], self.mu[perm], self.D[perm], self.jitter)

    def copy(self) -> "MixtureParams":
        return MixtureParams(self.w.copy(), self.mu.copy(), self.D.copy(), self.jitter)


def _log_joint(b, theta: MixtureParams):
    with np.errstate(divide="ignore"):
        logw = np.log(theta.w)
    return logw + mvn_logpdf_components(b, theta.mu, theta.chol)


def log_mixture_density(b, theta: MixtureParams):
    """log sum_k w_k phi(b; mu_k, D_k); ``b`` is (q,) or (N,q)."""
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    out = logsumexp(_log_joint(b.reshape(-1, theta.q), theta), axis=1)
    return float(out[0]) if single else out


def normalize_log_probs(logp: np.ndarray) -> np.ndarray:
    """Row-normalise log weights into probabilities, never producing NaN."""
    logp = np.asarray(logp, dtype=float)
    m = np.max(logp, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    p = np.exp(logp - m)
    s = p.sum(axis=-1, keepdims=True)
    K = logp.shape[-1]
    return np.where(s > 0, p / np.where(s > 0, s, 1.0), 1.0 / K)


def conditional_allocation_probs(b, theta: MixtureParams) -> np.ndarray:
    """P(u = k | b, theta) proportional to w_k phi(b; mu_k, D_k)."""
    b = np.asarray(b, dtype=float)
    p = normalize_log_probs(_log_joint(b.reshape(-1, theta.q), theta))
    return p[0] if b.ndim == 1 else p


def overall_fixed_effects(theta: MixtureParams) -> np.ndarray:
    """Population mean of the random effects, sum_k w_k mu_k."""
    return theta.w @ theta.mu
