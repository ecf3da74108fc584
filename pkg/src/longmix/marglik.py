"""Per-subject marginal likelihoods L_{i,k} and the observed-data deviance.

Three backends integrate the random effects out of the GLMM likelihood:
an exact closed form (all-gaussian models only), a Laplace approximation
around the Newton mode, and plain Monte Carlo over the component normal.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .mixture import MixtureParams, chol_inverse, chol_logdet, safe_cholesky
from .model import (
    BERNOULLI,
    GAUSSIAN,
    POISSON,
    GlmmParams,
    ValidatedDataset,
    obs_loglik,
    obs_score_weight,
)
from .rng import substream

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
METHODS = ("closed_form", "laplace", "mc")
MC_FALLBACK_DRAWS = 4096


@dataclass
class _Block:
    """Observation rows of a contiguous run of subjects, with per-row design pieces."""

    Z: np.ndarray
    ZZ: np.ndarray
    xa: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    subj: np.ndarray
    starts: np.ndarray
    code: np.ndarray
    log_factorial_y: np.ndarray

    def __post_init__(self):
        self.family_index = {c: np.flatnonzero(self.code == c) for c in (GAUSSIAN, POISSON, BERNOULLI)}

    @property
    def N(self) -> int:
        return int(self.starts.size)

    @classmethod
    def from_dataset(cls, ds: ValidatedDataset, psi: GlmmParams, y=None, lo=0, hi=None):
        hi = ds.N if hi is None else hi
        r0 = int(ds.starts[lo]) if lo < ds.N else ds.n
        r1 = int(ds.starts[hi]) if hi < ds.N else ds.n
        rows = slice(r0, r1)
        code = ds.family_code[rows]
        if y is None:
            y, lfact = ds.y, ds.log_factorial_y[rows]
        else:
            lfact = np.where(code == POISSON, gammaln(np.asarray(y[rows], float) + 1.0), 0.0)
        return cls(
            Z=ds.Z[rows],
            ZZ=ds.ZZ[rows],
            xa=ds.X[rows] @ psi.alpha if ds.p else np.zeros(r1 - r0),
            y=y[rows],
            phi=psi.phi[ds.marker_idx[rows]],
            subj=ds.subj[rows] - lo,
            starts=ds.starts[lo:hi] - r0,
            code=code,
            log_factorial_y=lfact,
        )

    def take(self, subjects: np.ndarray) -> "_Block":
        """Sub-block holding only the given (sorted) subjects."""
        ends = np.append(self.starts[1:], self.subj.size)
        lengths = ends[subjects] - self.starts[subjects]
        new_starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(self.starts.dtype)
        rows = np.repeat(self.starts[subjects] - new_starts, lengths) + np.arange(lengths.sum())
        return _Block(self.Z[rows], self.ZZ[rows], self.xa[rows], self.y[rows], self.phi[rows],
                      np.repeat(np.arange(subjects.size), lengths), new_starts, self.code[rows],
                      self.log_factorial_y[rows])


@dataclass
class LaplaceResult:
    log_marginal: np.ndarray  # (N, K)
    mode: np.ndarray  # (N, K, q)
    hess_chol: np.ndarray  # (N, K, q, q), Cholesky of the negative Hessian at the mode
    converged: np.ndarray  # (N, K) bool
    iterations: int = 0


# Newton stops once the decrement g' A^{-1} g (twice the predicted gain) is below
# this multiple of max(1, |f|); a stalled line search counts as converged if the
# decrement is below the looser multiple.
_DECREMENT_TOL = 1e-10
_STALL_TOL = 1e-6
_MAX_HALVINGS = 30


def _objective(blk: _Block, b, mu, prec, half_logdet_prec):
    q = b.shape[-1]
    eta = blk.xa[:, None] + np.einsum("nj,nkj->nk", blk.Z, b[blk.subj])
    ll = obs_loglik(blk, blk.y, eta, blk.phi)
    d = b - mu
    Pd = np.einsum("nkij,nkj->nki", prec, d)
    f = np.add.reduceat(ll, blk.starts, axis=0) - 0.5 * np.sum(d * Pd, axis=-1) + half_logdet_prec - 0.5 * q * _LOG_2PI
    return np.where(np.isfinite(f), f, -np.inf), eta, Pd


def _derivatives(blk: _Block, eta, Pd, prec):
    s, wt = obs_score_weight(blk, blk.y, eta, blk.phi)
    g = np.add.reduceat(np.einsum("nj,nk->nkj", blk.Z, s), blk.starts, axis=0) - Pd
    A = np.add.reduceat(np.einsum("nij,nk->nkij", blk.ZZ, wt), blk.starts, axis=0) + prec
    return g, A


def _laplace_block(blk: _Block, mu, prec, b0, max_iter, tol) -> LaplaceResult:
    N = blk.N
    K, q = mu.shape[-2], mu.shape[-1]
    mu = np.broadcast_to(mu, (N, K, q))
    prec = np.broadcast_to(prec, (N, K, q, q))
    half_logdet_prec = 0.5 * chol_logdet(safe_cholesky(prec, 0.0))
    b = np.array(mu if b0 is None else np.broadcast_to(b0, (N, K, q)), dtype=float)
    done = np.zeros((N, K), dtype=bool)
    converged = np.zeros((N, K), dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        act = np.flatnonzero(~done.all(axis=1))
        if act.size == 0:
            break
        sub = blk if act.size == N else blk.take(act)
        mu_a, prec_a, hl_a = mu[act], prec[act], half_logdet_prec[act]
        b_a = b[act]
        f, eta, Pd = _objective(sub, b_a, mu_a, prec_a, hl_a)
        g, A = _derivatives(sub, eta, Pd, prec_a)
        step = _chol_solve(safe_cholesky(A), g)
        dec = np.sum(g * step, axis=-1)
        scale = np.maximum(1.0, np.abs(f))
        ok_now = (np.sqrt(np.sum(g * g, axis=-1)) <= tol) | (dec <= _DECREMENT_TOL * scale)
        pending = ~done[act] & ~ok_now
        converged[act] |= ~done[act] & ok_now
        done[act] |= ok_now
        t = np.ones(pending.shape)
        for _ in range(_MAX_HALVINGS):
            if not pending.any():
                break
            cand = np.where(pending[..., None], b_a + t[..., None] * step, b_a)
            f_c, _, _ = _objective(sub, cand, mu_a, prec_a, hl_a)
            accept = pending & (f_c >= f)
            b_a = np.where(accept[..., None], cand, b_a)
            pending &= ~accept
            t = np.where(pending, 0.5 * t, t)
        if pending.any():
            # no representable ascent left along the Newton direction
            stalled = pending
            converged[act] |= stalled & (dec <= _STALL_TOL * scale)
            done[act] |= stalled
        b[act] = b_a
    f, eta, Pd = _objective(blk, b, mu, prec, half_logdet_prec)
    g, A = _derivatives(blk, eta, Pd, prec)
    L = safe_cholesky(A)
    logml = f + 0.5 * q * _LOG_2PI - 0.5 * chol_logdet(L)
    return LaplaceResult(logml, b, L, converged, it)


def _chol_solve(L, g):
    y = np.linalg.solve(L, g[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]


def _chunks(N: int, threads: int):
    threads = max(1, min(int(threads), N)) if N else 1
    edges = np.linspace(0, N, threads + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def laplace_batch(
    ds: ValidatedDataset,
    psi: GlmmParams,
    mu: np.ndarray,
    prec: np.ndarray,
    *,
    y: np.ndarray | None = None,
    b0: np.ndarray | None = None,
    max_iter: int = 50,
    tol: float = 1e-8,
    threads: int = 1,
) -> LaplaceResult:
    """Laplace approximation of log L_{i,k} for all subjects and components at once.

    ``mu`` is (K,q) or (N,K,q) and ``prec`` the matching inverse covariances. Mode
    search is Newton with step halving, started from ``b0`` (default: the means).
    Subjects are independent, so ``threads > 1`` splits them into chunks with
    bit-identical results.
    """
    K, q = mu.shape[-2], mu.shape[-1]
    if ds.N == 0:
        return LaplaceResult(np.zeros((0, K)), np.zeros((0, K, q)), np.zeros((0, K, q, q)),
                             np.zeros((0, K), bool))

    def run(lo, hi):
        blk = _Block.from_dataset(ds, psi, y, lo, hi)
        m = mu[lo:hi] if mu.ndim == 3 else mu
        P = prec[lo:hi] if prec.ndim == 4 else prec
        bb = None if b0 is None else (b0[lo:hi] if np.ndim(b0) == 3 else b0)
        return _laplace_block(blk, m, P, bb, max_iter, tol)

    parts = _chunks(ds.N, threads)
    if len(parts) == 1:
        return run(0, ds.N)
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        results = list(pool.map(lambda ab: run(*ab), parts))
    return LaplaceResult(
        np.concatenate([r.log_marginal for r in results]),
        np.concatenate([r.mode for r in results]),
        np.concatenate([r.hess_chol for r in results]),
        np.concatenate([r.converged for r in results]),
        max(r.iterations for r in results),
    )


# ---------------------------------------------------------------- single subject


def _subject_ds(ds: ValidatedDataset, i: int) -> ValidatedDataset:
    return ds.subset([i])


def _component_theta(theta: MixtureParams, k: int):
    return theta.mu[k:k + 1], theta.precision[k:k + 1]


def gaussian_closed_form(ds: ValidatedDataset, i: int, k: int, psi: GlmmParams, theta: MixtureParams) -> float:
    """Exact log L_{i,k} when every marker is gaussian.

    y_i | u_i = k ~ N(X_i alpha + Z_i mu_k, Z_i D_k Z_i' + diag(phi)).
    """
    if not ds.all_gaussian:
        raise ValueError("closed form requires all markers to be gaussian")
    rows = ds.subject_rows(i)
    Z = ds.Z[rows]
    mean = ds.X[rows] @ psi.alpha + Z @ theta.mu[k]
    cov = Z @ theta.D[k] @ Z.T + np.diag(psi.phi[ds.marker_idx[rows]])
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, ds.y[rows] - mean)
    return float(-0.5 * (z.size * _LOG_2PI + chol_logdet(L) + z @ z))


def laplace_log_marginal(ds: ValidatedDataset, i: int, k: int, psi: GlmmParams, theta: MixtureParams,
                         *, max_iter: int = 50, tol: float = 1e-8, fallback_seed: int = 0) -> float:
    """Laplace approximation of log L_{i,k}; falls back to Monte Carlo if Newton stalls."""
    mu, prec = _component_theta(theta, k)
    res = laplace_batch(_subject_ds(ds, i), psi, mu, prec, max_iter=max_iter, tol=tol)
    if not res.converged[0, 0]:
        log.warning("Laplace mode search did not converge for subject %d, component %d", i, k)
        return mc_log_marginal(ds, i, k, psi, theta, MC_FALLBACK_DRAWS, substream(fallback_seed, i, k))
    return float(res.log_marginal[0, 0])


def mc_log_marginal(ds: ValidatedDataset, i: int, k: int, psi: GlmmParams, theta: MixtureParams,
                    S: int, rng: np.random.Generator) -> float:
    """log of (1/S) sum_s prod_j p(y_ij | b_s) with b_s ~ N(mu_k, D_k)."""
    return float(mc_log_marginal_draws(ds, i, k, psi, theta, S, rng)[0])


def mc_log_marginal_draws(ds, i, k, psi, theta, S, rng):
    """Monte Carlo estimate of log L_{i,k} together with the per-draw log-likelihoods."""
    if S < 1:
        raise ValueError("need at least one Monte Carlo draw")
    rows = ds.subject_rows(i)
    eps = rng.standard_normal((S, theta.q))
    b = theta.mu[k] + eps @ theta.chol[k].T
    eta = (ds.X[rows] @ psi.alpha)[:, None] + ds.Z[rows] @ b.T
    blk = _Block.from_dataset(ds, psi, None, i, i + 1)
    ll = obs_loglik(blk, blk.y, eta, blk.phi).sum(axis=0)
    return logsumexp(ll) - math.log(S), ll


# ---------------------------------------------------------------------- batched


def component_log_marginals(ds: ValidatedDataset, psi: GlmmParams, theta: MixtureParams,
                            method: str = "laplace", *, y=None, b0=None, threads: int = 1,
                            mc_draws: int = MC_FALLBACK_DRAWS, seed: int = 0, iteration: int = 0,
                            return_modes: bool = False):
    """log L_{i,k} for all subjects and components, shape (N, K)."""
    if method not in METHODS:
        raise ValueError(f"unknown marginal-likelihood method {method!r}")
    if y is not None and method != "laplace":
        ds = ds.with_values(y)
        y = None
    if method == "closed_form":
        if not ds.all_gaussian:
            raise ValueError("closed_form method requires an all-gaussian model")
        out = np.array([[gaussian_closed_form(ds, i, k, psi, theta) for k in range(theta.K)]
                        for i in range(ds.N)]).reshape(ds.N, theta.K)
        return (out, None) if return_modes else out
    if method == "mc":
        out = np.array([[mc_log_marginal(ds, i, k, psi, theta, mc_draws, substream(seed, i, k, iteration))
                         for k in range(theta.K)] for i in range(ds.N)]).reshape(ds.N, theta.K)
        return (out, None) if return_modes else out
    res = laplace_batch(ds, psi, theta.mu, theta.precision, y=y, b0=b0, threads=threads)
    out = res.log_marginal
    bad = np.argwhere(~res.converged)
    if bad.size:
        log.warning("Laplace did not converge for %d subject/component pairs; using Monte Carlo", len(bad))
        dsy = ds if y is None else ds.with_values(y)
        for i, k in bad:
            out[i, k] = mc_log_marginal(dsy, int(i), int(k), psi, theta, mc_draws,
                                        substream(seed, int(i), int(k), iteration))
    return (out, res.mode) if return_modes else out


def mixture_log_marginals(log_comp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """log sum_k w_k L_{i,k} from log L_{i,k} (..., N, K) and weights (..., K)."""
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    return logsumexp(log_comp + logw[..., None, :], axis=-1)


def log_mixture_marglik(ds: ValidatedDataset, i: int, psi: GlmmParams, theta: MixtureParams,
                        method: str = "laplace") -> float:
    """log sum_k w_k L_{i,k} for subject ``i``."""
    sub = ds.subset([i])
    return float(mixture_log_marginals(component_log_marginals(sub, psi, theta, method), theta.w)[0])


def subject_log_likelihoods(ds, psi, theta, method="laplace", **kw) -> np.ndarray:
    return mixture_log_marginals(component_log_marginals(ds, psi, theta, method, **kw), theta.w)


def observed_deviance(ds: ValidatedDataset, psi: GlmmParams, theta: MixtureParams,
                      method: str = "laplace", **kw) -> float:
    """D(psi, theta) = -2 sum_i log sum_k w_k L_{i,k}."""
    if ds.N == 0:
        return 0.0
    return float(-2.0 * subject_log_likelihoods(ds, psi, theta, method, **kw).sum())


def proposal_factor(hess_chol: np.ndarray) -> np.ndarray:
    """Factor U with U U' equal to the inverse of the matrix whose Cholesky is given."""
    q = hess_chol.shape[-1]
    Linv = np.linalg.solve(hess_chol, np.broadcast_to(np.eye(q), hess_chol.shape))
    return np.swapaxes(Linv, -1, -2)


__all__ = [
    "LaplaceResult",
    "chol_inverse",
    "component_log_marginals",
    "gaussian_closed_form",
    "laplace_batch",
    "laplace_log_marginal",
    "log_mixture_marglik",
    "mc_log_marginal",
    "mixture_log_marginals",
    "observed_deviance",
    "proposal_factor",
    "subject_log_likelihoods",
]
