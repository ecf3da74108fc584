"""Block Gibbs sampler with Metropolis-Hastings steps for the mixture GLMM.

One sweep updates, in order: allocations, weights, component means and
covariances, the Wishart hyper-scale, random effects, and GLMM parameters.
Conjugate blocks are drawn exactly; random effects of non-gaussian models and
non-gaussian fixed effects use random-walk MH whose scales adapt (Robbins-Monro)
during burn-in only.
"""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .marglik import laplace_batch, proposal_factor
from .mixture import (
    MixtureParams,
    NotPositiveDefiniteError,
    chol_inverse,
    mvn_logpdf_components,
    normalize_log_probs,
    safe_cholesky,
)
from .model import GlmmParams, ValidatedDataset, obs_loglik
from .priors import PriorSpec, default_hyperparameters
from .rng import substream

log = logging.getLogger(__name__)

# Optimal random-walk acceptance rates by dimension (1..4); 0.234 beyond.
_TARGET_ACCEPT = {1: 0.44, 2: 0.352, 3: 0.316, 4: 0.279}
_INIT_STREAM, _CHAIN_STREAM = 1, 0


def target_acceptance(dim: int) -> float:
    return _TARGET_ACCEPT.get(int(dim), 0.234)


class SamplerError(RuntimeError):
    """A block update failed; carries the sweep index and a copy of the state."""

    def __init__(self, message, sweep=None, block=None, state=None):
        super().__init__(message)
        self.sweep, self.block, self.state = sweep, block, state


@dataclass
class McmcConfig:
    keep: int = 10000
    thin: int = 100
    burnin: int = 1000
    seed: int = 0
    adapt: bool = True
    marglik_method: str = "laplace"
    prob_backend: str = "marginal"
    store_b: bool = False
    threads: int = 1
    window: int = 50
    ignore_data: bool = False

    def __post_init__(self):
        if self.keep < 1 or self.thin < 1 or self.burnin < 0:
            raise ValueError("need keep >= 1, thin >= 1 and burnin >= 0")
        if self.marglik_method not in ("closed_form", "laplace", "mc"):
            raise ValueError(f"unknown marginal likelihood method {self.marglik_method!r}")
        if self.prob_backend not in ("marginal", "augmented"):
            raise ValueError(f"unknown probability backend {self.prob_backend!r}")

    @property
    def raw_sweeps(self) -> int:
        return (self.burnin + self.keep) * self.thin

    @property
    def burnin_sweeps(self) -> int:
        return self.burnin * self.thin

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ChainState:
    alpha: np.ndarray
    phi: np.ndarray
    w: np.ndarray
    mu: np.ndarray
    D: np.ndarray
    xi: np.ndarray
    b: np.ndarray
    u: np.ndarray
    b_scale: np.ndarray = None
    b_factor: np.ndarray = None
    alpha_scale: np.ndarray = None
    alpha_factor: list = None
    Dchol: np.ndarray = field(default=None, repr=False)
    Dinv: np.ndarray = field(default=None, repr=False)
    acc_b: np.ndarray = field(default=None, repr=False)
    acc_alpha: np.ndarray = field(default=None, repr=False)
    acc_sweeps: int = 0
    sweep: int = 0

    def refresh_covariance_cache(self, jitter: float = 1e-10):
        self.Dchol = safe_cholesky(self.D, jitter)
        self.Dinv = chol_inverse(self.Dchol)

    @property
    def K(self) -> int:
        return int(self.w.size)

    @property
    def psi(self) -> GlmmParams:
        return GlmmParams(self.alpha.copy(), self.phi.copy())

    @property
    def theta(self) -> MixtureParams:
        return MixtureParams(self.w / self.w.sum(), self.mu.copy(), self.D.copy())

    def copy(self) -> "ChainState":
        out = replace(self)
        for name, val in self.__dict__.items():
            if isinstance(val, np.ndarray):
                setattr(out, name, val.copy())
            elif isinstance(val, list):
                setattr(out, name, [v.copy() for v in val])
        return out

    def check(self):
        assert abs(self.w.sum() - 1.0) < 1e-12 and np.all(self.w >= 0)
        assert np.all((self.u >= 0) & (self.u < self.K))
        np.linalg.cholesky(self.D)
        ph = self.phi[np.isfinite(self.phi)]
        assert np.all(ph > 0)


class ChainModel:
    """Data-dependent constants shared by all block updates of one chain."""

    def __init__(self, ds: ValidatedDataset, K: int, prior: PriorSpec, ignore_data: bool = False,
                 threads: int = 1):
        if ds.q < 1:
            raise ValueError("the model needs at least one random effect")
        if K < 1:
            raise ValueError("K must be positive")
        if prior.q != ds.q:
            raise ValueError(f"prior dimension {prior.q} does not match q={ds.q}")
        self.ds, self.K, self.prior = ds, K, prior
        self.ignore_data = ignore_data
        self.threads = threads
        self.N, self.q = ds.N, ds.q
        self.rows = [np.flatnonzero(ds.marker_idx == r) for r in range(ds.R)]
        self.Xr = [ds.X[rows][:, ds.fixed_slices[r]] for r, rows in enumerate(self.rows)]
        self.gaussian = [m.family == "gaussian" for m in ds.markers]
        self.conjugate_b = ds.all_gaussian
        self.b_target = target_acceptance(ds.q)
        self.alpha_target = [target_acceptance(max(1, x.shape[1])) for x in self.Xr]
        self.Cinv = 1.0 / prior.C

    def xa(self, alpha) -> np.ndarray:
        return self.ds.X @ alpha if self.ds.p else np.zeros(self.ds.n)

    def zb(self, b) -> np.ndarray:
        return np.einsum("nj,nj->n", self.ds.Z, b[self.ds.subj])

    def subject_loglik(self, eta, phi) -> np.ndarray:
        """Per-subject log-likelihood; ``eta`` may carry a trailing batch axis."""
        if self.ignore_data:
            return np.zeros((self.N,) + eta.shape[1:])
        ll = obs_loglik(self.ds, self.ds.y, eta, phi[self.ds.marker_idx])
        return np.add.reduceat(ll, self.ds.starts, axis=0)


# ------------------------------------------------------------------ initialisation


def _family_derivs(family, y, eta):
    if family == "gaussian":
        return y - eta, np.ones_like(eta)
    if family == "poisson":
        m = np.exp(np.minimum(eta, 700.0))
        return y - m, m
    p = 1.0 / (1.0 + np.exp(-eta))
    return y - p, p * (1.0 - p)


def _glm_fit(family, X, y, ridge=1e-6, max_iter=100):
    """Penalised maximum likelihood for a single-family GLM (Newton with step halving)."""
    from .model import log_family_density

    beta = np.zeros(X.shape[1])
    const = np.flatnonzero(np.all(X == 1.0, axis=0))
    if const.size and y.size:
        ybar = float(np.mean(y))
        if family == "poisson":
            beta[const[0]] = math.log(max(ybar, 0.5))
        elif family == "bernoulli":
            ybar = min(max(ybar, 0.02), 0.98)
            beta[const[0]] = math.log(ybar / (1 - ybar))
        else:
            beta[const[0]] = ybar

    def obj(bv):
        eta = X @ bv
        phi = 1.0 if family == "gaussian" else None
        return float(np.sum(log_family_density(family, y, eta, phi))) - 0.5 * ridge * bv @ bv

    f = obj(beta)
    for _ in range(max_iter):
        s, wt = _family_derivs(family, y, X @ beta)
        g = X.T @ s - ridge * beta
        H = X.T @ (wt[:, None] * X) + ridge * np.eye(X.shape[1])
        step = np.linalg.solve(H, g)
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            fc = obj(cand)
            if fc >= f:
                break
            t *= 0.5
        if t <= 1e-10:
            break
        converged = abs(fc - f) < 1e-12 * (1 + abs(f))
        beta, f = cand, fc
        if converged:
            break
    return beta


def pooled_glm(ds: ValidatedDataset):
    """No-random-effect GLM fit per marker on the joint [fixed | random] design.

    Returns (alpha, beta, phi): fixed effects, pooled random-covariate coefficients
    and residual variances (NaN for non-gaussian markers).
    """
    alpha = np.zeros(ds.p)
    beta = np.zeros(ds.q)
    phi = np.full(ds.R, np.nan)
    for r, m in enumerate(ds.markers):
        rows = np.flatnonzero(ds.marker_idx == r)
        Xr = ds.X[rows][:, ds.fixed_slices[r]]
        Zr = ds.Z[rows][:, ds.random_slices[r]]
        design = np.hstack([Xr, Zr])
        coef = _glm_fit(m.family, design, ds.y[rows]) if rows.size else np.zeros(design.shape[1])
        alpha[ds.fixed_slices[r]] = coef[: Xr.shape[1]]
        beta[ds.random_slices[r]] = coef[Xr.shape[1]:]
        if m.family == "gaussian":
            resid = ds.y[rows] - design @ coef
            phi[r] = max(float(np.mean(resid**2)) if rows.size else 1.0, 1e-6)
    return alpha, beta, phi


@dataclass
class CrudeEffects:
    effects: np.ndarray  # (N,q) shrunken per-subject estimates
    post_var: np.ndarray  # (N,q) diagonal of their approximate posterior covariance
    alpha: np.ndarray
    phi: np.ndarray
    center: np.ndarray
    spread: np.ndarray


def crude_random_effects(ds: ValidatedDataset, em_rounds: int = 3, threads: int = 1) -> CrudeEffects:
    """Per-subject regularised GLM fits for the random effects.

    The ridge prior is a diagonal normal centred at the pooled coefficients whose
    variances are re-estimated by a few EM rounds, so poorly identified slopes
    (e.g. baseline-only subjects) are shrunk rather than exploding.
    """
    alpha, beta, phi = pooled_glm(ds)
    phi_fit = np.where(np.isfinite(phi), phi, np.nan)
    q = ds.q
    tau2 = np.empty(q)
    for r in range(ds.R):
        rows = ds.marker_idx == r
        for j in range(ds.random_slices[r].start, ds.random_slices[r].stop):
            rms = math.sqrt(float(np.mean(ds.Z[rows, j] ** 2))) if rows.any() else 1.0
            tau2[j] = (2.0 / max(rms, 1e-12)) ** 2
    center = beta.copy()
    psi = GlmmParams(alpha, phi_fit)
    modes = np.broadcast_to(center, (ds.N, q)).copy()
    post_var = np.broadcast_to(tau2, (ds.N, q)).copy()
    for _ in range(max(1, em_rounds)):
        res = laplace_batch(ds, psi, center[None, :], np.diag(1.0 / tau2)[None], b0=modes[:, None, :],
                            threads=threads)
        modes = res.mode[:, 0, :]
        post_var = np.diagonal(chol_inverse(res.hess_chol[:, 0]), axis1=-2, axis2=-1)
        center = modes.mean(axis=0)
        tau2 = np.maximum(np.mean((modes - center) ** 2 + post_var, axis=0), 1e-12)
        # refresh gaussian dispersions conditional on the current effects
        eta = ds.X @ alpha + np.sum(ds.Z * modes[ds.subj], axis=1) if ds.p else np.sum(ds.Z * modes[ds.subj], axis=1)
        for r, m in enumerate(ds.markers):
            if m.family == "gaussian":
                rows = ds.marker_idx == r
                if rows.any():
                    psi.phi[r] = max(float(np.mean((ds.y[rows] - eta[rows]) ** 2)), 1e-6)
    return CrudeEffects(modes, post_var, alpha, psi.phi.copy(), center, np.sqrt(tau2))


def kmeans(X: np.ndarray, K: int, rng: np.random.Generator, max_iter: int = 100, reseeds: int = 10):
    """Lloyd's k-means with k-means++ seeding; returns (labels, centers)."""
    N = X.shape[0]
    if K > N:
        raise ValueError(f"K={K} exceeds the number of subjects N={N}")

    def seed_centers():
        centers = [X[rng.integers(N)]]
        for _ in range(1, K):
            d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
            tot = d2.sum()
            idx = rng.choice(N, p=d2 / tot) if tot > 0 else rng.integers(N)
            centers.append(X[idx])
        return np.array(centers, dtype=float)

    def lloyd(centers):
        labels = None
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
            new = np.argmin(d2, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for k in range(K):
                if np.any(labels == k):
                    centers[k] = X[labels == k].mean(axis=0)
        return labels, centers

    for _ in range(reseeds):
        labels, centers = lloyd(seed_centers())
        if np.bincount(labels, minlength=K).min() > 0:
            return labels, centers
    # persistent empty clusters: split the largest cluster along its farthest point
    counts = np.bincount(labels, minlength=K)
    for k in np.flatnonzero(counts == 0):
        big = int(np.argmax(np.bincount(labels, minlength=K)))
        members = np.flatnonzero(labels == big)
        far = members[np.argmax(((X[members] - centers[big]) ** 2).sum(-1))]
        centers[k] = X[far]
        labels[far] = k
    labels, centers = lloyd(centers)
    return labels, centers


def initialize(ds: ValidatedDataset, K: int, prior: PriorSpec | None = None, seed: int = 0,
               crude: CrudeEffects | None = None, threads: int = 1) -> ChainState:
    """Starting state from crude per-subject estimates clustered by k-means."""
    if K > ds.N:
        raise ValueError(f"K={K} exceeds the number of subjects N={ds.N}")
    crude = crude or crude_random_effects(ds, threads=threads)
    if prior is None:
        prior = default_hyperparameters(ds, K, crude.effects)
    rng = substream(seed, _INIT_STREAM)
    b = crude.effects.copy()
    sd = b.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    labels, _ = kmeans((b - b.mean(axis=0)) / sd, K, rng)
    q = ds.q
    mu = np.array([b[labels == k].mean(axis=0) for k in range(K)])
    resid = b - mu[labels]
    pooled = resid.T @ resid / max(ds.N - K, 1) + np.diag(crude.post_var.mean(axis=0))
    D = np.broadcast_to(pooled, (K, q, q)).copy()
    w = np.bincount(labels, minlength=K) / ds.N
    w = np.maximum(w, 1.0 / (10 * K))
    w /= w.sum()
    state = ChainState(
        alpha=crude.alpha.copy(),
        phi=crude.phi.copy(),
        w=w,
        mu=mu,
        D=D,
        xi=prior.zeta * np.diag(pooled).copy(),
        b=b,
        u=labels.astype(np.intp),
    )
    state.refresh_covariance_cache()
    return state


# ------------------------------------------------------------------ block updates


def update_allocations(state: ChainState, model: ChainModel, rng: np.random.Generator) -> ChainState:
    """Draw each u_i from P(u_i = k | b_i, theta)."""
    K = state.K
    if K == 1:
        rng.random(model.N)  # keep the stream aligned across K
        state.u[:] = 0
        return state
    probs = allocation_probs(state)
    cum = np.cumsum(probs, axis=1)
    U = rng.random(model.N)
    state.u = np.minimum((U[:, None] > cum).sum(axis=1), K - 1).astype(np.intp)
    return state


def allocation_probs(state: ChainState) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(state.w)
    return normalize_log_probs(logw + mvn_logpdf_components(state.b, state.mu, state.Dchol))


def update_weights(state: ChainState, model: ChainModel, rng: np.random.Generator) -> ChainState:
    """w ~ Dirichlet(delta + n_1, ..., delta + n_K)."""
    counts = np.bincount(state.u, minlength=state.K)
    g = rng.standard_gamma(model.prior.delta + counts)
    tot = g.sum()
    if not tot > 0:
        g = np.full(state.K, 1.0)
        tot = float(state.K)
    state.w = g / tot
    state.w /= state.w.sum()
    return state


def update_means(state: ChainState, model: ChainModel, rng: np.random.Generator) -> ChainState:
    """mu_k | . ~ N((C^-1 + n_k D_k^-1)^-1 (C^-1 xi + D_k^-1 sum b_i), (C^-1 + n_k D_k^-1)^-1)."""
    onehot = _onehot(state.u, state.K)
    nk = onehot.sum(axis=0)
    sum_b = onehot.T @ state.b
    prec = nk[:, None, None] * state.Dinv
    prec[:, np.arange(model.q), np.arange(model.q)] += model.Cinv
    L = np.linalg.cholesky(prec)
    rhs = model.Cinv * model.prior.xi + np.einsum("kij,kj->ki", state.Dinv, sum_b)
    Lt = np.swapaxes(L, 1, 2)
    mean = np.linalg.solve(Lt, np.linalg.solve(L, rhs[..., None]))[..., 0]
    z = rng.standard_normal((state.K, model.q))
    state.mu = mean + np.linalg.solve(Lt, z[..., None])[..., 0]
    return state


def _onehot(u, K):
    return (u[:, None] == np.arange(K)).astype(float)


@lru_cache(maxsize=None)
def _strict_lower(q: int):
    return np.tril_indices(q, -1)


def draw_wishart(df, scale: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Wishart(df, scale) draws via the Bartlett decomposition; returns (Q, chol(Q)).

    ``scale`` may be a single (q,q) matrix or a stack (K,q,q) with ``df`` of length K.
    """
    single = scale.ndim == 2
    scale = np.atleast_3d(scale) if not single else scale[None]
    K, q, _ = scale.shape
    df = np.broadcast_to(np.asarray(df, float), (K,))
    L = np.linalg.cholesky(scale)
    A = np.zeros((K, q, q))
    A[:, np.arange(q), np.arange(q)] = np.sqrt(rng.chisquare(df[:, None] - np.arange(q)))
    il = _strict_lower(q)
    A[:, il[0], il[1]] = rng.standard_normal((K, il[0].size))
    LA = L @ A
    Q = LA @ np.swapaxes(LA, 1, 2)
    return (Q[0], LA[0]) if single else (Q, LA)


def update_covariances(state: ChainState, model: ChainModel, rng: np.random.Generator) -> ChainState:
    """D_k^-1 | . ~ Wishart(zeta + n_k, (Xi + sum (b_i - mu_k)(b_i - mu_k)')^-1)."""
    K, q = state.K, model.q
    onehot = _onehot(state.u, K)
    resid = state.b - state.mu[state.u]
    S = np.einsum("ni,nj,nk->kij", resid, resid, onehot)
    S[:, np.arange(q), np.arange(q)] += state.xi
    try:
        Sinv = chol_inverse(safe_cholesky(S))
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError("Wishart scale matrix is not positive definite") from exc
    Q, LQ = draw_wishart(model.prior.zeta + onehot.sum(axis=0), 0.5 * (Sinv + np.swapaxes(Sinv, 1, 2)), rng)
    LQinv = np.linalg.inv(LQ)
    D = np.swapaxes(LQinv, 1, 2) @ LQinv
    state.D = 0.5 * (D + np.swapaxes(D, 1, 2))
    state.Dinv = Q
    state.Dchol = safe_cholesky(state.D)
    return state


def update_hyper_scale(state: ChainState, model: ChainModel, rng: np.random.Generator) -> ChainState:
    """Xi_jj | . ~ Gamma(g + K zeta / 2, h_j + sum_k (D_k^-1)_jj / 2)."""
    prior = model.prior
    shape = prior.gamma_shape + 0.5 * state.K * prior.zeta
    rate = prior.gamma_rate + 0.5 * np.diagonal(state.Dinv, axis1=1, axis2=2).sum(axis=0)
    state.xi = rng.standard_gamma(np.full(model.q, shape)) / rate
    return state


def update_means_covariances(state: ChainState, model: ChainModel, rng: np.random.Generator) -> ChainState:
    update_means(state, model, rng)
    update_covariances(state, model, rng)
    return state


def _b_log_prior(state: ChainState, b: np.ndarray) -> np.ndarray:
    d = b - state.mu[state.u]
    Pd = np.einsum("nij,nj->ni", state.Dinv[state.u], d)
    return -0.5 * np.sum(d * Pd, axis=1)


def update_random_effects(state: ChainState, model: ChainModel, rng: np.random.Generator,
                          adapting: bool = False) -> ChainState:
    """Joint q-dimensional move for every b_i.

    All-gaussian models get the exact conjugate normal draw; otherwise a random-walk
    MH proposal N(b_i, s_i^2 Sigma_i) with Sigma_i the Laplace covariance of the
    full conditional.
    """
    ds = model.ds
    if model.conjugate_b:
        P = state.Dinv[state.u].copy()
        h = np.einsum("nij,nj->ni", P, state.mu[state.u])
        if not model.ignore_data:
            inv_phi = 1.0 / state.phi[ds.marker_idx]
            P += np.add.reduceat(ds.ZZ * inv_phi[:, None, None], ds.starts, axis=0)
            resid = (ds.y - model.xa(state.alpha)) * inv_phi
            h += np.add.reduceat(ds.Z * resid[:, None], ds.starts, axis=0)
        L = np.linalg.cholesky(P)
        mean = np.linalg.solve(np.swapaxes(L, 1, 2), np.linalg.solve(L, h[..., None]))[..., 0]
        z = rng.standard_normal((model.N, model.q))
        state.b = mean + np.linalg.solve(np.swapaxes(L, 1, 2), z[..., None])[..., 0]
        return state

    xa = model.xa(state.alpha)
    eps = rng.standard_normal((model.N, model.q))
    logu = np.log(rng.random(model.N))
    prop = state.b + state.b_scale[:, None] * np.einsum("nij,nj->ni", state.b_factor, eps)
    ll = model.subject_loglik(xa[:, None] + np.stack([model.zb(state.b), model.zb(prop)], axis=1), state.phi)
    log_ratio = ll[:, 1] - ll[:, 0] + _b_log_prior(state, prop) - _b_log_prior(state, state.b)
    log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
    accept = logu < log_ratio
    state.b = np.where(accept[:, None], prop, state.b)
    if adapting:
        state.acc_b += np.exp(np.minimum(log_ratio, 0.0))
    return state


def update_glmm_params(state: ChainState, model: ChainModel, rng: np.random.Generator,
                       adapting: bool = False) -> ChainState:
    """Conjugate draws for gaussian markers, random-walk MH for other fixed effects."""
    ds, prior = model.ds, model.prior
    zb = model.zb(state.b)
    for r, rows in enumerate(model.rows):
        Xr = model.Xr[r]
        sl = ds.fixed_slices[r]
        pr = Xr.shape[1]
        if model.gaussian[r]:
            yr = ds.y[rows] - zb[rows]
            if pr:
                prec = np.eye(pr) / prior.alpha_prior_var
                h = np.full(pr, prior.alpha_prior_mean / prior.alpha_prior_var)
                if not model.ignore_data:
                    prec += Xr.T @ Xr / state.phi[r]
                    h += Xr.T @ yr / state.phi[r]
                L = np.linalg.cholesky(prec)
                mean = np.linalg.solve(L.T, np.linalg.solve(L, h))
                state.alpha[sl] = mean + np.linalg.solve(L.T, rng.standard_normal(pr))
            shape, rate = prior.phi_prior_shape, prior.phi_prior_rate
            if not model.ignore_data:
                resid = yr - (Xr @ state.alpha[sl] if pr else 0.0)
                shape += 0.5 * rows.size
                rate += 0.5 * float(resid @ resid)
            state.phi[r] = rate / rng.standard_gamma(shape)
        elif pr:
            a_cur = state.alpha[sl]
            eps = rng.standard_normal(pr)
            logu = math.log(rng.random())
            a_new = a_cur + state.alpha_scale[r] * (state.alpha_factor[r] @ eps)

            def target(a):
                lp = -0.5 * np.sum((a - prior.alpha_prior_mean) ** 2) / prior.alpha_prior_var
                if model.ignore_data:
                    return lp
                eta = Xr @ a + zb[rows]
                return lp + float(np.sum(_marker_loglik(ds, rows, eta)))

            lr = target(a_new) - target(a_cur)
            if not np.isfinite(lr):
                lr = -np.inf
            if logu < lr:
                state.alpha[sl] = a_new
            if adapting:
                state.acc_alpha[r] += math.exp(min(lr, 0.0))
    return state


def _marker_loglik(ds, rows, eta):
    from .model import log_family_density

    fam = ds.markers[int(ds.marker_idx[rows[0]])].family
    return log_family_density(fam, ds.y[rows], eta)


# ------------------------------------------------------------------ adaptation


def refresh_proposals(state: ChainState, model: ChainModel):
    """Laplace-based proposal covariances for b_i and the non-gaussian fixed effects."""
    ds, prior = model.ds, model.prior
    if not model.conjugate_b:
        if model.ignore_data:
            state.b_factor = state.Dchol[state.u].copy()
        else:
            res = laplace_batch(ds, state.psi, state.mu[state.u][:, None, :], state.Dinv[state.u][:, None],
                                b0=state.b[:, None, :], threads=model.threads)
            state.b_factor = proposal_factor(res.hess_chol[:, 0])
    zb = model.zb(state.b)
    for r, rows in enumerate(model.rows):
        Xr = model.Xr[r]
        if model.gaussian[r] or Xr.shape[1] == 0:
            continue
        H = np.eye(Xr.shape[1]) / prior.alpha_prior_var
        if not model.ignore_data:
            eta = Xr @ state.alpha[ds.fixed_slices[r]] + zb[rows]
            _, wt = _family_derivs(ds.markers[r].family, ds.y[rows], eta)
            H = H + Xr.T @ (wt[:, None] * Xr)
        state.alpha_factor[r] = proposal_factor(np.linalg.cholesky(H))


def _prepare_proposals(state: ChainState, model: ChainModel):
    state.b_scale = np.full(model.N, 2.38 / math.sqrt(model.q))
    state.alpha_scale = np.array([2.38 / math.sqrt(max(1, x.shape[1])) for x in model.Xr])
    state.alpha_factor = [np.eye(x.shape[1]) for x in model.Xr]
    state.b_factor = np.broadcast_to(np.eye(model.q), (model.N, model.q, model.q)).copy()
    state.acc_b = np.zeros(model.N)
    state.acc_alpha = np.zeros(model.ds.R)
    state.acc_sweeps = 0
    refresh_proposals(state, model)


def _adapt(state: ChainState, model: ChainModel, window_index: int):
    gain = window_index ** -0.6
    n = max(state.acc_sweeps, 1)
    rate_b = state.acc_b / n
    rate_a = state.acc_alpha / n
    if not model.conjugate_b:
        state.b_scale = state.b_scale * np.exp(gain * (rate_b - model.b_target))
    for r in range(model.ds.R):
        if not model.gaussian[r] and model.Xr[r].shape[1]:
            state.alpha_scale[r] *= math.exp(gain * (rate_a[r] - model.alpha_target[r]))
    refresh_proposals(state, model)
    summary = (float(rate_b.mean()) if not model.conjugate_b else float("nan"),
               [float(x) for x in rate_a])
    state.acc_b[:] = 0.0
    state.acc_alpha[:] = 0.0
    state.acc_sweeps = 0
    return summary


# ------------------------------------------------------------------ chain driver


@dataclass
class ChainSample:
    """Stored draws of one chain (M kept iterations)."""

    K: int
    w: np.ndarray  # (M,K)
    mu: np.ndarray  # (M,K,q)
    D: np.ndarray  # (M,K,q,q)
    alpha: np.ndarray  # (M,p)
    phi: np.ndarray  # (M,R)
    xi: np.ndarray  # (M,q)
    allocprob: np.ndarray  # (M,N,K)
    u: np.ndarray | None = None  # (M,N)
    b: np.ndarray | None = None  # (M,N,q)
    acceptance: dict = field(default_factory=dict)
    adapt_trace: list = field(default_factory=list)
    proposal_scales: dict = field(default_factory=dict)
    config: McmcConfig | None = None
    prior: PriorSpec | None = None
    perms: np.ndarray | None = None  # (M,K) applied relabelling
    names: dict = field(default_factory=dict)
    elapsed: float = 0.0
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def M(self) -> int:
        return int(self.w.shape[0])

    @property
    def N(self) -> int:
        return int(self.allocprob.shape[1])

    @property
    def q(self) -> int:
        return int(self.mu.shape[2])

    def psi(self, m: int) -> GlmmParams:
        return GlmmParams(self.alpha[m], self.phi[m])

    def theta(self, m: int) -> MixtureParams:
        return MixtureParams(self.w[m] / self.w[m].sum(), self.mu[m], self.D[m])

    def permuted(self, perms: np.ndarray) -> "ChainSample":
        """Relabelled copy: new component k of draw m is old component perms[m, k]."""
        perms = np.asarray(perms, dtype=np.intp)
        rows = np.arange(self.M)[:, None]
        inv = np.argsort(perms, axis=1)
        base = self.perms if self.perms is not None else np.broadcast_to(np.arange(self.K), (self.M, self.K))
        return replace(
            self,
            w=self.w[rows, perms],
            mu=self.mu[rows, perms],
            D=self.D[rows, perms],
            allocprob=np.take_along_axis(self.allocprob, perms[:, None, :], axis=2),
            u=None if self.u is None else np.take_along_axis(inv, self.u.astype(np.intp), axis=1),
            perms=np.take_along_axis(np.asarray(base), perms, axis=1),
            cache={k: v for k, v in self.cache.items() if k.startswith("perm_invariant:")},
        )


def run_chain(ds: ValidatedDataset, K: int, prior: PriorSpec | None = None,
              config: McmcConfig | None = None, *, state: ChainState | None = None,
              progress: bool = False) -> ChainSample:
    """Burn-in (with adaptation) followed by ``keep * thin`` sweeps storing every ``thin``-th."""
    config = config or McmcConfig()
    t0 = _time.perf_counter()
    crude = None
    if prior is None:
        crude = crude_random_effects(ds, threads=config.threads)
        prior = default_hyperparameters(ds, K, crude.effects)
    if state is None:
        state = initialize(ds, K, prior, config.seed, crude=crude, threads=config.threads)
    model = ChainModel(ds, K, prior, ignore_data=config.ignore_data, threads=config.threads)
    _prepare_proposals(state, model)
    rng = substream(config.seed, _CHAIN_STREAM)

    M, N, q, R = config.keep, ds.N, ds.q, ds.R
    out = {
        "w": np.empty((M, K)), "mu": np.empty((M, K, q)), "D": np.empty((M, K, q, q)),
        "alpha": np.empty((M, ds.p)), "phi": np.empty((M, R)), "xi": np.empty((M, q)),
        "allocprob": np.empty((M, N, K)), "u": np.empty((M, N), dtype=np.int16),
    }
    if config.store_b:
        out["b"] = np.empty((M, N, q))
    burn = config.burnin_sweeps if config.adapt else 0
    adapt_trace = []
    frozen_scales = None
    accepted_b = 0
    accepted_alpha = np.zeros(R)
    alpha_before = None
    post_sweeps = 0
    blocks = (
        ("allocations", update_allocations),
        ("weights", update_weights),
        ("means_covariances", update_means_covariances),
        ("hyper_scale", update_hyper_scale),
    )
    stored = 0
    window = max(1, config.window)
    for t in range(config.raw_sweeps):
        adapting = t < burn
        name = ""
        try:
            for name, fn in blocks:
                fn(state, model, rng)
            name = "random_effects"
            b_before = state.b
            update_random_effects(state, model, rng, adapting)
            name = "glmm_params"
            if not adapting:
                alpha_before = state.alpha.copy()
            update_glmm_params(state, model, rng, adapting)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            raise SamplerError(f"sweep {t}: block {name!r} failed: {exc}", t, name, state.copy()) from exc
        state.sweep = t + 1
        if adapting:
            state.acc_sweeps += 1
            if (t + 1) % window == 0 or t + 1 == burn:
                adapt_trace.append(_adapt(state, model, len(adapt_trace) + 1))
        else:
            if frozen_scales is None:
                frozen_scales = (state.b_scale.copy(), state.alpha_scale.copy())
            post_sweeps += 1
            if not model.conjugate_b:
                accepted_b += int(np.sum(np.any(state.b != b_before, axis=1)))
            for r in range(R):
                sl = ds.fixed_slices[r]
                if not model.gaussian[r] and sl.stop > sl.start:
                    accepted_alpha[r] += float(np.any(state.alpha[sl] != alpha_before[sl]))
            if (t + 1 - config.burnin_sweeps) % config.thin == 0 and t + 1 > config.burnin_sweeps:
                m = stored
                out["w"][m] = state.w
                out["mu"][m] = state.mu
                out["D"][m] = state.D
                out["alpha"][m] = state.alpha
                out["phi"][m] = state.phi
                out["xi"][m] = state.xi
                out["allocprob"][m] = allocation_probs(state)
                out["u"][m] = state.u
                if config.store_b:
                    out["b"][m] = state.b
                stored += 1
        if progress and (t + 1) % max(1, config.raw_sweeps // 20) == 0:
            log.info("sweep %d/%d", t + 1, config.raw_sweeps)
    assert stored == M, (stored, M)
    if frozen_scales is not None:
        assert np.array_equal(frozen_scales[0], state.b_scale) and np.array_equal(frozen_scales[1], state.alpha_scale), \
            "proposal scales changed after burn-in"

    acceptance = {}
    if not model.conjugate_b:
        acceptance["random_effects"] = accepted_b / max(1, post_sweeps * N)
    for r, m in enumerate(ds.markers):
        if not model.gaussian[r] and model.Xr[r].shape[1]:
            acceptance[f"alpha:{m.marker_id}"] = float(accepted_alpha[r] / max(1, post_sweeps))
    names = {
        "fixed": ds.fixed_names,
        "random": ds.random_names,
        "markers": [m.marker_id for m in ds.markers],
        "subjects": list(ds.subject_ids),
    }
    return ChainSample(
        K=K, **out, acceptance=acceptance, adapt_trace=adapt_trace,
        proposal_scales={"b_scale": state.b_scale.copy(), "alpha_scale": state.alpha_scale.copy()},
        config=config, prior=prior, names=names, elapsed=_time.perf_counter() - t0,
    )
