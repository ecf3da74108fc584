"""Label-switching correction, posterior cluster probabilities and summaries."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import roots_hermitenorm

from .marglik import component_log_marginals
from .mixture import normalize_log_probs
from .model import ValidatedDataset, inverse_link
from .sampler import ChainSample

EXHAUSTIVE_MAX_K = 6
_TINY = 1e-300


# ------------------------------------------------------------------ relabelling


def relabel_costs(Q: np.ndarray, logp: np.ndarray) -> np.ndarray:
    """G[m, k, l] = sum_i q_ik log p^(m)_il, the (negated) KL cost of mapping k -> l.

    ``Q`` is (N,K); ``logp`` is (M,N,K).
    """
    return np.einsum("ik,mil->mkl", Q, logp)


def best_permutations(G: np.ndarray, solver: str = "auto") -> np.ndarray:
    """Permutation per draw maximising sum_k G[m, k, perm[k]].

    ``solver`` is ``exhaustive`` (all K! permutations, identity first so ties keep
    the current labels), ``assignment`` (Hungarian algorithm) or ``auto``.
    """
    M, K, _ = G.shape
    if solver == "auto":
        solver = "exhaustive" if K <= EXHAUSTIVE_MAX_K else "assignment"
    if solver == "exhaustive":
        perms = np.array(list(itertools.permutations(range(K))), dtype=np.intp)
        score = G[:, np.arange(K)[None, :], perms].sum(axis=-1)  # (M, K!)
        return perms[np.argmax(score, axis=1)]
    if solver == "assignment":
        out = np.empty((M, K), dtype=np.intp)
        for m in range(M):
            rows, cols = linear_sum_assignment(G[m], maximize=True)
            out[m, rows] = cols
        return out
    raise ValueError(f"unknown solver {solver!r}")


def stephens_relabel(allocprobs: np.ndarray, max_rounds: int = 100, solver: str = "auto",
                     return_info: bool = False):
    """Stephens' KL relabelling of an N x K x M tensor of allocation probabilities.

    Returns an (M, K) array ``perms``: relabelled component k of draw m is the
    original component ``perms[m, k]``, i.e. p~_{i,k} = p_{i,perms[m,k]}.
    The reference matrix starts at the first draw; rounds alternate between
    averaging the permuted matrices and re-choosing permutations until no
    permutation changes.
    """
    P = np.asarray(allocprobs, dtype=float)
    if P.ndim != 3:
        raise ValueError("allocation probabilities must be an N x K x M array")
    P = np.moveaxis(P, 2, 0)  # (M, N, K)
    M, N, K = P.shape
    ident = np.broadcast_to(np.arange(K), (M, K)).copy()
    if K == 1 or M == 0:
        return (ident, {"rounds": 0, "converged": True}) if return_info else ident
    logp = np.log(np.maximum(P, _TINY))
    perms = ident
    Q = P[0]
    rounds, converged = 0, False
    for rounds in range(1, max_rounds + 1):
        new = best_permutations(relabel_costs(Q, logp), solver)
        changed = not np.array_equal(new, perms)
        perms = new
        Q = np.take_along_axis(P, perms[:, None, :], axis=2).mean(axis=0)
        if not changed and rounds > 1:
            converged = True
            break
    info = {"rounds": rounds, "converged": converged,
            "objective": float(-np.einsum("ik,mik->", Q, np.take_along_axis(logp, perms[:, None, :], axis=2)))}
    return (perms, info) if return_info else perms


def relabel_objective(allocprobs: np.ndarray, perms: np.ndarray) -> float:
    """Stephens objective sum_m sum_i sum_k q_ik log(q_ik / p~^(m)_ik) for given perms."""
    P = np.moveaxis(np.asarray(allocprobs, float), 2, 0)
    Pp = np.take_along_axis(P, np.asarray(perms)[:, None, :], axis=2)
    Q = Pp.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lq = np.where(Q > 0, np.log(Q), 0.0)
    return float(np.sum(Q * lq) * P.shape[0] - np.einsum("ik,mik->", Q, np.log(np.maximum(Pp, _TINY))))


def relabel_chain(chain: ChainSample, **kw) -> ChainSample:
    """Apply Stephens' relabelling to every stored parameter block of ``chain``."""
    perms = stephens_relabel(np.moveaxis(chain.allocprob, 0, 2), **kw)
    return chain.permuted(perms)


# ------------------------------------------------------------------ cluster probabilities


def chain_log_marginals(chain: ChainSample, ds: ValidatedDataset, method: str = "laplace",
                        threads: int = 1) -> np.ndarray:
    """log L_{i,k} for every stored draw, shape (M, N, K); cached on the chain.

    Mode searches are warm-started from the previous draw's modes.
    """
    # the dataset is stored with the values so a recycled id() cannot alias it
    key = f"logL:{method}:{id(ds)}"
    hit = chain.cache.get(key)
    if hit is not None and hit[0] is ds:
        return hit[1]
    out = np.empty((chain.M, ds.N, chain.K))
    modes = None
    for m in range(chain.M):
        res = component_log_marginals(ds, chain.psi(m), chain.theta(m), method, b0=modes,
                                      threads=threads, iteration=m, return_modes=True)
        out[m], modes = res
    chain.cache[key] = (ds, out)
    return out


def posterior_component_probs(chain: ChainSample, ds: ValidatedDataset | None = None,
                              method: str = "marginal", marglik: str = "laplace", threads: int = 1):
    """pi_hat (N,K) and per-draw probabilities p_draws (N,K,M).

    ``marginal``: p_ik = w_k L_ik / sum_l w_l L_il with the random effects
    integrated out.  ``augmented``: the stored conditional allocation
    probabilities given the sampled random effects.  Passing a dataset other than
    the fitted one scores new subjects under the fitted posterior (``marginal``
    only).
    """
    if method == "augmented":
        if ds is not None and ds.N != chain.N:
            raise ValueError("the augmented backend only covers the subjects of the fit")
        p = chain.allocprob
    elif method == "marginal":
        if ds is None:
            raise ValueError("the marginal backend needs the dataset")
        logL = chain_log_marginals(chain, ds, marglik, threads)
        with np.errstate(divide="ignore"):
            logw = np.log(chain.w)
        p = normalize_log_probs(logL + logw[:, None, :])
    else:
        raise ValueError(f"unknown probability backend {method!r}")
    p_draws = np.moveaxis(p, 0, 2)
    return p_draws.mean(axis=2), p_draws


def hpd_interval(samples, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval spanned by ceil(level * M) sorted samples."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    M = x.size
    if M < 2:
        raise ValueError("need at least two samples for an HPD interval")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    n = max(1, math.ceil(level * M - 1e-9))
    widths = x[n - 1:] - x[: M - n + 1]
    j = int(np.argmin(widths))
    return float(x[j]), float(x[j + n - 1])


def hpd_intervals(draws: np.ndarray, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """HPD bounds along the last axis of ``draws``."""
    x = np.sort(np.asarray(draws, float), axis=-1)
    M = x.shape[-1]
    if M < 2:
        raise ValueError("need at least two samples for an HPD interval")
    n = max(1, math.ceil(level * M - 1e-9))
    widths = x[..., n - 1:] - x[..., : M - n + 1]
    j = np.argmin(widths, axis=-1)[..., None]
    return np.take_along_axis(x, j, -1)[..., 0], np.take_along_axis(x, j + n - 1, -1)[..., 0]


def classify(pi_hat) -> tuple[np.ndarray, np.ndarray]:
    """0-based argmax cluster per row with ties going to the lower index, and tie flags."""
    pi_hat = np.atleast_2d(np.asarray(pi_hat, float))
    g = np.argmax(pi_hat, axis=1)
    tie = (pi_hat == pi_hat.max(axis=1, keepdims=True)).sum(axis=1) > 1
    return g, tie


def classify_thresholded(p_draws, level: float = 0.95, threshold: float = 0.5):
    """Assign subject i to k only if the HPD lower limit of p_ik exceeds ``threshold``.

    Returns (labels, lo, hi) with label -1 for deferred subjects.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    p_draws = np.asarray(p_draws, float)
    if p_draws.shape[-1] == 1:
        p_draws = np.concatenate([p_draws, p_draws], axis=-1)
    lo, hi = hpd_intervals(p_draws, level)
    ok = lo > threshold
    labels = np.where(ok.any(axis=1), np.argmax(np.where(ok, lo, -np.inf), axis=1), -1)
    return labels, lo, hi


# ------------------------------------------------------------------ summaries


def _stat(x, level):
    x = np.asarray(x, float)
    lo, hi = hpd_interval(x, level) if x.size >= 2 else (float(x[0]), float(x[0]))
    return {"mean": float(x.mean()), "hpd": [lo, hi]}


def cov_to_sd_corr(D: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sd = np.sqrt(np.diag(D))
    corr = D / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return sd, np.clip(corr, -1.0, 1.0)


def summarize(chain: ChainSample, level: float = 0.95) -> dict:
    """Posterior means and HPD intervals keyed by parameter name."""
    rnames = chain.names.get("random") or [f"b{j + 1}" for j in range(chain.q)]
    fnames = chain.names.get("fixed") or [f"alpha{j + 1}" for j in range(chain.alpha.shape[1])]
    markers = chain.names.get("markers") or [f"marker{r + 1}" for r in range(chain.phi.shape[1])]
    out = {"K": chain.K, "draws": chain.M, "level": level, "params": {}}
    par = out["params"]
    for k in range(chain.K):
        par[f"w[{k + 1}]"] = _stat(chain.w[:, k], level)
        for j, nm in enumerate(rnames):
            par[f"mu[{k + 1}][{nm}]"] = _stat(chain.mu[:, k, j], level)
    for j, nm in enumerate(fnames):
        par[f"alpha[{nm}]"] = _stat(chain.alpha[:, j], level)
    for r, nm in enumerate(markers):
        if np.all(np.isfinite(chain.phi[:, r])):
            par[f"sigma[{nm}]"] = _stat(np.sqrt(chain.phi[:, r]), level)
    beta = np.einsum("mk,mkj->mj", chain.w, chain.mu)
    for j, nm in enumerate(rnames):
        par[f"beta[{nm}]"] = _stat(beta[:, j], level)
    out["covariance"] = {}
    for k in range(chain.K):
        sd, corr = cov_to_sd_corr(chain.D[:, k].mean(axis=0))
        out["covariance"][str(k + 1)] = {"names": list(rnames), "sd": sd.tolist(), "corr": corr.tolist()}
    out["beta_hat"] = (chain.w.mean(0) @ chain.mu.mean(0)).tolist()
    out["acceptance"] = dict(chain.acceptance)
    return out


def marginal_mean_curves(chain: ChainSample, ds: ValidatedDataset, times, n_quad: int = 40) -> dict:
    """Cluster-specific population-average marker means over ``times`` (posterior means).

    For marker r with fixed row x(t) and random row z(t), the mean of
    h^{-1}(x alpha + z b) over b ~ N(mu_k, D_k): exact for identity and log links,
    Gauss-Hermite quadrature for the logit.  Returns {marker: array (K, T)}.
    """
    times = np.asarray(times, float)
    alpha = chain.alpha.mean(0)
    mu = chain.mu.mean(0)
    D = chain.D.mean(0)
    nodes, weights = roots_hermitenorm(n_quad)
    weights = weights / weights.sum()
    out = {}
    for r, m in enumerate(ds.markers):
        fs, rs = ds.fixed_slices[r], ds.random_slices[r]
        x = np.column_stack([c.evaluate(times, _attr_placeholder(c, times)) for c in m.fixed_covariates]) \
            if m.fixed_covariates else np.zeros((times.size, 0))
        z = np.column_stack([c.evaluate(times, _attr_placeholder(c, times)) for c in m.random_covariates]) \
            if m.random_covariates else np.zeros((times.size, 0))
        curves = np.empty((chain.K, times.size))
        for k in range(chain.K):
            mean = x @ alpha[fs] + z @ mu[k, rs]
            var = np.einsum("tj,jl,tl->t", z, D[k][rs, rs], z)
            if m.family == "gaussian":
                curves[k] = mean
            elif m.family == "poisson":
                curves[k] = np.exp(mean + 0.5 * var)
            else:
                curves[k] = (inverse_link("bernoulli", mean[:, None] + np.sqrt(var)[:, None] * nodes) * weights).sum(1)
        out[m.marker_id] = curves
    return out


def _attr_placeholder(cov, times):
    # attribute covariates are evaluated at zero for population curves
    return np.zeros_like(times) if cov.kind == "attribute" else None
