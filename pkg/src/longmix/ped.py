"""Penalized expected deviance for choosing the number of mixture components.

PED = E[D | y] + p_opt.  The optimism p_opt sums, over subjects, the expected
Jeffreys divergence between the predictive distributions of a subject's data
under two independent posterior draws, where the expectation is taken under the
leave-that-subject-out posterior.  Draws are paired across two independent
chains and reweighted by 1 / (p(y_i | draw A) p(y_i | draw B)).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .marglik import component_log_marginals, mixture_log_marginals
from .mixture import MixtureParams
from .model import GAUSSIAN, POISSON, GlmmParams, ValidatedDataset
from .postprocess import chain_log_marginals, relabel_chain
from .rng import substream
from .sampler import ChainSample

log = logging.getLogger(__name__)

PLUMMER_IS = "plummer_is"
TWO_PD_FALLBACK = "two_pD_fallback"
MIN_RELATIVE_ESS = 0.01
_REPLICATE_STREAM = 7


@dataclass
class PedRecord:
    K: int
    expected_deviance: float
    p_opt: float
    ped: float
    estimator: str
    mc_se: float = float("nan")
    flags: list = field(default_factory=list)
    min_ess: float = float("nan")
    method: str = "laplace"

    def __post_init__(self):
        if not math.isfinite(self.p_opt):
            raise ValueError("optimism must be finite")

    @classmethod
    def assemble(cls, K, expected_deviance, p_opt, estimator, **kw) -> "PedRecord":
        return cls(K, float(expected_deviance), float(p_opt), float(expected_deviance) + float(p_opt),
                   estimator, **kw)

    def to_row(self) -> dict:
        return {
            "K": self.K, "PED": self.ped, "E[D]": self.expected_deviance, "p_opt": self.p_opt,
            "estimator": self.estimator, "mc_se": self.mc_se, "flags": ";".join(self.flags),
        }


@dataclass
class OptimismResult:
    p_opt: float
    estimator: str
    per_subject: np.ndarray | None = None
    min_ess: float = float("nan")
    flags: list = field(default_factory=list)


def deviance_trace(chain: ChainSample, ds: ValidatedDataset, method: str = "laplace",
                   threads: int = 1) -> np.ndarray:
    """Observed-data deviance of every stored draw."""
    return -2.0 * draw_subject_loglik(chain, ds, method, threads).sum(axis=1)


def draw_subject_loglik(chain, ds, method="laplace", threads=1) -> np.ndarray:
    """log p(y_i | psi^(m), theta^(m)) with the random effects integrated out; (M, N)."""
    logL = chain_log_marginals(chain, ds, method, threads)
    return mixture_log_marginals(logL, chain.w)


def batch_means_se(x: np.ndarray, n_batches: int | None = None) -> float:
    x = np.asarray(x, float)
    M = x.size
    if M < 4:
        return float("nan")
    nb = n_batches or max(2, int(math.sqrt(M)))
    size = M // nb
    means = x[: nb * size].reshape(nb, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(nb))


def expected_deviance(chain: ChainSample, ds: ValidatedDataset, method: str = "laplace",
                      threads: int = 1) -> float:
    return float(deviance_trace(chain, ds, method, threads).mean())


def simulate_replicate(ds: ValidatedDataset, psi: GlmmParams, theta: MixtureParams,
                       rng: np.random.Generator) -> np.ndarray:
    """Fresh responses at the observed design: u ~ w, b ~ N(mu_u, D_u), y ~ GLMM."""
    u = np.minimum((rng.random(ds.N)[:, None] > np.cumsum(theta.w)).sum(axis=1), theta.K - 1)
    b = theta.mu[u] + np.einsum("nij,nj->ni", theta.chol[u], rng.standard_normal((ds.N, theta.q)))
    eta = (ds.X @ psi.alpha if ds.p else 0.0) + np.sum(ds.Z * b[ds.subj], axis=1)
    code = ds.family_code
    y = np.empty(ds.n)
    g = code == GAUSSIAN
    pz = code == POISSON
    bz = ~(g | pz)
    noise = rng.standard_normal(ds.n)
    unif = rng.random(ds.n)
    y[g] = eta[g] + np.sqrt(psi.phi[ds.marker_idx[g]]) * noise[g]
    y[pz] = rng.poisson(np.exp(np.minimum(eta[pz], 700.0)))
    y[bz] = (unif[bz] < 1.0 / (1.0 + np.exp(-eta[bz]))).astype(float)
    return y


def _replicate_loglik(ds, y, psi, theta, method, threads):
    lc = component_log_marginals(ds, psi, theta, method, y=y, threads=threads)
    return mixture_log_marginals(lc, theta.w)


def jeffreys_estimate(ds, psiA, thetaA, psiB, thetaB, rng, method="laplace", threads=1) -> np.ndarray:
    """Unbiased one-replicate estimate of the per-subject Jeffreys divergence J_i(A, B).

    J_i = E_A[log p_A(Y_i) - log p_B(Y_i)] + E_B[log p_B(Y_i) - log p_A(Y_i)].
    """
    yA = simulate_replicate(ds, psiA, thetaA, rng)
    yB = simulate_replicate(ds, psiB, thetaB, rng)
    out = _replicate_loglik(ds, yA, psiA, thetaA, method, threads) - _replicate_loglik(ds, yA, psiB, thetaB, method, threads)
    out += _replicate_loglik(ds, yB, psiB, thetaB, method, threads) - _replicate_loglik(ds, yB, psiA, thetaA, method, threads)
    return out


def _same_draws(a: ChainSample, b: ChainSample) -> bool:
    return a is b or all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("w", "mu", "D", "alpha", "phi"))


def posterior_mean_params(chain: ChainSample) -> tuple[GlmmParams, MixtureParams]:
    """Plug-in parameters from posterior means of a (relabelled) chain."""
    w = chain.w.mean(0)
    phi = chain.phi.mean(0)
    return GlmmParams(chain.alpha.mean(0), phi), MixtureParams(w / w.sum(), chain.mu.mean(0), chain.D.mean(0))


def plugin_optimism(chains, ds, method="laplace", threads=1) -> float:
    """2 (E[D] - D(posterior mean)) per chain, averaged over the chains.

    Each chain is relabelled first: posterior means taken across label switches
    mix unrelated components and can drive the penalty negative.
    """
    vals = []
    for ch in chains:
        psi, theta = posterior_mean_params(relabel_chain(ch))
        lc = component_log_marginals(ds, psi, theta, method, threads=threads)
        d_bar = float(-2.0 * mixture_log_marginals(lc, theta.w).sum())
        vals.append(2.0 * (expected_deviance(ch, ds, method, threads) - d_bar))
    return float(np.mean(vals))


def optimism(chainA: ChainSample, chainB: ChainSample, ds: ValidatedDataset, method: str = "laplace",
             *, pairs: int | None = None, seed: int = 0, threads: int = 1) -> OptimismResult:
    """Cross-chain importance-sampling estimate of the optimism.

    Draw m of chain A is paired with draw m of chain B.  ``pairs`` limits the
    number of (evenly spaced) pairs used, which bounds the cost of the replicate
    evaluations.  Degenerate importance weights (effective sample size below
    1% of the pairs for some subject, or two identical chains) switch to the
    plug-in estimate 2 (E[D] - D(theta_bar)), flagged in the result.
    """
    if chainA.K != chainB.K:
        raise ValueError("chains have different numbers of components")
    if chainA.M != chainB.M or chainA.N != chainB.N:
        raise ValueError("chains must have the same number of draws and subjects")
    M = chainA.M
    idx = np.arange(M) if not pairs or pairs >= M else np.unique(np.linspace(0, M - 1, pairs).round().astype(int))
    flags = []

    def fallback(reason, ess=float("nan")):
        flags.append(reason)
        val = plugin_optimism([chainA, chainB], ds, method, threads)
        if not val > 0:
            flags.append("nonpositive_penalty")
        return OptimismResult(val, TWO_PD_FALLBACK, None, ess, flags)

    if _same_draws(chainA, chainB):
        return fallback("identical_chains")
    lA = draw_subject_loglik(chainA, ds, method, threads)[idx]
    lB = draw_subject_loglik(chainB, ds, method, threads)[idx]
    logw = -(lA + lB)
    logw -= logsumexp(logw, axis=0)
    wts = np.exp(logw)  # (pairs, N), columns sum to one
    ess = 1.0 / np.sum(wts**2, axis=0)
    min_ess = float(ess.min())
    if min_ess < MIN_RELATIVE_ESS * idx.size:
        return fallback("degenerate_weights", min_ess)
    J = np.empty((idx.size, ds.N))
    for j, m in enumerate(idx):
        rng = substream(seed, _REPLICATE_STREAM, int(m))
        J[j] = jeffreys_estimate(ds, chainA.psi(m), chainA.theta(m), chainB.psi(m), chainB.theta(m), rng,
                                 method, threads)
    per_subject = np.sum(wts * J, axis=0)
    p_opt = float(per_subject.sum())
    if not p_opt > 0:
        flags.append("nonpositive_penalty")
    return OptimismResult(p_opt, PLUMMER_IS, per_subject, min_ess, flags)


def ped(chainA: ChainSample, chainB: ChainSample, ds: ValidatedDataset, method: str = "laplace", *,
        pairs: int | None = None, seed: int = 0, threads: int = 1) -> PedRecord:
    """PED record for one K from two independent chains."""
    dA = deviance_trace(chainA, ds, method, threads)
    dB = deviance_trace(chainB, ds, method, threads)
    e_dev = 0.5 * (float(dA.mean()) + float(dB.mean()))
    se = 0.5 * math.sqrt(batch_means_se(dA) ** 2 + batch_means_se(dB) ** 2)
    opt = optimism(chainA, chainB, ds, method, pairs=pairs, seed=seed, threads=threads)
    return PedRecord.assemble(chainA.K, e_dev, opt.p_opt, opt.estimator, mc_se=se, flags=list(opt.flags),
                              min_ess=opt.min_ess, method=method)


def select_K(records) -> tuple[int, list]:
    """K with the smallest PED (ties go to the smaller K) and the records sorted by K."""
    records = sorted(records, key=lambda r: r.K)
    if not records:
        raise ValueError("no PED records given")
    Ks = [r.K for r in records]
    if len(set(Ks)) != len(Ks):
        raise ValueError("PED records must have distinct K")
    best = min(records, key=lambda r: (r.ped, r.K))
    return best.K, records


def write_ped_csv(path, records):
    best, records = select_K(records)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["K", "PED", "E[D]", "p_opt", "estimator", "mc_se", "flags", "selected"])
        for r in records:
            wr.writerow([r.K, repr(r.ped), repr(r.expected_deviance), repr(r.p_opt), r.estimator,
                         repr(r.mc_se), ";".join(r.flags), int(r.K == best)])
