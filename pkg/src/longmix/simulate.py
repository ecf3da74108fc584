"""Simulated three-marker datasets with known cluster memberships, and scoring helpers.

The design mimics a biomarker follow-up study: a gaussian marker with random
intercept and slope, a Poisson count with random intercept and slope, and a
binary indicator with a random intercept and a fixed time slope, each observed at
four visits spread over roughly two years.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import DAYS_PER_MONTH, Dataset, MarkerSpec, ValidatedDataset, validate_dataset
from .rng import substream

# visit windows in days after the first visit at day 0
VISIT_WINDOWS = ((170.0, 200.0), (350.0, 390.0), (710.0, 770.0))
MVT_DF = 5


def pbc_markers() -> list[MarkerSpec]:
    return [
        MarkerSpec("lbili", "gaussian", (), ("intercept", "time")),
        MarkerSpec("platelet", "poisson", (), ("intercept", "time")),
        MarkerSpec("spiders", "bernoulli", ("time",), ("intercept",)),
    ]


def _cov_from_sd_corr(sd, upper):
    sd = np.asarray(sd, float)
    q = sd.size
    R = np.eye(q)
    R[np.triu_indices(q, 1)] = upper
    R = R + np.triu(R, 1).T
    return R * np.outer(sd, sd)


# Component covariances for the simulation truths: standard deviations and
# correlations of the fitted two-cluster model for the biliary cirrhosis data.
_COV_1 = _cov_from_sd_corr(
    (0.428, 0.00837, 0.309, 0.0105, 4.02),
    (0.031, -0.282, -0.086, 0.326, 0.040, -0.214, 0.100, -0.039, -0.042, 0.028),
)
_COV_2 = _cov_from_sd_corr(
    (0.776, 0.03090, 0.398, 0.0232, 2.42),
    (-0.183, 0.119, -0.139, 0.171, -0.034, 0.249, 0.116, -0.046, -0.191, -0.043),
)

_MU = np.array([
    [0.0, 0.01, 5.0, -0.005, -3.0],
    [1.0, 0.01, 5.0, -0.02, -1.0],
    [1.3, -0.03, 5.5, 0.0, -2.0],
])


@dataclass
class SimSetting:
    """Truths and sample sizes for one simulation scenario."""

    weights: np.ndarray
    mu: np.ndarray
    D: np.ndarray
    sizes: tuple
    sigma1: float = 0.3
    alpha3: float = 0.05
    law: str = "normal"
    seed: int = 0
    share_times: bool = False
    markers: list = field(default_factory=pbc_markers)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, float)
        self.mu = np.atleast_2d(np.asarray(self.mu, float))
        self.D = np.asarray(self.D, float)
        self.sizes = tuple(int(s) for s in self.sizes)
        K = self.weights.size
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative and sum to one")
        if self.mu.shape != (K, 5) or self.D.shape != (K, 5, 5) or len(self.sizes) != K:
            raise ValueError("inconsistent setting dimensions")
        if min(self.sizes) < 1:
            raise ValueError("every cluster needs at least one subject")
        if self.law not in ("normal", "mvt5"):
            raise ValueError(f"unknown random-effect law {self.law!r}")
        for Dk in self.D:
            np.linalg.cholesky(Dk)
        if not self.sigma1 > 0:
            raise ValueError("sigma1 must be positive")

    @property
    def K_true(self) -> int:
        return self.weights.size

    @property
    def N(self) -> int:
        return sum(self.sizes)


PRESETS = ("k2-normal", "k2-mvt5", "k3-normal", "k3-mvt5")


def preset(name: str, sizes=None, seed: int = 0, **kw) -> SimSetting:
    """One of the shipped scenarios: ``k2-normal``, ``k2-mvt5``, ``k3-normal``, ``k3-mvt5``."""
    if name not in PRESETS:
        raise ValueError(f"unknown setting {name!r}; choose from {PRESETS}")
    law = name.split("-")[1]
    if name.startswith("k2"):
        w = (0.6, 0.4)
        D = np.stack([_COV_1, _COV_2])
        sizes = sizes or (120, 80)
    else:
        w = (0.60, 0.34, 0.06)
        # the small third cluster borrows the second cluster's covariance
        D = np.stack([_COV_1, _COV_2, _COV_2])
        sizes = sizes or (120, 68, 12)
    K = len(w)
    return SimSetting(np.array(w), _MU[:K].copy(), D, tuple(sizes), law=law, seed=seed, **kw)


def _visit_times(rng, n):
    """(n, 4) visit times in months with the first at zero."""
    t = np.zeros((n, 4))
    for j, (lo, hi) in enumerate(VISIT_WINDOWS, start=1):
        t[:, j] = rng.uniform(lo, hi, size=n)
    return t / DAYS_PER_MONTH


def draw_effects(setting: SimSetting, alloc: np.ndarray, rng) -> np.ndarray:
    """Random effects for each subject from its cluster's normal or scaled t law."""
    N = alloc.size
    L = np.linalg.cholesky(setting.D)[alloc]
    z = rng.standard_normal((N, 5))
    if setting.law == "mvt5":
        # scale matrix (nu-2)/nu * D so that the covariance equals D
        scale = np.sqrt((MVT_DF - 2) / MVT_DF) / np.sqrt(rng.chisquare(MVT_DF, size=N) / MVT_DF)
        z = z * scale[:, None]
    return setting.mu[alloc] + np.einsum("nij,nj->ni", L, z)


def simulate_dataset(setting: SimSetting, return_effects: bool = False):
    """Generate a dataset with ``setting.sizes`` subjects per cluster.

    Returns ``(dataset, allocation)`` or, with ``return_effects``, also the
    (N, 5) matrix of true random effects.  Subjects are numbered 1..N and their
    true cluster labels are shuffled.
    """
    rng = substream(setting.seed)
    N = setting.N
    alloc = rng.permutation(np.repeat(np.arange(setting.K_true), setting.sizes))
    b = draw_effects(setting, alloc, rng)
    if setting.share_times:
        t = _visit_times(rng, N)
        times = [t, t, t]
    else:
        times = [_visit_times(rng, N) for _ in range(3)]
    y_lbili = b[:, [0]] + b[:, [1]] * times[0] + setting.sigma1 * rng.standard_normal((N, 4))
    y_plat = rng.poisson(np.exp(b[:, [2]] + b[:, [3]] * times[1])).astype(float)
    eta = b[:, [4]] + setting.alpha3 * times[2]
    y_spid = (rng.random((N, 4)) < 1.0 / (1.0 + np.exp(-eta))).astype(float)

    ids = np.arange(1, N + 1)
    subject, marker, tt, value = [], [], [], []
    for name, tm, yv in zip(("lbili", "platelet", "spiders"), times, (y_lbili, y_plat, y_spid)):
        subject.append(np.repeat(ids, 4))
        marker += [name] * (4 * N)
        tt.append(tm.ravel())
        value.append(yv.ravel())
    raw = Dataset(setting.markers, np.concatenate(subject).tolist(), marker,
                  np.concatenate(tt).tolist(), np.concatenate(value).tolist())
    ds = validate_dataset(raw)
    # validate_dataset orders subjects by first appearance, i.e. 1..N
    assert ds.subject_ids == tuple(ids.tolist())
    return (ds, alloc, b) if return_effects else (ds, alloc)


def confusion(assigned, truth, K: int) -> np.ndarray:
    assigned = np.asarray(assigned, int)
    truth = np.asarray(truth, int)
    if assigned.shape != truth.shape:
        raise ValueError("assigned and true labels differ in length")
    for lab in (assigned, truth):
        if lab.size and (lab.min() < 0 or lab.max() >= K):
            raise ValueError(f"labels must lie in 0..{K - 1}")
    cm = np.zeros((K, K), dtype=int)
    np.add.at(cm, (truth, assigned), 1)
    return cm


def classification_error(assigned, truth, K: int) -> float:
    """Mismatch fraction minimised over relabelings of ``assigned``."""
    cm = confusion(assigned, truth, K)
    if cm.sum() == 0:
        return 0.0
    r, c = linear_sum_assignment(cm, maximize=True)
    return 1.0 - cm[r, c].sum() / cm.sum()


def match_components(est_mu, true_mu, scale=None) -> np.ndarray:
    """Permutation ``perm`` with est component perm[k] matched to true component k.

    Distances are computed on coordinates divided by ``scale`` (defaults to the
    spread of the true means, or one where that is zero).
    """
    est_mu, true_mu = np.atleast_2d(est_mu), np.atleast_2d(true_mu)
    if scale is None:
        scale = np.ptp(true_mu, axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    d = (((true_mu[:, None, :] - est_mu[None, :, :]) / scale) ** 2).sum(-1)
    _, perm = linear_sum_assignment(d)
    return perm


def mse_report(estimates, truth) -> dict:
    """Root of the component-averaged mean squared error for each parameter.

    ``estimates`` is a sequence of replicates, each a mapping from parameter name
    to an array whose first axis indexes components (already aligned with the
    truth); ``truth`` maps the same names to the true arrays.  Parameters without
    components should be given a leading axis of length one.
    """
    if len(estimates) < 1:
        raise ValueError("need at least one replicate")
    out = {}
    for name, true in truth.items():
        true = np.asarray(true, float)
        est = np.stack([np.asarray(e[name], float) for e in estimates])
        mse = np.mean((est - true) ** 2, axis=0)
        val = np.sqrt(np.mean(mse, axis=0)) if true.ndim else np.sqrt(mse)
        out[name] = float(val) if np.ndim(val) == 0 else val
    return out


def write_truth(path, ds: ValidatedDataset, alloc, b):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["subject", "cluster"] + [f"b{j + 1}" for j in range(b.shape[1])])
        for sid, k, bi in zip(ds.subject_ids, alloc, b):
            wr.writerow([sid, int(k) + 1] + [repr(float(x)) for x in bi])
