"""Longitudinal data model: marker declarations, datasets, GLMM densities."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import expit, gammaln

DAYS_PER_MONTH = 365.25 / 12.0

FAMILIES = ("gaussian", "poisson", "bernoulli")
LINKS = {"gaussian": "identity", "poisson": "log", "bernoulli": "logit"}
GAUSSIAN, POISSON, BERNOULLI = 0, 1, 2
_FAMILY_CODE = {"gaussian": GAUSSIAN, "poisson": POISSON, "bernoulli": BERNOULLI}
_LOG_2PI = math.log(2.0 * math.pi)


class DatasetError(ValueError):
    """Raised when input observations or marker declarations are invalid."""


@dataclass(frozen=True)
class Covariate:
    """One covariate constructor: a function of time and static subject attributes.

    ``kind`` is one of ``intercept``, ``time``, ``time_power`` or ``attribute``.
    """

    kind: str
    power: int = 1
    attribute: str | None = None

    def __post_init__(self):
        if self.kind not in ("intercept", "time", "time_power", "attribute"):
            raise DatasetError(f"unknown covariate kind {self.kind!r}")
        if self.kind == "attribute" and not self.attribute:
            raise DatasetError("attribute covariate needs an attribute name")

    @classmethod
    def parse(cls, text: str) -> "Covariate":
        text = text.strip()
        if text in ("intercept", "1"):
            return cls("intercept")
        if text in ("time", "t"):
            return cls("time")
        if text.startswith(("time^", "t^")):
            power = int(text.split("^", 1)[1])
            return cls("time") if power == 1 else cls("time_power", power=power)
        if text.startswith("attr:"):
            return cls("attribute", attribute=text[5:])
        raise DatasetError(f"cannot parse covariate {text!r}")

    @property
    def label(self) -> str:
        if self.kind == "time_power":
            return f"time^{self.power}"
        if self.kind == "attribute":
            return f"attr:{self.attribute}"
        return self.kind

    def evaluate(self, time: np.ndarray, attribute_values: np.ndarray | None = None) -> np.ndarray:
        time = np.asarray(time, dtype=float)
        if self.kind == "intercept":
            return np.ones_like(time)
        if self.kind == "time":
            return time.copy()
        if self.kind == "time_power":
            return time**self.power
        if attribute_values is None:
            raise DatasetError(f"subject attribute {self.attribute!r} not supplied")
        return np.asarray(attribute_values, dtype=float)


def _as_covariates(items) -> tuple[Covariate, ...]:
    return tuple(c if isinstance(c, Covariate) else Covariate.parse(c) for c in items)


@dataclass(frozen=True)
class MarkerSpec:
    """Declaration of one longitudinal marker: its family and covariate constructors."""

    marker_id: str
    family: str
    fixed_covariates: tuple[Covariate, ...] = ()
    random_covariates: tuple[Covariate, ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DatasetError(f"marker {self.marker_id!r}: unsupported family {self.family!r}")
        object.__setattr__(self, "fixed_covariates", _as_covariates(self.fixed_covariates))
        object.__setattr__(self, "random_covariates", _as_covariates(self.random_covariates))
        if set(self.fixed_covariates) & set(self.random_covariates):
            raise DatasetError(
                f"marker {self.marker_id!r}: fixed and random covariates must be disjoint"
            )

    @property
    def link(self) -> str:
        return LINKS[self.family]

    @property
    def code(self) -> int:
        return _FAMILY_CODE[self.family]

    def to_dict(self) -> dict:
        return {
            "id": self.marker_id,
            "family": self.family,
            "fixed": [c.label for c in self.fixed_covariates],
            "random": [c.label for c in self.random_covariates],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MarkerSpec":
        family = d["family"]
        if "link" in d and d["link"] != LINKS.get(family):
            raise DatasetError(f"marker {d.get('id')!r}: link {d['link']!r} does not match {family}")
        return cls(str(d["id"]), family, tuple(d.get("fixed", ())), tuple(d.get("random", ())))


class Observation(NamedTuple):
    subject_id: Any
    marker_id: str
    time: float
    value: float


@dataclass
class Dataset:
    """Raw long-format observations plus marker declarations (not yet validated)."""

    markers: Sequence[MarkerSpec]
    subject: Sequence[Any]
    marker: Sequence[str]
    time: Sequence[float]
    value: Sequence[float]
    attributes: Mapping[Any, Mapping[str, float]] = field(default_factory=dict)

    @classmethod
    def from_observations(cls, markers, observations: Iterable[Observation], attributes=None):
        obs = list(observations)
        return cls(
            list(markers),
            [o.subject_id for o in obs],
            [o.marker_id for o in obs],
            [o.time for o in obs],
            [o.value for o in obs],
            dict(attributes or {}),
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ValidatedDataset:
    """Immutable, sorted, design-expanded dataset ready for likelihood work.

    Observations are ordered by subject (first-appearance order), marker and time,
    so each subject's rows form one contiguous block starting at ``starts[i]``.
    ``X`` (n x p) and ``Z`` (n x q) are the stacked fixed and random design rows,
    zero outside the block of the observation's marker.
    """

    markers: tuple[MarkerSpec, ...]
    subject_ids: tuple
    subj: np.ndarray
    marker_idx: np.ndarray
    time: np.ndarray
    y: np.ndarray
    attributes: Mapping[Any, Mapping[str, float]]
    X: np.ndarray
    Z: np.ndarray
    counts: np.ndarray
    starts: np.ndarray
    fixed_slices: tuple[slice, ...]
    random_slices: tuple[slice, ...]

    @property
    def N(self) -> int:
        return len(self.subject_ids)

    @property
    def R(self) -> int:
        return len(self.markers)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def q(self) -> int:
        return int(self.Z.shape[1])

    @property
    def family_code(self) -> np.ndarray:
        return self._cache("family_code", lambda: _readonly(
            np.array([m.code for m in self.markers], dtype=np.int8)[self.marker_idx]))

    @property
    def ZZ(self) -> np.ndarray:
        return self._cache("ZZ", lambda: _readonly(self.Z[:, :, None] * self.Z[:, None, :]))

    @property
    def family_index(self) -> dict[int, np.ndarray]:
        def build():
            code = self.family_code
            return {c: np.flatnonzero(code == c) for c in (GAUSSIAN, POISSON, BERNOULLI)}
        return self._cache("family_index", build)

    @property
    def log_factorial_y(self) -> np.ndarray:
        return self._cache("lfy", lambda: _readonly(
            np.where(self.family_code == POISSON, gammaln(self.y + 1.0), 0.0)))

    @property
    def all_gaussian(self) -> bool:
        return all(m.family == "gaussian" for m in self.markers)

    @property
    def fixed_names(self) -> list[str]:
        return [f"{m.marker_id}:{c.label}" for m in self.markers for c in m.fixed_covariates]

    @property
    def random_names(self) -> list[str]:
        return [f"{m.marker_id}:{c.label}" for m in self.markers for c in m.random_covariates]

    def _cache(self, key, build):
        store = self.__dict__.setdefault("_memo", {})
        if key not in store:
            store[key] = build()
        return store[key]

    def subject_rows(self, i: int) -> slice:
        end = self.starts[i + 1] if i + 1 < self.N else self.n
        return slice(int(self.starts[i]), int(end))

    def summary(self) -> dict:
        per_marker = {}
        for r, m in enumerate(self.markers):
            c = self.counts[:, r] if self.N else np.zeros(0)
            per_marker[m.marker_id] = {
                "n": int(c.sum()),
                "min": int(c.min()) if c.size else 0,
                "median": float(np.median(c)) if c.size else 0.0,
                "max": int(c.max()) if c.size else 0,
            }
        return {"N": self.N, "n": self.n, "R": self.R, "q": self.q, "p": self.p,
                "per_marker": per_marker}

    def to_dataset(self) -> Dataset:
        sid = [self.subject_ids[i] for i in self.subj]
        mid = [self.markers[r].marker_id for r in self.marker_idx]
        return Dataset(list(self.markers), sid, mid, self.time.tolist(), self.y.tolist(),
                       dict(self.attributes))

    def subset(self, indices: Sequence[int], rename: Sequence[Any] | None = None) -> "ValidatedDataset":
        """Dataset restricted to (and ordered by) the given subject indices.

        Repeated indices are allowed when ``rename`` supplies distinct new ids.
        """
        indices = list(indices)
        ids = list(rename) if rename is not None else [self.subject_ids[i] for i in indices]
        if len(set(ids)) != len(ids):
            raise DatasetError("subset would produce duplicate subject ids")
        rows = [np.arange(self.subject_rows(i).start, self.subject_rows(i).stop) for i in indices]
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        new_subj = np.repeat(np.arange(len(indices)), [self.counts[i].sum() for i in indices])
        attrs = {new: self.attributes[self.subject_ids[old]]
                 for new, old in zip(ids, indices) if self.subject_ids[old] in self.attributes}
        return _assemble(self.markers, tuple(ids), new_subj.astype(np.intp),
                         self.marker_idx[rows], self.time[rows], self.y[rows], attrs)

    def with_values(self, y: np.ndarray) -> "ValidatedDataset":
        """Same design, different responses (used for replicate data)."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise DatasetError("replacement values have the wrong shape")
        return _assemble(self.markers, self.subject_ids, self.subj, self.marker_idx,
                         self.time, y.copy(), self.attributes)


def _assemble(markers, subject_ids, subj, marker_idx, time, y, attributes) -> ValidatedDataset:
    N, R, n = len(subject_ids), len(markers), len(y)
    p_sizes = [len(m.fixed_covariates) for m in markers]
    q_sizes = [len(m.random_covariates) for m in markers]
    p_off = np.concatenate([[0], np.cumsum(p_sizes)]).astype(int)
    q_off = np.concatenate([[0], np.cumsum(q_sizes)]).astype(int)
    fixed_slices = tuple(slice(p_off[r], p_off[r + 1]) for r in range(R))
    random_slices = tuple(slice(q_off[r], q_off[r + 1]) for r in range(R))
    X = np.zeros((n, int(p_off[-1])))
    Z = np.zeros((n, int(q_off[-1])))
    for r, m in enumerate(markers):
        rows = np.flatnonzero(marker_idx == r)
        if rows.size == 0:
            continue
        t = time[rows]
        for covs, mat, off in ((m.fixed_covariates, X, p_off[r]), (m.random_covariates, Z, q_off[r])):
            for j, cov in enumerate(covs):
                attr = None
                if cov.kind == "attribute":
                    try:
                        attr = np.array([attributes[subject_ids[s]][cov.attribute] for s in subj[rows]],
                                        dtype=float)
                    except KeyError as exc:
                        raise DatasetError(
                            f"marker {m.marker_id!r}: subject attribute {cov.attribute!r} missing"
                        ) from exc
                mat[rows, off + j] = cov.evaluate(t, attr)
    counts = np.zeros((N, R), dtype=np.int64)
    np.add.at(counts, (subj, marker_idx), 1)
    starts = np.concatenate([[0], np.cumsum(counts.sum(axis=1))[:-1]]).astype(np.intp) if N else np.zeros(0, np.intp)
    return ValidatedDataset(
        markers=tuple(markers),
        subject_ids=tuple(subject_ids),
        subj=_readonly(np.asarray(subj, dtype=np.intp)),
        marker_idx=_readonly(np.asarray(marker_idx, dtype=np.intp)),
        time=_readonly(np.asarray(time, dtype=float)),
        y=_readonly(np.asarray(y, dtype=float)),
        attributes=dict(attributes),
        X=_readonly(X),
        Z=_readonly(Z),
        counts=_readonly(counts),
        starts=_readonly(starts),
        fixed_slices=fixed_slices,
        random_slices=random_slices,
    )


def validate_dataset(raw: Dataset | ValidatedDataset) -> ValidatedDataset:
    """Check family domains and ids, sort by (subject, marker, time), build designs."""
    if isinstance(raw, ValidatedDataset):
        raw = raw.to_dataset()
    markers = tuple(raw.markers)
    ids = [m.marker_id for m in markers]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate marker ids in model declaration")
    marker_pos = {mid: r for r, mid in enumerate(ids)}
    sizes = {len(raw.subject), len(raw.marker), len(raw.time), len(raw.value)}
    if len(sizes) != 1:
        raise DatasetError("observation columns have different lengths")

    subject_order: dict[Any, int] = {}
    subj = np.empty(len(raw.subject), dtype=np.intp)
    midx = np.empty(len(raw.subject), dtype=np.intp)
    time = np.asarray(raw.time, dtype=float)
    value = np.asarray(raw.value, dtype=float)
    for j, (s, mk) in enumerate(zip(raw.subject, raw.marker)):
        subj[j] = subject_order.setdefault(s, len(subject_order))
        try:
            midx[j] = marker_pos[str(mk)]
        except KeyError:
            raise DatasetError(f"subject {s!r}: unknown marker {mk!r}") from None

    bad = np.flatnonzero(~np.isfinite(time) | ~np.isfinite(value))
    if bad.size:
        j = bad[0]
        raise DatasetError(
            f"subject {raw.subject[j]!r}, marker {raw.marker[j]!r}: non-finite time or value"
        )
    for r, m in enumerate(markers):
        v = value[midx == r]
        if m.family == "poisson":
            ok = (v >= 0) & (v == np.floor(v))
            what = "nonnegative integer"
        elif m.family == "bernoulli":
            ok = (v == 0) | (v == 1)
            what = "0/1"
        else:
            continue
        if not ok.all():
            j = np.flatnonzero(midx == r)[np.flatnonzero(~ok)[0]]
            raise DatasetError(
                f"subject {raw.subject[j]!r}, marker {m.marker_id!r}: value {value[j]!r} "
                f"outside {m.family} domain ({what})"
            )

    order = np.lexsort((time, midx, subj))
    subject_ids = tuple(subject_order)
    return _assemble(markers, subject_ids, subj[order], midx[order], time[order], value[order],
                     dict(raw.attributes))


def linear_predictor(x, z, alpha_r, b_ir) -> float:
    """eta = x'alpha_r + z'b_ir for a single observation."""
    x, z = np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(z, float))
    alpha_r, b_ir = np.atleast_1d(np.asarray(alpha_r, float)), np.atleast_1d(np.asarray(b_ir, float))
    if x.shape != alpha_r.shape or z.shape != b_ir.shape:
        raise ValueError(
            f"dimension mismatch: x{x.shape} vs alpha{alpha_r.shape}, z{z.shape} vs b{b_ir.shape}"
        )
    return float(x @ alpha_r + z @ b_ir)


def log_family_density(family: str, y, eta, phi=None):
    """log p(y | eta, phi) for one family; vectorised over y and eta."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family == "gaussian":
        if phi is None or not np.all(np.asarray(phi) > 0):
            raise ValueError("gaussian family needs a positive dispersion")
        out = -0.5 * (_LOG_2PI + np.log(phi)) - 0.5 * (y - eta) ** 2 / phi
    elif family == "poisson":
        with np.errstate(over="ignore"):
            out = y * eta - np.exp(eta) - gammaln(y + 1.0)
    elif family == "bernoulli":
        out = y * eta - np.logaddexp(0.0, eta)
    else:
        raise ValueError(f"unknown family {family!r}")
    return out if out.ndim else float(out)


def obs_loglik(ds: ValidatedDataset, y: np.ndarray, eta: np.ndarray, phi_obs: np.ndarray) -> np.ndarray:
    """Per-observation log-density; ``eta`` may carry trailing batch axes."""
    out = np.empty(eta.shape)
    idx = ds.family_index
    extra = (slice(None),) + (None,) * (eta.ndim - 1)
    g, pz, bz = idx[GAUSSIAN], idx[POISSON], idx[BERNOULLI]
    if g.size:
        ph = phi_obs[g][extra]
        out[g] = -0.5 * (_LOG_2PI + np.log(ph)) - 0.5 * (y[g][extra] - eta[g]) ** 2 / ph
    if pz.size:
        with np.errstate(over="ignore"):
            out[pz] = y[pz][extra] * eta[pz] - np.exp(eta[pz]) - ds.log_factorial_y[pz][extra]
    if bz.size:
        out[bz] = y[bz][extra] * eta[bz] - np.logaddexp(0.0, eta[bz])
    return out


def obs_score_weight(ds: ValidatedDataset, y: np.ndarray, eta: np.ndarray, phi_obs: np.ndarray):
    """First derivative of the log-density in eta and the negative second derivative."""
    score = np.empty(eta.shape)
    weight = np.empty(eta.shape)
    idx = ds.family_index
    extra = (slice(None),) + (None,) * (eta.ndim - 1)
    g, pz, bz = idx[GAUSSIAN], idx[POISSON], idx[BERNOULLI]
    if g.size:
        ph = phi_obs[g][extra]
        score[g] = (y[g][extra] - eta[g]) / ph
        weight[g] = np.broadcast_to(1.0 / ph, eta[g].shape)
    if pz.size:
        with np.errstate(over="ignore"):
            mu = np.exp(eta[pz])
        score[pz] = y[pz][extra] - mu
        weight[pz] = mu
    if bz.size:
        pr = expit(eta[bz])
        score[bz] = y[bz][extra] - pr
        weight[bz] = pr * (1.0 - pr)
    return score, weight


def inverse_link(family: str, eta):
    if family == "gaussian":
        return np.asarray(eta, float)
    if family == "poisson":
        return np.exp(eta)
    return expit(eta)


@dataclass
class GlmmParams:
    """Fixed effects (flat, blocked by ``ds.fixed_slices``) and per-marker dispersions.

    ``phi`` holds NaN for markers without a dispersion parameter.
    """

    alpha: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.phi = np.asarray(self.phi, dtype=float).reshape(-1)

    def check(self, markers: Sequence[MarkerSpec]):
        for r, m in enumerate(markers):
            if m.family == "gaussian" and not (self.phi[r] > 0):
                raise ValueError(f"marker {m.marker_id!r}: dispersion must be positive")

    def alpha_block(self, ds: ValidatedDataset, r: int) -> np.ndarray:
        return self.alpha[ds.fixed_slices[r]]

    def phi_obs(self, ds: ValidatedDataset) -> np.ndarray:
        return self.phi[ds.marker_idx]

    def copy(self) -> "GlmmParams":
        return GlmmParams(self.alpha.copy(), self.phi.copy())


def default_glmm_params(ds: ValidatedDataset) -> GlmmParams:
    phi = np.array([1.0 if m.family == "gaussian" else np.nan for m in ds.markers])
    return GlmmParams(np.zeros(ds.p), phi)


# --------------------------------------------------------------------------- IO


@dataclass
class ModelConfig:
    markers: list[MarkerSpec]
    prior: dict = field(default_factory=dict)
    mcmc: dict = field(default_factory=dict)
    time_unit: str = "months"

    def to_dict(self) -> dict:
        return {"markers": [m.to_dict() for m in self.markers], "prior": dict(self.prior),
                "mcmc": dict(self.mcmc), "time_unit": self.time_unit}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        if "markers" not in d or not d["markers"]:
            raise DatasetError("model config must list at least one marker")
        unit = d.get("time_unit", "months")
        if unit not in ("months", "days"):
            raise DatasetError(f"time unit must be months or days, not {unit!r}")
        return cls([MarkerSpec.from_dict(m) for m in d["markers"]], dict(d.get("prior", {})),
                   dict(d.get("mcmc", {})), unit)


def load_model_config(path) -> ModelConfig:
    with open(path) as fh:
        return ModelConfig.from_dict(json.load(fh))


def save_model_config(config: ModelConfig, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)


def _parse_subject(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def read_csv(path, markers: Sequence[MarkerSpec], time_unit: str = "months") -> Dataset:
    """Read long-format ``subject,marker,time,value`` CSV."""
    if time_unit not in ("months", "days"):
        raise DatasetError(f"time unit must be months or days, not {time_unit!r}")
    scale = 1.0 / DAYS_PER_MONTH if time_unit == "days" else 1.0
    subject, marker, time, value = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject", "marker", "time", "value"} - set(reader.fieldnames or ())
        if missing:
            raise DatasetError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                t, v = float(row["time"]), float(row["value"])
            except ValueError:
                raise DatasetError(f"{path}:{line}: time/value not numeric") from None
            subject.append(_parse_subject(row["subject"]))
            marker.append(row["marker"])
            time.append(t * scale)
            value.append(v)
    return Dataset(list(markers), subject, marker, time, value)


def write_csv(ds: Dataset | ValidatedDataset, path):
    if isinstance(ds, ValidatedDataset):
        ds = ds.to_dataset()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "marker", "time", "value"])
        for s, m, t, v in zip(ds.subject, ds.marker, ds.time, ds.value):
            vv = int(v) if float(v).is_integer() else repr(float(v))
            w.writerow([s, m, repr(float(t)), vv])
