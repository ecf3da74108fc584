"""On-disk formats for fitted chains and derived results.

A fit directory holds ``params.csv`` (one row per kept draw), ``allocprob.bin``
(allocation probabilities, N x K x M) and ``manifest.json``.  Floats are written
with ``repr`` so identical draws give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .priors import PriorSpec
from .sampler import ChainSample, McmcConfig

PROB_MAGIC = b"LMXP"
PROB_VERSION = 1
_HEADER = struct.Struct("<4sHIHI")  # magic, version, N, K, M: 16 bytes


def vech_pairs(q: int) -> list[tuple[int, int]]:
    """Lower-triangle index pairs in column-major (vech) order."""
    return [(i, j) for j in range(q) for i in range(j, q)]


def param_columns(chain: ChainSample) -> list[str]:
    rn = chain.names.get("random") or [f"b{j + 1}" for j in range(chain.q)]
    fn = chain.names.get("fixed") or [f"alpha{j + 1}" for j in range(chain.alpha.shape[1])]
    markers = chain.names.get("markers") or [f"m{r + 1}" for r in range(chain.phi.shape[1])]
    cols = []
    for k in range(1, chain.K + 1):
        cols.append(f"w[{k}]")
        cols += [f"mu[{k}][{nm}]" for nm in rn]
        cols += [f"D[{k}][{rn[i]};{rn[j]}]" for i, j in vech_pairs(chain.q)]
    cols += [f"alpha[{nm}]" for nm in fn]
    cols += [f"phi[{markers[r]}]" for r in _gaussian_markers(chain)]
    cols += [f"xi[{nm}]" for nm in rn]
    return cols


def _gaussian_markers(chain: ChainSample) -> list[int]:
    return [r for r in range(chain.phi.shape[1]) if np.all(np.isfinite(chain.phi[:, r]))]


def param_matrix(chain: ChainSample) -> np.ndarray:
    il = np.array(vech_pairs(chain.q)).T
    blocks = []
    for k in range(chain.K):
        blocks += [chain.w[:, [k]], chain.mu[:, k], chain.D[:, k][:, il[0], il[1]]]
    blocks += [chain.alpha, chain.phi[:, _gaussian_markers(chain)], chain.xi]
    return np.hstack(blocks)


def write_params_csv(path, chain: ChainSample):
    mat = param_matrix(chain)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(param_columns(chain)) + "\n")
        for row in mat:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def write_prob_tensor(path, probs_nkm: np.ndarray):
    """Write an N x K x M tensor with the 16-byte header."""
    P = np.ascontiguousarray(probs_nkm, dtype="<f8")
    N, K, M = P.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PROB_MAGIC, PROB_VERSION, N, K, M))
        fh.write(P.tobytes(order="C"))


def read_prob_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, N, K, M = _HEADER.unpack(head)
        if magic != PROB_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != PROB_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != N * K * M:
        raise ValueError(f"{path}: expected {N * K * M} values, found {data.size}")
    return data.reshape(N, K, M).astype(float)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_chain(chain: ChainSample, outdir, *, data_path=None, model=None, extra=None):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_params_csv(out / "params.csv", chain)
    write_prob_tensor(out / "allocprob.bin", np.moveaxis(chain.allocprob, 0, 2))
    manifest = {
        "format": 1,
        "K": chain.K,
        "N": chain.N,
        "draws": chain.M,
        "seed": chain.config.seed if chain.config else None,
        "config": chain.config.to_dict() if chain.config else {},
        "prior": chain.prior.to_dict() if chain.prior else {},
        "acceptance": chain.acceptance,
        "adaptation": [{"random_effects": a, "alpha": b} for a, b in chain.adapt_trace],
        "names": chain.names,
        "relabelled": chain.perms is not None,
    }
    if data_path is not None:
        manifest["data"] = {"path": str(Path(data_path).resolve()), "sha256": sha256_file(data_path)}
    if model is not None:
        manifest["model"] = model
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)
    return out


def read_manifest(fitdir) -> dict:
    with open(Path(fitdir) / "manifest.json") as fh:
        return json.load(fh)


def read_chain(fitdir) -> ChainSample:
    """Rebuild the stored draws of a fit directory (allocations and b are not stored)."""
    fitdir = Path(fitdir)
    man = read_manifest(fitdir)
    K = int(man["K"])
    names = man.get("names", {})
    rn, fn, markers = names.get("random", []), names.get("fixed", []), names.get("markers", [])
    q, p = len(rn), len(fn)
    with open(fitdir / "params.csv") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        mat = np.array([[float(x) for x in row] for row in rd], dtype=float).reshape(-1, len(header))
    M = mat.shape[0]
    col = {c: j for j, c in enumerate(header)}
    w = np.empty((M, K))
    mu = np.empty((M, K, q))
    D = np.empty((M, K, q, q))
    for k in range(K):
        w[:, k] = mat[:, col[f"w[{k + 1}]"]]
        for j, nm in enumerate(rn):
            mu[:, k, j] = mat[:, col[f"mu[{k + 1}][{nm}]"]]
        for i, j in vech_pairs(q):
            D[:, k, i, j] = D[:, k, j, i] = mat[:, col[f"D[{k + 1}][{rn[i]};{rn[j]}]"]]
    alpha = np.column_stack([mat[:, col[f"alpha[{nm}]"]] for nm in fn]) if p else np.zeros((M, 0))
    phi = np.full((M, len(markers)), np.nan)
    for r, nm in enumerate(markers):
        if f"phi[{nm}]" in col:
            phi[:, r] = mat[:, col[f"phi[{nm}]"]]
    xi = np.column_stack([mat[:, col[f"xi[{nm}]"]] for nm in rn])
    P = read_prob_tensor(fitdir / "allocprob.bin")
    cfg = man.get("config") or {}
    return ChainSample(
        K=K, w=w, mu=mu, D=D, alpha=alpha, phi=phi, xi=xi, allocprob=np.moveaxis(P, 2, 0),
        acceptance=man.get("acceptance", {}),
        config=McmcConfig(**cfg) if cfg else None,
        prior=PriorSpec.from_dict(man["prior"]) if man.get("prior") else None,
        names=names,
    )
