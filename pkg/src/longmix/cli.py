"""Command-line interface: ``longmix fit|classify|ped|simulate|summary``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.  Failures print a
JSON object with ``error``, ``message`` and ``exit_code`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .io import read_chain, read_manifest, read_prob_tensor, write_chain, write_json, write_prob_tensor
from .model import DatasetError, ModelConfig, load_model_config, read_csv, save_model_config, validate_dataset, write_csv
from .ped import ped, select_K, write_ped_csv
from .postprocess import (
    classify,
    classify_thresholded,
    marginal_mean_curves,
    posterior_component_probs,
    stephens_relabel,
    summarize,
)
from .priors import default_hyperparameters
from .sampler import McmcConfig, SamplerError, crude_random_effects, run_chain
from .simulate import PRESETS, preset, simulate_dataset, write_truth

log = logging.getLogger("longmix")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
_MCMC_FLAGS = ("keep", "thin", "burnin")


def max_threads() -> int:
    env = os.environ.get("LONGMIX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DatasetError(f"LONGMIX_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _threads(args) -> int:
    cap = max_threads()
    return max(1, min(args.threads or cap, cap))


def _parse_k_range(text: str) -> list[int]:
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            ks = list(range(int(a), int(b) + 1))
        else:
            ks = [int(x) for x in text.split(",")]
    except ValueError:
        raise DatasetError(f"cannot parse K range {text!r}") from None
    if not ks or min(ks) < 1:
        raise DatasetError("K values must be positive")
    return ks


def _load_data(data_path, model: ModelConfig):
    return validate_dataset(read_csv(data_path, model.markers, model.time_unit))


def _mcmc_config(args, model: ModelConfig, seed: int, threads: int) -> McmcConfig:
    opts = dict(model.mcmc)
    for name in _MCMC_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            opts[name] = val
    opts["seed"] = seed
    opts["threads"] = threads
    if getattr(args, "prob_backend", None):
        opts["prob_backend"] = args.prob_backend
    known = set(McmcConfig.__dataclass_fields__)
    unknown = set(opts) - known
    if unknown:
        raise DatasetError(f"unknown mcmc settings: {sorted(unknown)}")
    return McmcConfig(**opts)


def _fit_chain(ds, K, model, config):
    crude = crude_random_effects(ds, threads=config.threads)
    prior = default_hyperparameters(ds, K, crude.effects).with_overrides(model.prior)
    chain = run_chain(ds, K, prior, config)
    perms, info = stephens_relabel(np.moveaxis(chain.allocprob, 0, 2), return_info=True)
    return chain.permuted(perms), info


def chain_seed(seed: int, K: int, replicate: int) -> int:
    """Independent integer seed for chain ``replicate`` of the K-component fit."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(K), int(replicate)))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ------------------------------------------------------------------ commands


def cmd_fit(args) -> int:
    model = load_model_config(args.model)
    ds = _load_data(args.data, model)
    if args.K > ds.N:
        raise DatasetError(f"K={args.K} exceeds the number of subjects N={ds.N}")
    config = _mcmc_config(args, model, args.seed, _threads(args))
    chain, info = _fit_chain(ds, args.K, model, config)
    write_chain(chain, args.out, data_path=args.data, model=model.to_dict(),
                extra={"relabel": info, "command": "fit", "version": __version__})
    print(json.dumps({"out": str(args.out), "K": args.K, "draws": chain.M, "acceptance": chain.acceptance}))
    return EXIT_OK


def _fit_context(fitdir):
    man = read_manifest(fitdir)
    if "data" not in man or "model" not in man:
        raise DatasetError(f"{fitdir}: manifest lacks the data/model needed to rebuild the dataset")
    model = ModelConfig.from_dict(man["model"])
    ds = _load_data(man["data"]["path"], model)
    return man, model, ds


def _component_probs(fitdir, chain, ds, man, threads):
    backend = (man.get("config") or {}).get("prob_backend", "marginal")
    cache = Path(fitdir) / "compprob.bin"
    if backend == "marginal" and cache.exists():
        p_draws = read_prob_tensor(cache)
        if p_draws.shape == (ds.N, chain.K, chain.M):
            return p_draws.mean(axis=2), p_draws
    pi_hat, p_draws = posterior_component_probs(chain, ds, backend, threads=threads)
    if backend == "marginal":
        write_prob_tensor(cache, p_draws)
    return pi_hat, p_draws


def cmd_classify(args) -> int:
    chain = read_chain(args.fit)
    man, model, ds = _fit_context(args.fit)
    pi_hat, p_draws = _component_probs(args.fit, chain, ds, man, _threads(args))
    g, tie = classify(pi_hat)
    thr, lo, hi = classify_thresholded(p_draws, args.level, args.threshold)
    out = Path(args.out) if args.out else Path(args.fit) / "classification.csv"
    K = chain.K
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["subject"] + [f"pi_{k + 1}" for k in range(K)]
                    + [f"hpd_lo_{k + 1}" for k in range(K)] + [f"hpd_hi_{k + 1}" for k in range(K)]
                    + ["assignment", "deferred", "tie"])
        for i, sid in enumerate(ds.subject_ids):
            deferred = bool(args.defer and thr[i] < 0)
            label = "" if deferred else str((thr[i] if args.defer else g[i]) + 1)
            wr.writerow([sid] + [repr(float(x)) for x in pi_hat[i]] + [repr(float(x)) for x in lo[i]]
                        + [repr(float(x)) for x in hi[i]] + [label, int(deferred), int(tie[i])])
    counts = {str(k + 1): int(np.sum((thr if args.defer else g) == k)) for k in range(K)}
    if args.defer:
        counts["deferred"] = int(np.sum(thr < 0))
    print(json.dumps({"out": str(out), "counts": counts}))
    return EXIT_OK


def cmd_ped(args) -> int:
    model = load_model_config(args.model)
    ds = _load_data(args.data, model)
    ks = _parse_k_range(args.K_range)
    if max(ks) > ds.N:
        raise DatasetError(f"K={max(ks)} exceeds the number of subjects N={ds.N}")
    threads = _threads(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, chains_info = [], {}
    for K in ks:
        configs = [_mcmc_config(args, model, chain_seed(args.seed, K, c), 1) for c in range(2)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=2) as pool:
                pair = list(pool.map(lambda cfg: _fit_chain(ds, K, model, cfg)[0], configs))
        else:
            pair = [_fit_chain(ds, K, model, cfg)[0] for cfg in configs]
        rec = ped(pair[0], pair[1], ds, pairs=args.pairs, seed=args.seed, threads=threads)
        records.append(rec)
        chains_info[str(K)] = {"seeds": [c.seed for c in configs], "acceptance": [c.acceptance for c in pair]}
        log.info("K=%d: PED=%.1f", K, rec.ped)
    best, table = select_K(records)
    write_ped_csv(out / "ped.csv", records)
    write_json(out / "manifest.json", {
        "command": "ped", "version": __version__, "seed": args.seed, "K_range": ks, "pairs": args.pairs,
        "mcmc": _mcmc_config(args, model, args.seed, 1).to_dict(), "model": model.to_dict(),
        "data": {"path": str(Path(args.data).resolve())}, "chains": chains_info, "selected_K": best,
    })
    print(json.dumps({"out": str(out / "ped.csv"), "selected_K": best,
                      "ped": {r.K: r.ped for r in table}}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    sizes = None
    if args.sizes:
        try:
            sizes = tuple(int(s) for s in args.sizes.split(","))
        except ValueError:
            raise DatasetError(f"cannot parse sizes {args.sizes!r}") from None
    setting = preset(args.setting, sizes=sizes, seed=args.seed, share_times=args.share_times)
    ds, alloc, b = simulate_dataset(setting, return_effects=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out / "data.csv")
    write_truth(out / "truth.csv", ds, alloc, b)
    save_model_config(ModelConfig(list(setting.markers)), out / "model.json")
    print(json.dumps({"out": str(out), "N": ds.N, "n": ds.n}))
    return EXIT_OK


def cmd_summary(args) -> int:
    chain = read_chain(args.fit)
    man, model, ds = _fit_context(args.fit)
    out = Path(args.fit)
    summ = summarize(chain, args.level)
    write_json(out / "summary.json", summ)
    grid = np.linspace(0.0, float(ds.time.max()) if ds.n else 1.0, args.grid_points)
    curves = marginal_mean_curves(chain, ds, grid)
    with open(out / "curves.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["marker", "cluster", "time", "mean"])
        for marker, arr in curves.items():
            for k in range(arr.shape[0]):
                for t, v in zip(grid, arr[k]):
                    wr.writerow([marker, k + 1, repr(float(t)), repr(float(v))])
    print(json.dumps({"summary": str(out / "summary.json"), "curves": str(out / "curves.csv")}))
    return EXIT_OK


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    """Argument errors are raised so they reach the JSON error report."""

    def error(self, message):
        raise DatasetError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="longmix", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def mcmc_flags(p):
        p.add_argument("--keep", type=int, default=None)
        p.add_argument("--thin", type=int, default=None)
        p.add_argument("--burnin", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("fit", help="run one chain for a fixed K")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--prob-backend", choices=("marginal", "augmented"), default=None)
    mcmc_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", help="cluster probabilities and assignments from a fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--defer", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("ped", help="penalized expected deviance over a range of K")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--K-range", dest="K_range", default="1..4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=None, help="number of cross-chain draw pairs for the optimism")
    mcmc_flags(p)
    p.set_defaults(func=cmd_ped)

    p = sub.add_parser("simulate", help="generate a simulated dataset")
    p.add_argument("--setting", choices=PRESETS, required=True)
    p.add_argument("--sizes", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--share-times", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("summary", help="posterior summaries and mean curves of a fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--grid-points", type=int, default=50)
    p.set_defaults(func=cmd_summary)
    return ap


def _fail(exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, SamplerError):
        err.update(sweep=exc.sweep, block=exc.block)
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and --version
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    except DatasetError as exc:
        return _fail(exc, EXIT_INPUT)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SamplerError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (DatasetError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        return _fail(exc, EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
