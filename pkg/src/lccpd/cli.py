"""Command-line interface: ``lccpd {simulate,fit,evaluate,train-classes,baseline}``.

Exit codes: 0 success (converged), 1 published-target check failed, 2 validation
error, 3 EM hit the iteration cap, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .em import FitResult, fit_region
from .io import (
    TEXT_MAGIC,
    BINARY_MAGIC,
    RegionDataset,
    RunConfig,
    SchemaError,
    coerce_config_value,
    file_digest,
    load_dataset,
    load_library,
    load_references,
    read_config_file,
    read_truth,
    save_dataset,
    save_library,
    write_truth,
)
from .metrics import BASELINE_CAVEAT, PUBLISHED_ACCURACY, concordance, summarize_batch, threshold_baseline
from .model import ChangeConfig, estimate_class_params
from .simulate import (
    MISSING_GRID,
    RNG_ALGORITHM,
    ExemplarPool,
    GenerativeSource,
    SimSpec,
    demo_library,
    make_replication,
)

log = logging.getLogger("lccpd")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _versions() -> dict:
    return {"lccpd": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header_comments: dict, columns: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in header_comments.items():
            fh.write(f"# {k}={v}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def _read_csv(path: Path) -> tuple[dict, list[dict]]:
    lines = path.read_text().splitlines()
    comments = {}
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            comments[key.strip()] = value.strip()
        else:
            body.append(line)
    return comments, list(csv.DictReader(body))


# ---- config handling ------------------------------------------------------------------------

_HYPER_FLAGS = ("pi0", "piR", "kappa0", "kappac", "epsilon", "K", "whiten", "dirichlet", "jitter", "max_iters", "threads", "seed")


def _add_hyper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--pi0", type=str, help="prior probability of change (default 1e-10)")
    p.add_argument("--piR", type=str, help="prior probability of recovery given change (default 0.01)")
    p.add_argument("--kappa0", type=str, help="background variance scale (default 5e4)")
    p.add_argument("--kappac", type=str, help="change-class variance scale (default 5e4)")
    p.add_argument("--epsilon", type=str, help="convergence threshold on |dQ| per pixel (default 1e-6)")
    p.add_argument("--K", type=str, help="spectral compression rank, or 'off' (default off)")
    p.add_argument("--whiten", type=str, help="use lambda^-1/2 instead of lambda^-1 in compression")
    p.add_argument("--dirichlet", type=str, help="comma-separated Dirichlet weights, one per change class")
    p.add_argument("--jitter", type=str, help="relative diagonal jitter before factorizing (default 1e-8)")
    p.add_argument("--max-iters", dest="max_iters", type=str, help="EM iteration cap (default 200)")
    p.add_argument("--threads", type=str, help="worker threads (default 1)")
    p.add_argument("--seed", type=str, help="random seed")


def build_config(args: argparse.Namespace, **paths) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in _HYPER_FLAGS:
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = coerce_config_value(key, raw)
    for key, value in paths.items():
        if value is not None:
            values[key] = str(value)
    return RunConfig(**values).validate()


# ---- simulate ------------------------------------------------------------------------------


def run_simulate(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.pool:
        source = ExemplarPool.load(args.pool)
        library_note = {"source": "exemplar", "pool": str(args.pool), "pool_digest": file_digest(args.pool)}
    else:
        if args.library:
            library = load_library(args.library)
        else:
            library = demo_library(args.B, args.T, args.n_classes, seed=args.seed, separation=args.separation)
            save_library(library, out / "library.json")
        source = GenerativeSource(library, RunConfig(kappa0=args.kappa0, kappac=args.kappac).hyperparams())
        library_note = {"source": "generative", "library": str(args.library) if args.library else "library.json"}
    levels = args.missing if args.missing is not None else list(MISSING_GRID)
    batches = []
    for level in levels:
        spec = SimSpec(
            J=args.J, n_change=args.n_change, n_nochange=args.n_nochange, replications=args.replications,
            min_missing_fraction=level, seed=args.seed, piR_sim=args.piR_sim, missing_mode=args.missing_mode,
        )
        bdir = out / f"missing-{round(level * 100):02d}"
        bdir.mkdir(exist_ok=True)
        for r in range(spec.replications):
            labeled = make_replication(spec, source, r)
            ds = RegionDataset.from_pixels([lp.series for lp in labeled], scale=1.0)
            save_dataset(ds, bdir / f"rep-{r:03d}.{args.format}")
            write_truth(bdir / f"rep-{r:03d}.truth.jsonl", labeled)
        batches.append({"dir": bdir.name, "min_missing_fraction": level})
        log.info("wrote %d replications to %s", spec.replications, bdir)
    meta = {
        "command": "simulate",
        "seed": args.seed,
        "rng": RNG_ALGORITHM,
        "J": args.J,
        "n_change": args.n_change,
        "n_nochange": args.n_nochange,
        "replications": args.replications,
        "piR_sim": args.piR_sim,
        "missing_mode": args.missing_mode,
        "batches": batches,
        "kappa0": args.kappa0,
        "kappac": args.kappac,
        **library_note,
        "versions": _versions(),
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return EXIT_OK


# ---- fit ---------------------------------------------------------------------------------------


def _dataset_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(path)
    found = []
    for p in sorted(path.iterdir()):
        if p.suffix.lower() == ".lcb":
            with open(p, "rb") as fh:
                if fh.read(len(BINARY_MAGIC)) == BINARY_MAGIC:
                    found.append(p)
        elif p.suffix.lower() == ".csv":
            with open(p) as fh:
                if fh.readline().strip() == f"# {TEXT_MAGIC}":
                    found.append(p)
    if not found:
        raise FileNotFoundError(f"no datasets in {path}")
    return found


def write_fit_outputs(fit: FitResult, ds: RegionDataset, out: Path, stem: str, config_hash: str, meta: dict) -> None:
    tag = {"config_hash": config_hash}
    pos = ds.positions
    idx = {pid: k for k, pid in enumerate(ds.pixel_ids)}

    def loc(pid):
        r, c = pos[idx[pid]]
        return ["" if r < 0 else int(r), "" if c < 0 else int(c)]

    ids = fit.pixel_ids
    modal = fit.modal_class
    _write_csv(out / f"{stem}.rho.csv", tag | {"J": fit.J}, ["pixel_id", "row", "col", "rho1", "rho2"],
               [[pid, *loc(pid), int(fit.rho[k, 0]), int(fit.rho[k, 1])] for k, pid in enumerate(ids)])
    _write_csv(out / f"{stem}.nochange.csv", tag, ["pixel_id", "row", "col", "no_change_prob"],
               [[pid, *loc(pid), _fmt(fit.no_change_prob[k])] for k, pid in enumerate(ids)])
    _write_csv(out / f"{stem}.modal.csv", tag, ["pixel_id", "row", "col", "modal_change_class", "map_class"],
               [[pid, *loc(pid), int(modal[k]),
                 int(modal[k]) if fit.rho[k, 0] < fit.J else fit.background_id] for k, pid in enumerate(ids)])
    _write_csv(out / f"{stem}.posteriors.csv", tag, ["pixel_id"] + [f"class_{c}" for c in fit.class_ids],
               [[pid] + [_fmt(x) for x in fit.posteriors[k]] for k, pid in enumerate(ids)])
    summary = {
        "config_hash": config_hash,
        "J": fit.J,
        "class_ids": fit.class_ids,
        "background_id": fit.background_id,
        "alpha": {str(c): float(a) for c, a in zip(fit.class_ids, fit.alpha)},
        "q_trace": [float(q) for q in fit.q_trace],
        "q_start": [float(q) for q in fit.q_start],
        "iterations": fit.iterations,
        "converged": fit.converged,
        "compression": fit.compression,
    }
    (out / f"{stem}.fit.json").write_text(json.dumps(summary, indent=1))
    (out / f"{stem}.meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def run_fit(args) -> int:
    cfg = build_config(args, library=args.library, dataset=args.dataset, output=args.output)
    library = load_library(cfg.library)
    h = cfg.hyperparams()
    config_hash = cfg.model_hash(file_digest(cfg.library))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for path in _dataset_files(Path(cfg.dataset)):
        ds = load_dataset(path)
        if args.mask_whole_time_points:
            ds = ds.mask_whole_time_points()
        start = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            fit = fit_region(ds.pixels(), library, h, max_iter=cfg.max_iters, threads=cfg.threads)
        wall = time.perf_counter() - start
        notes = [str(w.message) for w in caught]
        for note in notes:
            if fit.converged or "without converging" not in note:
                log.warning("%s: %s", path.name, note)
        meta = {
            "command": "fit",
            "dataset": str(path),
            "config": cfg.as_dict(),
            "config_hash": config_hash,
            "mask_whole_time_points": args.mask_whole_time_points,
            "seed": cfg.seed,
            "rng": RNG_ALGORITHM,
            "versions": _versions(),
            "wall_time_s": wall,
            "compression": fit.compression,
            "warnings": notes,
        }
        write_fit_outputs(fit, ds, out, path.stem, config_hash, meta)
        log.info("%s: %d pixels, %d iterations, converged=%s", path.name, ds.N, fit.iterations, fit.converged)
        if not fit.converged:
            log.warning("%s: EM hit the iteration cap (%d)", path.name, cfg.max_iters)
            status = EXIT_NOT_CONVERGED
    return status


# ---- baseline ---------------------------------------------------------------------------------


def run_baseline(args) -> int:
    cfg = build_config(args, library=args.library, dataset=args.dataset, output=args.output)
    library = load_library(cfg.library)
    h = cfg.hyperparams()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"baseline-q{args.quantile}-{cfg.model_hash(file_digest(cfg.library))}"
    for path in _dataset_files(Path(cfg.dataset)):
        ds = load_dataset(path)
        rows = []
        for k, pixel in enumerate(ds.pixels()):
            rho = threshold_baseline(pixel, library, args.quantile, h)
            r, c = ds.positions[k]
            rows.append([pixel.pixel_id, "" if r < 0 else r, "" if c < 0 else c, rho.rho1, rho.rho2])
        _write_csv(out / f"{path.stem}.rho.csv", {"config_hash": tag, "J": ds.J, "caveat": BASELINE_CAVEAT},
                   ["pixel_id", "row", "col", "rho1", "rho2"], rows)
    return EXIT_OK


# ---- evaluate ---------------------------------------------------------------------------------


def _read_rho(path: Path):
    comments, rows = _read_csv(path)
    configs = {row["pixel_id"]: ChangeConfig(int(row["rho1"]), int(row["rho2"])) for row in rows}
    return comments, configs


def run_evaluate(args) -> int:
    fits = Path(args.fits)
    rho_files = sorted(fits.glob("*.rho.csv")) if fits.is_dir() else [fits]
    if not rho_files or not all(p.exists() for p in rho_files):
        raise FileNotFoundError(f"no *.rho.csv fit outputs at {fits}")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    estimates, hashes, Js = [], set(), set()
    for p in rho_files:
        comments, configs = _read_rho(p)
        hashes.add(comments.get("config_hash", ""))
        Js.add(int(comments.get("J", 0)))
        estimates.append((p.name[: -len(".rho.csv")], configs))
    if len(Js) != 1 or 0 in Js:
        raise SchemaError(f"fit outputs disagree on J or lack it: {sorted(Js)}")
    J = Js.pop()
    if not args.force:
        if len(hashes) > 1:
            raise SchemaError(f"fit outputs come from different configurations {sorted(hashes)}; use --force")
        if args.expect_hash and hashes != {args.expect_hash}:
            raise SchemaError(f"config hash {sorted(hashes)} does not match expected {args.expect_hash}; use --force")
    report = {"config_hashes": sorted(hashes), "J": J, "n_replications": len(estimates)}
    if any(h.startswith("baseline") for h in hashes):
        report["caveat"] = BASELINE_CAVEAT
    status = EXIT_OK

    if args.truth:
        truth_path = Path(args.truth)
        truths = []
        for stem, _ in estimates:
            tp = truth_path / f"{stem}.truth.jsonl" if truth_path.is_dir() else truth_path
            if not tp.exists():
                raise FileNotFoundError(tp)
            truths.append(read_truth(tp))
        summary = summarize_batch([e for _, e in estimates], truths, J)
        rows = [[s, row["n_pixels"], _fmt(row["producer"]), _fmt(row["user"]), _fmt(row["overall"])]
                for (s, _), row in zip(estimates, summary.replications)]
        rows.append(["mean", "", _fmt(summary.mean["producer"]), _fmt(summary.mean["user"]), _fmt(summary.mean["overall"])])
        _write_csv(out / "summary.csv", {"config_hash": ",".join(sorted(hashes))},
                   ["replication", "n_pixels", "producer", "user", "overall"], rows)
        (out / "quantiles.json").write_text(json.dumps(summary.quantiles, indent=1))
        report["mean"] = summary.mean
        report["quantiles"] = summary.quantiles
        if args.published_level is not None:
            target = PUBLISHED_ACCURACY.get(round(args.published_level, 2))
            if target is None:
                raise SchemaError(f"no published target for missing level {args.published_level}; choose from {sorted(PUBLISHED_ACCURACY)}")
            diff = summary.mean["overall"] - target
            ok = abs(diff) <= args.published_tol
            report["published_check"] = {"level": args.published_level, "target": target, "observed": summary.mean["overall"],
                                     "tolerance": args.published_tol, "passed": ok}
            print(f"published check at {args.published_level:.0%} missing: observed {summary.mean['overall']:.3f} "
                  f"vs target {target:.3f} (tol {args.published_tol}) -> {'PASS' if ok else 'FAIL'}")
            if not ok:
                status = EXIT_CHECK_FAILED

    if args.reference:
        refs = load_references(args.reference)
        rows, values = [], []
        for stem, configs in estimates:
            for pid, rho in configs.items():
                if pid not in refs:
                    raise SchemaError(f"no reference fractions for pixel {pid}")
                c = concordance(rho, refs[pid], J)
                values.append(c)
                rows.append([pid, _fmt(c)])
        _write_csv(out / "concordance.csv", {"config_hash": ",".join(sorted(hashes))}, ["pixel_id", "concordance"], rows)
        report["concordance_mean"] = float(np.mean(values))

    if not args.truth and not args.reference:
        raise SchemaError("evaluate needs --truth and/or --reference")
    (out / "summary.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return status


# ---- train-classes ----------------------------------------------------------------------------


def run_train(args) -> int:
    samples = {}
    with np.load(args.samples) as data:
        for key in data.files:
            if not key.startswith("class_"):
                raise SchemaError(f"{args.samples}: array {key!r} is not named class_<id>")
            samples[int(key[len("class_"):])] = data[key]
    labels = {}
    for item in (args.labels or "").split(","):
        if item.strip():
            cid, _, label = item.partition("=")
            labels[int(cid)] = label.strip()
    library = estimate_class_params(samples, args.background_id, labels)
    save_library(library, args.output)
    return EXIT_OK


# ---- entry point ------------------------------------------------------------------------------


def _fraction_list(text: str) -> list[float]:
    vals = [float(x) for x in text.split(",") if x.strip()]
    return [v / 100.0 if v > 1 else v for v in vals]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lccpd", description="Bayesian land-cover change point detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate simulated batches with truth sidecars")
    p.add_argument("--output", required=True)
    p.add_argument("--library", help="class library JSON (default: a synthetic demo library)")
    p.add_argument("--pool", help="exemplar pool .npz (background, change, change_class)")
    p.add_argument("--J", type=int, default=11)
    p.add_argument("--B", type=int, default=7, help="bands of the demo library")
    p.add_argument("--T", type=int, default=19, help="time points of the demo library")
    p.add_argument("--n-classes", type=int, default=2, help="change classes of the demo library")
    p.add_argument("--separation", type=float, default=2.0, help="demo class separation in per-cell sd units")
    p.add_argument("--n-change", type=int, default=60)
    p.add_argument("--n-nochange", type=int, default=60)
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--missing", type=_fraction_list, help="comma-separated minimum missing fractions (default 0.2,0.3,0.4,0.5)")
    p.add_argument("--missing-mode", choices=["uniform", "clustered"], default="uniform")
    p.add_argument("--piR-sim", type=float, default=0.5)
    p.add_argument("--kappa0", type=float, default=5e4)
    p.add_argument("--kappac", type=float, default=5e4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "lcb"], default="csv")
    p.set_defaults(func=run_simulate)

    p = sub.add_parser("fit", help="estimate change configurations")
    p.add_argument("--library")
    p.add_argument("--dataset", help="dataset file or a directory of datasets")
    p.add_argument("--output")
    p.add_argument("--mask-whole-time-points", action="store_true",
                   help="treat a time point missing in any band as missing in all bands")
    _add_hyper_flags(p)
    p.set_defaults(func=run_fit)

    p = sub.add_parser("evaluate", help="accuracy and concordance reports")
    p.add_argument("--fits", required=True, help="directory of *.rho.csv outputs or a single file")
    p.add_argument("--truth", help="truth JSON-lines file or directory of <stem>.truth.jsonl")
    p.add_argument("--reference", help="reference fractions CSV")
    p.add_argument("--output", required=True)
    p.add_argument("--published-level", type=float, help="compare the batch mean with the published value at this missing level")
    p.add_argument("--published-tol", type=float, default=0.05)
    p.add_argument("--expect-hash")
    p.add_argument("--force", action="store_true", help="accept mismatched configuration hashes")
    p.set_defaults(func=run_evaluate)

    p = sub.add_parser("train-classes", help="estimate a class library from complete training samples")
    p.add_argument("--samples", required=True, help=".npz with arrays class_<id> of shape (n, B, T)")
    p.add_argument("--background-id", type=int, required=True)
    p.add_argument("--labels", help="comma-separated id=label pairs")
    p.add_argument("--output", required=True)
    p.set_defaults(func=run_train)

    p = sub.add_parser("baseline", help="threshold baseline stub (not a published method)")
    p.add_argument("--library")
    p.add_argument("--dataset")
    p.add_argument("--output")
    p.add_argument("--quantile", type=float, default=0.05)
    _add_hyper_flags(p)
    p.set_defaults(func=run_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in ("fit", "baseline"):
            missing = [k for k in ("library", "dataset", "output") if getattr(args, k) is None]
            if missing and not args.config:
                raise ValueError(f"missing required options: {', '.join('--' + m for m in missing)}")
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"lccpd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SchemaError, ValueError, KeyError, TypeError) as exc:
        print(f"lccpd: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"lccpd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
