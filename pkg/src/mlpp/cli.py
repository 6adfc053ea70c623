"""Command line front end.

Four subcommands cover the full workflow: `simulate` writes replicate
datasets with planted truth, `fit` smooths, decomposes and samples,
`diagnose` checks the archived chains, and `summarize` reports the
partition estimates.  Every output directory gets a meta.json recording
versions, seeds, flags and input hashes.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from .diagnostics import (diagnose_archives, export_density, export_trace,
                          format_diagnostics_table, write_diagnostics_csv)
from .fpca import (fit_fpca, read_dataset_csv, smooth_dataset, write_basis,
                   write_dataset_csv, write_time_grid_csv)
from .hyperparams import (apply_scenario, estimate_hyperparams,
                          load_hyperparams, save_hyperparams, SCENARIOS)
from .partitions import (format_partition_table, partition_draws,
                         similarity_matrix, summarize_dimension,
                         write_partition_report, write_similarity_csv)
from .sampler import SamplerConfig, load_archives, run_chains, save_archives
from .simgen import SimDesign, read_truth_json, simulate, write_truth_json

PACKAGE_VERSION = "0.1.0"


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _manifest(args: argparse.Namespace, inputs: dict | None = None) -> dict:
    doc = {
        "command": args.command,
        "flags": {key: val for key, val in sorted(vars(args).items())
                  if key not in ("func", "command")},
        "versions": {"mlpp": PACKAGE_VERSION, "numpy": np.__version__,
                     "scipy": scipy.__version__,
                     "python": sys.version.split()[0]},
    }
    if inputs:
        doc["inputs"] = {name: {"path": str(path), "sha256": _sha256(path)}
                         for name, path in inputs.items()}
    return doc


def _prepare_out(parser: argparse.ArgumentParser, out, force: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        parser.error(f"output directory {path} is not empty (use --force to reuse)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_simulate(parser, args) -> int:
    out = _prepare_out(parser, args.out, args.force)
    rep_dirs = []
    for rep in range(1, args.replicates + 1):
        design = SimDesign(n_subjects=args.subjects, n_channels=args.channels,
                           n_timepoints=args.timepoints,
                           n_group_a=args.subjects // 2, snr=args.snr,
                           seed=args.seed + rep - 1)
        data, truth = simulate(design)
        rep_dir = out / f"rep_{rep:02d}"
        rep_dir.mkdir(exist_ok=True)
        write_dataset_csv(data, rep_dir / "data.csv")
        write_time_grid_csv(data.time_grid, rep_dir / "time_grid.csv")
        write_truth_json(truth, rep_dir / "truth.json")
        rep_dirs.append(rep_dir.name)
    doc = _manifest(args)
    doc["replicates"] = rep_dirs
    (out / "meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"simulated {args.replicates} replicate(s) of "
          f"{args.subjects} subjects x {args.channels} channels in {out}")
    return 0


def _parse_overrides(parser, pairs) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            parser.error(f"--set expects field=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            parser.error(f"--set value for {key!r} is not valid JSON: {raw!r}")
    return overrides


def cmd_fit(parser, args) -> int:
    data_dir = Path(args.data)
    data_csv = data_dir / "data.csv"
    grid_csv = data_dir / "time_grid.csv"
    for path in (data_csv, grid_csv):
        if not path.exists():
            parser.error(f"missing input file {path}")
    out = _prepare_out(parser, args.out, args.force)
    raw = read_dataset_csv(data_csv, grid_csv)

    smoothed = raw if args.no_smooth else smooth_dataset(
        raw, args.basis_size, args.penalty)
    basis = fit_fpca(smoothed, var_threshold=args.var_threshold)

    inputs = {"data": data_csv, "time_grid": grid_csv}
    if args.hyperparams:
        hp = load_hyperparams(args.hyperparams)
        inputs["hyperparams"] = Path(args.hyperparams)
    else:
        hp = estimate_hyperparams(basis, raw.group_codes, seed=args.seed)
    hp = apply_scenario(hp, args.scenario, _parse_overrides(parser, args.set))

    cfg = SamplerConfig(n_iter=args.iters, burn_in=args.burnin, thin=args.thin,
                        n_chains=args.chains, seed=args.seed,
                        init_mode=args.init, audit_every=args.audit_every)
    archives = run_chains(smoothed, basis, hp, cfg)

    write_basis(basis, out / "basis")
    save_hyperparams(hp, out / "hyperparams.json")
    save_archives(archives, out, extra_meta=_manifest(args, inputs))
    print(f"kept {archives[0].n_draws} draws x {len(archives)} chain(s), "
          f"{basis.n_components} component(s); run written to {out}")
    return 0


def cmd_diagnose(parser, args) -> int:
    run_dir = Path(args.run)
    if not (run_dir / "meta.json").exists():
        parser.error(f"{run_dir} does not look like a run directory")
    archives = load_archives(run_dir)
    rows = diagnose_archives(archives, rhat_threshold=args.rhat_threshold,
                             ess_threshold=args.ess_threshold)
    write_diagnostics_csv(run_dir / "diagnostics.csv", rows)
    names = args.trace or ["noise_prec"]
    index = {name: j for j, name in enumerate(archives[0].scalar_names)}
    for name in names:
        if name not in index:
            parser.error(f"unknown parameter {name!r}; see diagnostics.csv for names")
        chains = np.stack([a.scalars[:, index[name]] for a in archives])
        safe = name.replace("[", "_").replace("]", "").replace(",", "_")
        export_trace(run_dir / f"trace_{safe}.csv", chains, name=name)
        export_density(run_dir / f"density_{safe}.csv", chains, name=name)
    print(format_diagnostics_table(rows))
    flagged = [row["name"] for row in rows if not row["ok"]]
    if flagged:
        print(f"FLAGGED {len(flagged)} parameter(s): " + ", ".join(flagged))
        return 2
    print("all parameters within thresholds")
    return 0


def cmd_summarize(parser, args) -> int:
    run_dir = Path(args.run)
    if not (run_dir / "meta.json").exists():
        parser.error(f"{run_dir} does not look like a run directory")
    archives = load_archives(run_dir)
    subject_draws = np.concatenate([a.subject_alloc_draws for a in archives])
    group_codes = archives[0].group_codes
    n_components = subject_draws.shape[2]

    truth = None
    if args.truth:
        truth = read_truth_json(args.truth)
    reports = []
    for dim in range(n_components):
        truth_labels = None
        if truth is not None and dim < truth.subject_labels.shape[1]:
            truth_labels = truth.subject_labels[:, dim]
        reports.append(summarize_dimension(subject_draws, group_codes, dim,
                                           truth_labels=truth_labels,
                                           level=args.level))
        draws = partition_draws(subject_draws, group_codes, dim)
        write_similarity_csv(run_dir / f"similarity_dim{dim + 1}.csv",
                             similarity_matrix(draws))
    write_partition_report(run_dir / "partitions.json", reports)
    print(format_partition_table(reports))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlpp",
        description="Multilevel partition priors for multichannel functional data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write replicate datasets with planted truth")
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--channels", type=int, default=50)
    p.add_argument("--timepoints", type=int, default=150)
    p.add_argument("--snr", type=float, default=6.0)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="smooth, decompose and run the sampler")
    p.add_argument("--data", required=True,
                   help="directory containing data.csv and time_grid.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=4000)
    p.add_argument("--burnin", type=int, default=1000)
    p.add_argument("--thin", type=int, default=2)
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--basis-size", type=int, default=25)
    p.add_argument("--penalty", type=float, default=None,
                   help="smoothing penalty (default: generalized cross-validation)")
    p.add_argument("--no-smooth", action="store_true",
                   help="skip smoothing and decompose the raw curves")
    p.add_argument("--var-threshold", type=float, default=0.8)
    p.add_argument("--hyperparams", default=None,
                   help="JSON file of prior constants (default: estimate from scores)")
    p.add_argument("--scenario", choices=SCENARIOS, default=None)
    p.add_argument("--set", action="append", metavar="FIELD=JSON",
                   help="override one hyperparameter field (repeatable)")
    p.add_argument("--init", choices=("empirical", "prior_draw"), default="empirical")
    p.add_argument("--audit-every", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="convergence checks on a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--rhat-threshold", type=float, default=1.1)
    p.add_argument("--ess-threshold", type=float, default=1000.0)
    p.add_argument("--trace", action="append", metavar="NAME",
                   help="also export trace/density CSVs for this parameter "
                        "(default: noise_prec)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("summarize", help="partition point estimates and credible balls")
    p.add_argument("--run", required=True)
    p.add_argument("--truth", default=None, help="planted-truth JSON for scoring")
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(parser, args)


if __name__ == "__main__":
    sys.exit(main())
