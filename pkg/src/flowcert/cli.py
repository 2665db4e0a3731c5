"""Command-line entry point: ``flowcert <subcommand> [config flags]``.

Config values come from defaults, then an optional key=value file given with
``--config``, then individual flags. Results go to CSV files under ``--out``
(with a ``.manifest`` file alongside) or to stdout when no directory is set.
Exit status is 1 when any certificate is invalidated and 2 on config errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

from . import datasets as ds
from . import experiments as ex
from .flow_engine import FlowDivergence

CONFIG_FIELDS = [f.name for f in dataclasses.fields(ex.ExperimentConfig)]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value file with ExperimentConfig fields")
    group = parser.add_argument_group("experiment config")
    for name in CONFIG_FIELDS:
        flag = "--" + name.replace("_", "-")
        help_text = "comma-separated horizons" if name == "horizons" else None
        group.add_argument(flag, dest="cfg_" + name, default=None, metavar="VALUE", help=help_text)


def _config(args) -> ex.ExperimentConfig:
    base = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    overrides = {name: getattr(args, "cfg_" + name) for name in CONFIG_FIELDS
                 if getattr(args, "cfg_" + name) is not None}
    return ex.config_from_mapping(overrides, base)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _emit(config: ex.ExperimentConfig, name: str, rows: list[dict], columns, manifest: dict) -> None:
    if config.out is None:
        writer = csv.DictWriter(sys.stdout, fieldnames=columns, lineterminator="\n",
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
        return
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_csv(out / f"{name}.csv", rows, columns)
    entries = {"command": name}
    entries.update(manifest)
    (out / f"{name}.manifest").write_text(ds.format_manifest(entries) + ex.config_to_text(config))


def cmd_certify(args, config) -> int:
    seeds = _int_list(args.seeds) if args.seeds else [config.seed]
    records = ex.certify_seeds(config, seeds, args.workers)
    rows = [r for rec in records for r in rec.rows]
    manifest = {"seeds": ",".join(map(str, seeds))}
    for seed, rec in zip(seeds, records):
        manifest.update({f"run{seed}_{k}": v for k, v in rec.manifest.items()})
    _emit(config, "certify", rows, ex.CERTIFY_COLUMNS, manifest)
    bad = [s for s, rec in zip(seeds, records) if not rec.valid]
    for seed, rec in zip(seeds, records):
        if not rec.valid:
            print(f"seed {seed}: certificate invalidated ({rec.message})", file=sys.stderr)
    return 1 if bad else 0


def cmd_scaling(args, config) -> int:
    rows = ex.scaling_study(config, _int_list(args.widths), scale_grid=args.scale_grid)
    _emit(config, "scaling", rows, ex.SCALING_COLUMNS,
          {"widths": args.widths, "scale_grid": args.scale_grid})
    return 0


def cmd_discretization(args, config) -> int:
    rows = ex.discretization_study(config, args.dt_coarse, args.dt_fine)
    _emit(config, "discretization", rows, ex.DISCRETIZATION_COLUMNS,
          {"dt_coarse": args.dt_coarse, "dt_fine": args.dt_fine})
    return 0


def cmd_data_dependent(args, config) -> int:
    record = ex.data_dependent_run(config, args.t0, args.holdout_fraction)
    _emit(config, "data_dependent", record.rows, record.columns, record.manifest)
    return 0 if record.valid else 1


def cmd_gen_toy_data(args, config) -> int:
    train, test = ds.gaussian_clusters(config.seed, cluster_size=config.cluster_size,
                                       n_train=config.n_train, n_classes=config.n_classes)
    columns = tuple(f"x{i}" for i in range(train.inputs.shape[1])) + ("label",)
    for part in (train, test):
        rows = [dict(zip(columns, [*x, y])) for x, y in zip(part.inputs.tolist(), part.labels.tolist())]
        _emit(config, f"toy_{part.split}", rows, columns, part.manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcert",
        description="Gradient-flow training with exact density tracking and PAC-Bayes certificates.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", help="certify one run per seed over the horizon grid")
    _add_config_flags(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("scaling-study", help="best horizon and bound per width")
    _add_config_flags(p)
    p.add_argument("--widths", required=True, help="comma-separated widths")
    p.add_argument("--scale-grid", action="store_true",
                   help="shrink dt and horizons by first_width / width")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("discretization-study", help="compare bounds under two step sizes")
    _add_config_flags(p)
    p.add_argument("--dt-coarse", type=float, required=True)
    p.add_argument("--dt-fine", type=float, required=True)
    p.set_defaults(func=cmd_discretization)

    p = sub.add_parser("data-dependent", help="certify with a prior learned on held-out data")
    _add_config_flags(p)
    p.add_argument("--t0", type=float, required=True)
    p.add_argument("--holdout-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_data_dependent)

    p = sub.add_parser("gen-toy-data", help="write the toy clusters as CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_toy_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _config(args)
        return args.func(args, config)
    except (ex.ConfigError, ValueError) as exc:
        print(f"flowcert: error: {exc}", file=sys.stderr)
        return 2
    except FlowDivergence as exc:
        print(f"flowcert: run diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
