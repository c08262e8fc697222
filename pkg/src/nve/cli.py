"""Command line entry points.

Verbs:
  pretrain   fit proxy-task backbones and save one snapshot per kind
  gen-data   generate a synthetic dataset and save it to a directory
  train      train a single configuration and print its accuracy
  grid       run the full result grid for one or more architectures
  report     reformat a results CSV as csv or markdown
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .data import generate_proxy_pretraining_task, save_dataset
from .ensemble import PRESET_MEMBERS, proxy_snapshot_path, save_core
from .errors import ConfigError, DataError, FormatError, ShapeError
from .experiment import (
    ExperimentConfig,
    emit_table,
    load_experiment_dataset,
    parse_config_file,
    pretrain_proxy,
    records_from_csv,
    run_grid,
    train,
)
from .models import KINDS


def _load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config_file(path)


def _parse_ids(raw, what, allowed):
    ids = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            value = int(part)
        except ValueError:
            raise ConfigError(f"bad {what} '{part}'") from None
        if value not in allowed:
            raise ConfigError(
                f"{what} must be one of {sorted(allowed)}, got {value}"
            )
        ids.append(value)
    if not ids:
        raise ConfigError(f"no {what}s given")
    return ids


def _cmd_pretrain(args):
    config = _load_config(args.config)
    kinds = [part.strip() for part in args.kinds.split(",") if part.strip()]
    for kind in kinds:
        if kind not in KINDS:
            raise ConfigError(f"unknown kind '{kind}', expected one of {KINDS}")
    proxy = generate_proxy_pretraining_task(config.task_spec(), args.seed)
    store = pretrain_proxy(
        kinds, proxy, args.epochs, args.seed, args.out,
        width_scale=config.width_scale, feature_dim=config.feature_dim,
    )
    for kind in sorted(store):
        print(f"wrote {store[kind]}")
    return 0


def _cmd_gen_data(args):
    config = _load_config(args.spec)
    dataset = load_experiment_dataset(replace(config, synthetic_seed=args.seed,
                                              dataset_dir=""))
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {args.out}")
    return 0


def _cmd_train(args):
    config = parse_config_file(args.config)
    dataset = load_experiment_dataset(config)
    core, record = train(config, dataset)
    for epoch, (t, v) in enumerate(zip(record.train_loss, record.val_loss)):
        print(f"epoch {epoch}: train_loss={t:.4f} val_loss={v:.4f}")
    print(f"test accuracy: {record.accuracy:.4f} "
          f"({record.wall_seconds:.1f}s)")
    if args.save_model:
        save_core(args.save_model, core)
        print(f"wrote {args.save_model}")
    return 0


def _ensure_snapshots(architecture_ids, config, master_seed):
    """Pretrain any missing proxy snapshots so grid cells can load them."""
    kinds = sorted({k for arch in architecture_ids for k in PRESET_MEMBERS[arch]})
    missing = [k for k in kinds
               if not proxy_snapshot_path(config.snapshot_dir, k).exists()]
    if not missing:
        return
    proxy = generate_proxy_pretraining_task(config.task_spec(), master_seed)
    pretrain_proxy(missing, proxy, epochs=10, seed=master_seed,
                   snapshot_dir=config.snapshot_dir,
                   width_scale=config.width_scale,
                   feature_dim=config.feature_dim)


def _cmd_grid(args):
    config = _load_config(args.config)
    if args.snapshot_dir:
        config = replace(config, snapshot_dir=args.snapshot_dir)
    ids = _parse_ids(args.archs, "architecture id", set(PRESET_MEMBERS))
    dataset = load_experiment_dataset(config)
    _ensure_snapshots(ids, config, args.master_seed)
    records = run_grid(ids, dataset, args.master_seed, config)
    text = emit_table(records, "csv")
    Path(args.out).write_text(text)
    print(f"wrote {len(records)} rows to {args.out}")
    return 0


def _cmd_report(args):
    records = records_from_csv(Path(args.infile).read_text())
    sys.stdout.write(emit_table(records, args.format))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nve",
        description="dual-stream volumetric classification experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train proxy backbones into snapshots")
    p.add_argument("--kinds", default=",".join(KINDS),
                   help="comma-separated model kinds")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="snapshot directory")
    p.add_argument("--config", help="config file supplying task/model knobs")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    p.add_argument("--spec", help="config file supplying task knobs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--save-model", help="optional path for trained weights")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("grid", help="run the result grid and write a CSV")
    p.add_argument("--archs", default="1,2,3",
                   help="comma-separated architecture ids")
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", help="base config file")
    p.add_argument("--snapshot-dir", help="override snapshot directory")
    p.set_defaults(fn=_cmd_grid)

    p = sub.add_parser("report", help="reformat a results CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", default="markdown",
                   choices=("csv", "markdown", "md"))
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataError, FormatError, ShapeError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
