"""Command-line entry point.

Subcommands: ``voxelize`` (hierarchy dump of a point file), ``selfcheck``
(invariant suite), ``train-toy`` (synthetic pretext training), ``bench``
(memory/time sweeps).  All flags are long-form; flag > config file > default.
Exit codes: 0 success, 1 validation failure, 2 runtime failure.  The default
seed is 1729; every subcommand is deterministic given ``--seed`` except for
wall-clock fields.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import DEFAULT_SEED, __version__
from .bench import SweepSpecError, emit_report, load_sweep_spec, run_sweep, write_plot_data
from .checkpoint import CheckpointError, load_checkpoint, restore_into, save_checkpoint
from .config import ConfigError, config_from_mapping, load_config, parse_keyval
from .pointcloud import PointCloudFormatError, load
from .selfcheck import run_all
from .streams import substream_rng, substream_seed
from .train import Hyperparams, Optimizer, TrainingDiverged, make_toy_dataset, train_toy
from .voxelgrid import build_hierarchy, voxelize, write_hierarchy_dump

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> _Parser:
    parser = _Parser(prog="voxwin", description=__doc__)
    parser.add_argument("--version", action="version", version=f"voxwin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="voxelize a point file and dump the hierarchy")
    p.add_argument("--input", required=True, help="point file (text or SVPC1 binary)")
    p.add_argument("--out", required=True, help="hierarchy dump path")
    p.add_argument("--voxel-size", type=float, default=0.02)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--strides", default="3,2,2,2", help="comma-separated coarsening strides")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("selfcheck", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--cases", type=int, default=25, help="random cases per property")
    p.add_argument("--inject-fault", action="store_true",
                   help="perturb one table gradient to demonstrate a failing check")
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("train-toy", help="train the toy segmentation pretext task")
    p.add_argument("--config", default="toy", help="preset name or config file path")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--loss-csv", default=None, help="loss curve CSV (default: <out>.loss.csv)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--scenes", type=int, default=6)
    p.add_argument("--points", type=int, default=160)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--engine", choices=("streaming", "vanilla"), default="streaming")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", help="run a memory/time sweep")
    p.add_argument("--spec", required=True, help="sweep spec file (key = value lines)")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--summary", default=None, help="also write the summary here")
    p.add_argument("--plot-dir", default=None, help="write per-engine plot data files here")
    p.add_argument("--parallel", action="store_true",
                   help="memory-counting mode over threads; wall-clock fields dropped")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_bench)
    return parser


def cmd_voxelize(args) -> int:
    strides = [int(s) for s in str(args.strides).split(",") if s.strip() != ""]
    pc = load(args.input)
    base = voxelize(pc, args.voxel_size, substream_seed(args.seed, "voxelize"))
    hier = build_hierarchy(base, args.levels, strides)
    with open(args.out, "w", encoding="utf-8") as fh:
        write_hierarchy_dump(hier, fh)
    for lvl in hier.levels:
        print(f"level {lvl.level}: {lvl.num_voxels} voxels (size {lvl.voxel_size:.6g} m)")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_all(args.seed, cases=args.cases, inject_fault=args.inject_fault)
    failed = False
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        failed = failed or not res.passed
        print(f"{status} {res.name}: {res.detail}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _apply_overrides(config_name: str, overrides: list[str]):
    config = load_config(config_name)
    if not overrides:
        return config
    mapping = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        mapping.update(parse_keyval(f"{key} = {value}"))
    return config_from_mapping(mapping, base=config)


def cmd_train_toy(args) -> int:
    config = _apply_overrides(args.config, args.set)
    hp = Hyperparams(epochs=args.epochs, learning_rate=args.learning_rate,
                     optimizer=args.optimizer)
    dataset = make_toy_dataset(args.scenes, args.points, substream_seed(args.seed, "dataset"),
                               num_classes=args.classes)

    backbone = decoder = optimizer = None
    start_epoch = 0
    if args.resume is not None:
        from .backbone import build_backbone_params, build_decoder_params, named_parameters

        blobs = load_checkpoint(args.resume)
        rng = substream_rng(args.seed, "init")
        m = dataset[0].cloud.num_channels
        backbone = build_backbone_params(config, m, rng)
        decoder = build_decoder_params(config, args.classes, rng)
        named = named_parameters(backbone, decoder)
        restore_into(blobs, named, backbone.buffers())
        optimizer = Optimizer(named, hp)
        optimizer.load_state_blobs(blobs)
        start_epoch = int(blobs.get("meta.epoch", np.array(0.0)))

    def on_epoch(epoch, mean_loss):
        print(f"epoch {epoch + 1}/{hp.epochs} mean loss {mean_loss:.6f}")

    result, backbone, decoder, optimizer = train_toy(
        dataset, config, hp, args.seed,
        backbone=backbone, decoder=decoder, optimizer=optimizer, start_epoch=start_epoch,
        num_classes=args.classes, engine=args.engine, threads=args.threads, on_epoch=on_epoch,
    )

    from .backbone import named_parameters

    named = named_parameters(backbone, decoder)
    blobs = {name: p.data for name, p in named.items()}
    blobs.update(backbone.buffers())
    blobs.update(optimizer.state_blobs())
    blobs["meta.epoch"] = np.array(float(max(hp.epochs, start_epoch)))
    save_checkpoint(args.out, blobs)

    loss_csv = args.loss_csv if args.loss_csv is not None else f"{args.out}.loss.csv"
    with open(loss_csv, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for i, loss_val in enumerate(result.losses):
            fh.write(f"{start_epoch + i + 1},{loss_val:.12g}\n")

    print(f"checkpoint written to {args.out}")
    print(f"final accuracy {result.accuracy:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = load_sweep_spec(args.spec, seed_override=args.seed)
    records = run_sweep(spec, parallel=args.parallel)
    csv_text, summary = emit_report(records)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    if args.summary is not None:
        with open(args.summary, "w", encoding="utf-8") as fh:
            fh.write(summary)
    if args.plot_dir is not None:
        write_plot_data(records, args.plot_dir)
    print(summary, end="")
    flagged = sum(1 for r in records if r.flagged)
    if flagged:
        print(f"warning: {flagged} records flagged (non-finite or engine mismatch)", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (PointCloudFormatError, ConfigError, SweepSpecError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
