"""Command-line entry point.

Exit codes: 0 success, 1 unexpected error, 2 usage or configuration error,
3 parse error in an input file, 4 shape/dimension mismatch, 5 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import formats, pipeline, synthetic
from .errors import ConfigError, FormatError, ShapeError
from .evaluation import format_summary
from .net import load_checkpoint

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_PARSE, EXIT_SHAPE, EXIT_IO = range(6)

log = logging.getLogger("lvoslam")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, pipeline.StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FormatError):
        return EXIT_PARSE
    if isinstance(exc, ShapeError):
        return EXIT_SHAPE
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_ERROR


def _config(args):
    return pipeline.load_config(args.config, seed=args.seed,
                                deterministic=True if args.deterministic else None, out=args.out)


def _associate(args):
    cfg = _config(args)
    for s in args.seq or sorted(set(cfg.sequences) | set(cfg.train_sequences)):
        idx = pipeline.index_sequence(cfg.sequence_dir(s), cfg.frame_period)
        files = pipeline.cmd_associate(idx, os.path.join(cfg.out, "associated", s), cfg.downsample, cfg.max_inv)
        log.info("sequence %s: %d 3D-flow rasters", s, len(files))


def _train(args):
    cfg = _config(args)
    if not cfg.train_sequences:
        raise ConfigError("[pipeline] train_sequences is empty")
    data = []
    for s in cfg.train_sequences:
        idx = pipeline.index_sequence(cfg.sequence_dir(s), cfg.frame_period)
        data += pipeline.load_training_set(os.path.join(cfg.out, "associated", s), idx.pose_path)
    _, history = pipeline.cmd_train(data, cfg.network, cfg.train, cfg.loss, os.path.join(cfg.out, "model"))
    if history:
        log.info("trained %d epochs, loss %.4f -> %.4f", len(history), history[0], history[-1])


def _odometry(args):
    cfg = _config(args)
    ckpt = args.checkpoint or cfg.checkpoint or os.path.join(cfg.out, "model", "checkpoint.lvo")
    model = load_checkpoint(ckpt)
    for s in args.seq or cfg.sequences:
        out = os.path.join(cfg.out, "odometry", f"{s}.txt")
        traj = pipeline.cmd_odometry(model, os.path.join(cfg.out, "associated", s), out, cfg.predict)
        log.info("sequence %s: %d poses -> %s", s, len(traj), out)


def _evaluate(args):
    kwargs = {}
    if args.config:
        cfg = _config(args)
        kwargs = dict(frame_period=cfg.frame_period, lengths=cfg.eval_lengths)
    report = pipeline.cmd_evaluate(args.gt, args.pred, args.out or ".", **kwargs)
    print(format_summary(report))


def _map(args):
    cfg = _config(args)
    for s in args.seq or cfg.sequences:
        idx = pipeline.index_sequence(cfg.sequence_dir(s), cfg.frame_period)
        traj = args.traj or os.path.join(cfg.out, "odometry", f"{s}.txt")
        intr = formats.load_intrinsics(idx.intrinsics_path)
        out = os.path.join(cfg.out, "map", f"{s}.ply")
        tree = pipeline.cmd_map(traj, idx, intr, cfg.octree, out, cfg.map_step)
        log.info("sequence %s: %d occupied voxels -> %s", s, len(tree.extract_occupied()), out)


def _run(args):
    manifest = pipeline.cmd_run(_config(args))
    log.info("outputs hash %s", manifest["outputs_sha256"])
    for note in manifest["notes"]:
        log.info(note)


def _synth(args):
    root = args.out or "synthetic"
    seq_dir = synthetic.write_sequence(root, args.name, frames=args.frames, seed=args.seed or 0)
    cfg_path = os.path.join(root, "pipeline.ini")
    with open(cfg_path, "w", newline="\n") as f:
        f.write(SAMPLE_CONFIG.format(seq=args.name))
    log.info("wrote %s and %s", seq_dir, cfg_path)


SAMPLE_CONFIG = """\
[pipeline]
root = .
sequences = {seq}
train_sequences = {seq}
out = out
seed = 0
downsample = 4
map_step = 2
eval_lengths = 2, 4, 6

[network]
input_width = 16
input_height = 8
stream_channels = 4, 8
fc_hidden = 32

[train]
batch_size = 4
learning_rate = 1e-3
epochs = 5
augment = true

[predict]
n_samples = 10000

[octree]
resolution = 0.5
max_range = 40
"""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration file (INI)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action="store_true",
                        help="use the Gaussian mean instead of sampling")
    common.add_argument("--out", help="output directory (overrides [pipeline] out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lvoslam", description="Learned monocular visual odometry with occupancy-octree mapping.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("associate", parents=[common], help="build 3D flow rasters")
    p.add_argument("--seq", nargs="*")
    p.set_defaults(func=_associate, needs_config=True)
    p = sub.add_parser("train", parents=[common], help="train the pose regressor")
    p.set_defaults(func=_train, needs_config=True)
    p = sub.add_parser("odometry", parents=[common], help="predict trajectories")
    p.add_argument("--checkpoint")
    p.add_argument("--seq", nargs="*")
    p.set_defaults(func=_odometry, needs_config=True)
    p = sub.add_parser("evaluate", parents=[common], help="KITTI relative-error metrics")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.set_defaults(func=_evaluate, needs_config=False)
    p = sub.add_parser("map", parents=[common], help="fuse depth into an occupancy octree")
    p.add_argument("--traj")
    p.add_argument("--seq", nargs="*")
    p.set_defaults(func=_map, needs_config=True)
    p = sub.add_parser("run", parents=[common], help="the whole pipeline")
    p.set_defaults(func=_run, needs_config=True)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic mini-sequence and config")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--name", default="00")
    p.set_defaults(func=_synth, needs_config=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    if args.needs_config and not args.config:
        parser.error(f"{args.command} requires --config")
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - mapped to exit codes
        code = exit_code(e)
        if code == EXIT_ERROR:
            log.exception("unexpected error")
        else:
            print(f"lvoslam {args.command}: error: {e}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
