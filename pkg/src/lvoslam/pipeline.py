"""Pipeline stages: associate, train, odometry, evaluate, map, and the end-to-end run.

Sequence layout (as written by :func:`lvoslam.synthetic.write_sequence`)::

    <root>/<seq>/calib.txt          fx fy cx cy skew
    <root>/<seq>/poses.txt          ground truth (optional)
    <root>/<seq>/flow/%06d.flo      flow from frame k to k+1
    <root>/<seq>/depth/%06d.pfm     depth of frame k
    <root>/<seq>/rgb/%06d.ppm       colour of frame k (optional)

Output layout under the output directory::

    associated/<seq>/%06d.f3d
    model/checkpoint.lvo, model/loss.csv
    odometry/<seq>.txt
    eval/<seq>/*.csv
    map/<seq>.ply, map/<seq>.oct
    manifest.json
"""

from __future__ import annotations

import configparser
import glob
import hashlib
import json
import logging
import os
import platform
from dataclasses import dataclass, field

import numpy as np

from . import __version__, formats
from .errors import ConfigError, LvoError, ShapeError
from .evaluation import DEFAULT_LENGTHS, kitti_errors, report_csv
from .flow import build_flow3d
from .gaussian import LossWeights, PredictConfig, predict_translation, raw_to_gaussian
from .geometry import RelativePose, accumulate_trajectory, backproject, relative_from_absolute
from .net import LvoConfig, LvoModel, as_float32, forward, load_checkpoint, save_checkpoint
from .octree import OccupancyOctree, OctreeConfig, export_ply
from .training import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class SequenceIndex:
    seq_dir: str
    frame_count: int
    flow_paths: list[str]
    depth_paths: list[str]
    intrinsics_path: str
    rgb_paths: list[str] | None = None
    pose_path: str | None = None
    frame_period: float = 0.1

    @property
    def name(self) -> str:
        return os.path.basename(os.path.normpath(self.seq_dir))


def index_sequence(seq_dir, frame_period: float = 0.1) -> SequenceIndex:
    if not os.path.isdir(seq_dir):
        raise FileNotFoundError(f"sequence directory not found: {seq_dir}")
    depth = sorted(glob.glob(os.path.join(seq_dir, "depth", "*.pfm")))
    n = len(depth)
    flow = [os.path.join(seq_dir, "flow", f"{k:06d}.flo") for k in range(max(n - 1, 0))]
    rgb = [os.path.join(seq_dir, "rgb", f"{k:06d}.ppm") for k in range(n)]
    if not all(os.path.exists(p) for p in rgb):
        rgb = None
    pose = os.path.join(seq_dir, "poses.txt")
    return SequenceIndex(seq_dir, n, flow, depth, os.path.join(seq_dir, "calib.txt"), rgb,
                         pose if os.path.exists(pose) else None, frame_period)


# configuration ---------------------------------------------------------------

def _section(cls, parser, name, **overrides):
    kwargs = {}
    if parser.has_section(name):
        for key, raw in parser.items(name):
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"[{name}] unknown key '{key}'")
            kwargs[key] = _coerce(cls.__dataclass_fields__[key].default, raw, f"[{name}] {key}")
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from None


def _coerce(default, raw: str, where: str):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [t for t in raw.replace(",", " ").split() if t]
            conv = type(default[0]) if default else float
            return tuple(conv(t) for t in items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse '{raw}'") from None


@dataclass
class PipelineConfig:
    root: str
    sequences: list[str]
    out: str
    train_sequences: list[str] = field(default_factory=list)
    checkpoint: str | None = None
    seed: int = 0
    downsample: int = 4
    max_inv: float = 10.0
    frame_period: float = 0.1
    map_step: int = 1
    eval_lengths: tuple[float, ...] = DEFAULT_LENGTHS
    network: LvoConfig = field(default_factory=LvoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    predict: PredictConfig = field(default_factory=PredictConfig)
    octree: OctreeConfig = field(default_factory=OctreeConfig)
    source_text: str = ""

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def canonical(self) -> str:
        d = {k: v for k, v in self.__dict__.items() if k not in ("source_text", "out")}
        return json.dumps(d, default=lambda o: o.__dict__, sort_keys=True)

    def sequence_dir(self, seq: str) -> str:
        return os.path.join(self.root, seq)

    def validate_paths(self) -> None:
        for seq in sorted(set(self.sequences) | set(self.train_sequences)):
            if not os.path.isdir(self.sequence_dir(seq)):
                raise ConfigError(f"sequence '{seq}' not found under {self.root}")
        if self.checkpoint and not os.path.exists(self.checkpoint):
            raise ConfigError(f"checkpoint not found: {self.checkpoint}")


PIPELINE_KEYS = {"root", "sequences", "train_sequences", "out", "checkpoint", "seed", "downsample",
                 "max_inv", "frame_period", "map_step", "eval_lengths"}


def load_config(path, seed: int | None = None, deterministic: bool | None = None,
                out: str | None = None) -> PipelineConfig:
    """Parse and validate an INI-style pipeline configuration.

    Relative paths are resolved against the directory holding the file.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as f:
            text = f.read()
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    known = {"pipeline", "network", "train", "loss", "predict", "octree"}
    for s in parser.sections():
        if s not in known:
            raise ConfigError(f"unknown section [{s}]")
    if not parser.has_section("pipeline"):
        raise ConfigError("missing [pipeline] section")
    p = dict(parser.items("pipeline"))
    for key in p:
        if key not in PIPELINE_KEYS:
            raise ConfigError(f"[pipeline] unknown key '{key}'")
    base = os.path.dirname(os.path.abspath(path))

    def resolve(v):
        return v if os.path.isabs(v) else os.path.normpath(os.path.join(base, v))

    if "root" not in p or "sequences" not in p:
        raise ConfigError("[pipeline] needs 'root' and 'sequences'")
    try:
        run_seed = int(p.get("seed", 0)) if seed is None else seed
        cfg_seed = dict(seed=run_seed)
        pred_over = dict(cfg_seed)
        if deterministic is not None and deterministic:
            pred_over["deterministic"] = True
        cfg = PipelineConfig(
            root=resolve(p["root"]),
            sequences=p["sequences"].replace(",", " ").split(),
            train_sequences=p.get("train_sequences", "").replace(",", " ").split(),
            out=out if out is not None else resolve(p.get("out", "out")),
            checkpoint=resolve(p["checkpoint"]) if p.get("checkpoint") else None,
            seed=run_seed,
            downsample=int(p.get("downsample", 4)),
            max_inv=float(p.get("max_inv", 10.0)),
            frame_period=float(p.get("frame_period", 0.1)),
            map_step=int(p.get("map_step", 1)),
            eval_lengths=tuple(float(t) for t in p["eval_lengths"].replace(",", " ").split())
            if "eval_lengths" in p else DEFAULT_LENGTHS,
            network=_section(LvoConfig, parser, "network"),
            train=_section(TrainConfig, parser, "train", **cfg_seed),
            loss=_section(LossWeights, parser, "loss"),
            predict=_section(PredictConfig, parser, "predict", **pred_over),
            octree=_section(OctreeConfig, parser, "octree"),
            source_text=text,
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"[pipeline] {e}") from None
    if not cfg.sequences:
        raise ConfigError("[pipeline] 'sequences' is empty")
    if not cfg.eval_lengths or min(cfg.eval_lengths) <= 0:
        raise ConfigError("[pipeline] eval_lengths must be positive")
    if cfg.downsample < 1 or cfg.map_step < 1 or cfg.max_inv <= 0 or cfg.frame_period <= 0:
        raise ConfigError("[pipeline] downsample, map_step, max_inv and frame_period must be positive")
    return cfg


# stages ----------------------------------------------------------------------

def cmd_associate(seq: SequenceIndex, out_dir, factor: int = 4, max_inv: float = 10.0) -> list[str]:
    """Write one ``.f3d`` raster per consecutive frame pair."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    depth_next = None
    for k in range(seq.frame_count - 1):
        for p in (seq.flow_paths[k], seq.depth_paths[k], seq.depth_paths[k + 1]):
            if not os.path.exists(p):
                raise FileNotFoundError(f"frame {k}: missing input {p}")
        flow = formats.read_flo(seq.flow_paths[k])
        depth_k = depth_next if depth_next is not None else formats.read_pfm(seq.depth_paths[k])
        depth_next = formats.read_pfm(seq.depth_paths[k + 1])
        if flow.shape[:2] != depth_k.shape or depth_next.shape != depth_k.shape:
            raise ShapeError(f"frame {k}: flow {flow.shape[:2]} vs depth {depth_k.shape}/{depth_next.shape}")
        f3 = build_flow3d(flow, depth_k, depth_next, factor, max_inv)
        path = os.path.join(out_dir, f"{k:06d}.f3d")
        formats.write_f3d(path, f3)
        written.append(path)
    return written


def _f3d_paths(assoc_dir) -> list[str]:
    return sorted(glob.glob(os.path.join(assoc_dir, "*.f3d")))


def load_training_set(assoc_dir, pose_path) -> list[tuple[np.ndarray, RelativePose]]:
    if pose_path is None or not os.path.exists(pose_path):
        raise FileNotFoundError(f"ground-truth poses missing for {assoc_dir}")
    rels = relative_from_absolute(formats.load_poses(pose_path))
    paths = _f3d_paths(assoc_dir)
    if len(paths) != len(rels):
        raise ShapeError(f"{assoc_dir}: {len(paths)} rasters but {len(rels)} relative poses")
    return [(formats.read_f3d(p), r) for p, r in zip(paths, rels)]


def cmd_train(dataset, net_cfg: LvoConfig, train_cfg: TrainConfig, weights: LossWeights,
              out_dir) -> tuple[LvoModel, list[float]]:
    """Train and write ``checkpoint.lvo`` plus a per-epoch ``loss.csv``."""
    if dataset and dataset[0][0].shape[:2] != (net_cfg.input_height, net_cfg.input_width):
        raise ShapeError(
            f"rasters are {dataset[0][0].shape[:2]}, network expects "
            f"{(net_cfg.input_height, net_cfg.input_width)}"
        )
    os.makedirs(out_dir, exist_ok=True)
    init = LvoModel.init(net_cfg, seed=train_cfg.seed)
    if train_cfg.epochs == 0:
        model, history = init, []
    else:
        if not dataset:
            raise ValueError("no training samples")
        model, history = train(dataset, train_cfg, weights, model=init)
    model = as_float32(model)
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.lvo"))
    with open(os.path.join(out_dir, "loss.csv"), "w", newline="\n") as f:
        f.write("epoch,loss\n")
        for i, v in enumerate(history):
            f.write(f"{i},{v!r}\n")
    return model, history


def predict_relative(model: LvoModel, raster: np.ndarray, pcfg: PredictConfig,
                     rng: np.random.Generator) -> RelativePose:
    t, r = forward(model, raster[None])
    g, y = raw_to_gaussian(t[0])
    x, z = predict_translation(g, pcfg, rng)
    return RelativePose(np.array([x, y, z]), r[0])


def cmd_odometry(model: LvoModel, assoc_dir, out_path, pcfg: PredictConfig) -> np.ndarray:
    """Predict and chain relative poses over an associated sequence."""
    cfg = model.config
    rng = np.random.default_rng(pcfg.seed)
    rels = []
    for path in _f3d_paths(assoc_dir):
        raster = formats.read_f3d(path)
        if raster.shape[:2] != (cfg.input_height, cfg.input_width):
            raise ShapeError(
                f"{path}: raster {raster.shape[:2]} does not match checkpoint "
                f"{(cfg.input_height, cfg.input_width)}"
            )
        rels.append(predict_relative(model, raster, pcfg, rng))
    traj = accumulate_trajectory(rels)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    formats.save_poses(out_path, traj)
    return traj


def cmd_evaluate(gt_file, pred_file, out_dir, frame_period: float = 0.1, lengths=DEFAULT_LENGTHS):
    gt = formats.load_poses(gt_file)
    pred = formats.load_poses(pred_file)
    if len(gt) != len(pred):
        raise ShapeError(f"{gt_file} has {len(gt)} poses, {pred_file} has {len(pred)}")
    report = kitti_errors(gt, pred, lengths, frame_period=frame_period)
    report_csv(report, out_dir)
    return report


def cmd_map(traj_file, seq: SequenceIndex, intrinsics, octree_cfg: OctreeConfig, out_ply,
            step: int = 1) -> OccupancyOctree:
    """Fuse every frame's back-projected depth into an octree and export occupied voxels."""
    traj = formats.load_poses(traj_file) if seq.frame_count else np.zeros((0, 4, 4))
    if len(traj) != seq.frame_count:
        raise ShapeError(f"trajectory has {len(traj)} poses but sequence has {seq.frame_count} depth frames")
    tree = OccupancyOctree(octree_cfg)
    for k in range(seq.frame_count):
        depth = formats.read_pfm(seq.depth_paths[k])
        rgb = formats.read_ppm(seq.rgb_paths[k]) if seq.rgb_paths else None
        cloud = backproject(intrinsics, depth, rgb, step=step).transformed(traj[k])
        tree.insert_point_cloud(traj[k][:3, 3], cloud)
    os.makedirs(os.path.dirname(os.path.abspath(out_ply)), exist_ok=True)
    export_ply(tree.extract_occupied(), out_ply)
    with open(os.path.splitext(out_ply)[0] + ".oct", "wb") as f:
        f.write(tree.to_bytes())
    return tree


# end-to-end -----------------------------------------------------------------------

class StageError(LvoError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def _write_manifest(cfg: PipelineConfig, stages: dict, notes: list[str]) -> str:
    outputs = {}
    for dirpath, _, files in os.walk(cfg.out):
        for name in files:
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, cfg.out).replace(os.sep, "/")
            if rel != "manifest.json":
                outputs[rel] = _sha256(full)
    outputs = dict(sorted(outputs.items()))
    manifest = {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "seed": cfg.seed,
        "deterministic": cfg.predict.deterministic,
        "config_sha256": cfg.digest(),
        "stages": stages,
        "notes": notes,
        "outputs": outputs,
        "outputs_sha256": hashlib.sha256(json.dumps(outputs, sort_keys=True).encode()).hexdigest(),
    }
    path = os.path.join(cfg.out, "manifest.json")
    with open(path, "w", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def cmd_run(cfg: PipelineConfig) -> dict:
    """associate -> (train) -> odometry -> evaluate -> map, with a manifest of every output."""
    cfg.validate_paths()
    os.makedirs(cfg.out, exist_ok=True)
    stages: dict[str, str] = {}
    notes: list[str] = []
    seqs = {s: index_sequence(cfg.sequence_dir(s), cfg.frame_period)
            for s in sorted(set(cfg.sequences) | set(cfg.train_sequences))}

    def stage(name, fn):
        try:
            result = fn()
        except Exception as e:
            stages[name] = "failed"
            _write_manifest(cfg, stages, notes)
            raise StageError(name, e) from e
        stages[name] = "ok"
        return result

    def associate():
        for s, idx in seqs.items():
            cmd_associate(idx, os.path.join(cfg.out, "associated", s), cfg.downsample, cfg.max_inv)

    stage("associate", associate)

    if cfg.checkpoint:
        model = stage("load_checkpoint", lambda: load_checkpoint(cfg.checkpoint))
    else:
        def do_train():
            if not cfg.train_sequences:
                raise ConfigError("no checkpoint given and no train_sequences to train on")
            data = []
            for s in cfg.train_sequences:
                data += load_training_set(os.path.join(cfg.out, "associated", s), seqs[s].pose_path)
            return cmd_train(data, cfg.network, cfg.train, cfg.loss, os.path.join(cfg.out, "model"))[0]
        model = stage("train", do_train)

    def odometry():
        for s in cfg.sequences:
            cmd_odometry(model, os.path.join(cfg.out, "associated", s),
                         os.path.join(cfg.out, "odometry", f"{s}.txt"), cfg.predict)

    stage("odometry", odometry)

    def evaluate():
        for s in cfg.sequences:
            if seqs[s].pose_path is None:
                notes.append(f"evaluation skipped for sequence {s}: no ground truth")
                continue
            cmd_evaluate(seqs[s].pose_path, os.path.join(cfg.out, "odometry", f"{s}.txt"),
                         os.path.join(cfg.out, "eval", s), cfg.frame_period, cfg.eval_lengths)

    stage("evaluate", evaluate)

    def mapping():
        for s in cfg.sequences:
            intr = formats.load_intrinsics(seqs[s].intrinsics_path)
            cmd_map(os.path.join(cfg.out, "odometry", f"{s}.txt"), seqs[s], intr, cfg.octree,
                    os.path.join(cfg.out, "map", f"{s}.ply"), cfg.map_step)

    stage("map", mapping)
    path = _write_manifest(cfg, stages, notes)
    with open(path) as f:
        return json.load(f)
