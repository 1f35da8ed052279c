"""Dual-stream convolutional pose regressor with hand-derived gradients.

Stream A sees the 2D-flow channels, stream B the depth-change channel. Each is
a stack of 3x3 stride-2 convolutions with ReLU and no pooling. The two final
feature maps are concatenated, squeezed by a 1x1 convolution (+ReLU) and
flattened into two fully connected regressors: translation (6 outputs) and
rotation (3 outputs).
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError


@dataclass(frozen=True)
class LvoConfig:
    input_width: int = 320
    input_height: int = 96
    stream_channels: tuple[int, ...] = (64, 128, 256, 512)
    squeeze_divisor: int = 4
    fc_hidden: int = 128
    conv_kernel: int = 3
    conv_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "stream_channels", tuple(int(c) for c in self.stream_channels))
        if not self.stream_channels:
            raise ValueError("need at least one conv layer")
        div = self.conv_stride ** len(self.stream_channels)
        if self.input_width % div or self.input_height % div:
            raise ValueError(
                f"input {self.input_width}x{self.input_height} not divisible by {div}"
            )
        if self.squeeze_divisor < 1 or self.stream_channels[-1] % self.squeeze_divisor:
            raise ValueError("squeeze_divisor must divide the final stream width")
        if self.fc_hidden < 1 or self.conv_kernel < 1 or self.conv_stride < 1:
            raise ValueError("fc_hidden, conv_kernel and conv_stride must be positive")

    @property
    def feature_hw(self) -> tuple[int, int]:
        div = self.conv_stride ** len(self.stream_channels)
        return self.input_height // div, self.input_width // div

    @property
    def squeeze_channels(self) -> int:
        return self.stream_channels[-1] // self.squeeze_divisor

    @property
    def flat_size(self) -> int:
        h, w = self.feature_hw
        return h * w * self.squeeze_channels

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in declaration (and checkpoint) order."""
        k = self.conv_kernel
        shapes: dict[str, tuple[int, ...]] = {}
        for stream, cin in (("a", 2), ("b", 1)):
            for i, cout in enumerate(self.stream_channels):
                shapes[f"{stream}_conv{i}_w"] = (cout, cin, k, k)
                shapes[f"{stream}_conv{i}_b"] = (cout,)
                cin = cout
        shapes["squeeze_w"] = (self.squeeze_channels, 2 * self.stream_channels[-1])
        shapes["squeeze_b"] = (self.squeeze_channels,)
        for head, nout in (("t", 6), ("r", 3)):
            dims = [self.flat_size, self.fc_hidden, self.fc_hidden, nout]
            for j in range(3):
                shapes[f"{head}_fc{j}_w"] = (dims[j + 1], dims[j])
                shapes[f"{head}_fc{j}_b"] = (dims[j + 1],)
        return shapes


@dataclass
class LvoModel:
    config: LvoConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: LvoConfig, seed: int = 0) -> "LvoModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
                continue
            receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: LvoConfig) -> "LvoModel":
        return cls(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})

    def copy(self) -> "LvoModel":
        return LvoModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def weight_names(self) -> list[str]:
        return [k for k in self.params if k.endswith("_w")]

    def weight_sq_norm(self) -> float:
        return float(sum(np.sum(self.params[k] ** 2) for k in self.weight_names()))

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def equals(self, other: "LvoModel") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )


def _same_pad(size: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_forward(x, w, b, stride):
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh, pt, pb = _same_pad(h, k, stride)
    ow, pl, pr = _same_pad(wd, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i: i + stride * oh: stride, j: j + stride * ow: stride]
    cols = cols.reshape(n, c * k * k, oh * ow)
    out = np.matmul(w.reshape(cout, -1), cols) + b[:, None]
    return out.reshape(n, cout, oh, ow), (cols, xp.shape, (pt, pl), (h, wd))


def _conv_backward(dout, w, cache, stride):
    cols, xp_shape, (pt, pl), (h, wd) = cache
    n, cout, oh, ow = dout.shape
    _, c, k, _ = w.shape
    d2 = dout.reshape(n, cout, oh * ow)
    dw = np.einsum("nop,nkp->ok", d2, cols).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(cout, -1).T, d2).reshape(n, c, k, k, oh, ow)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i: i + stride * oh: stride, j: j + stride * ow: stride] += dcols[:, :, i, j]
    return dxp[:, :, pt: pt + h, pl: pl + wd], dw, db


def _to_nchw(batch, cfg: LvoConfig) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (cfg.input_height, cfg.input_width, 3):
        raise ShapeError(
            f"expected rasters of shape ({cfg.input_height}, {cfg.input_width}, 3), got {x.shape[1:]}"
        )
    return np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2)), dtype=np.float64)


def _forward(model: LvoModel, batch):
    cfg = model.config
    p = model.params
    x = _to_nchw(batch, cfg)
    cache: dict = {}
    feats = []
    for stream, inp in (("a", x[:, :2]), ("b", x[:, 2:3])):
        h = inp
        for i in range(len(cfg.stream_channels)):
            z, cc = _conv_forward(h, p[f"{stream}_conv{i}_w"], p[f"{stream}_conv{i}_b"], cfg.conv_stride)
            h = np.maximum(z, 0.0)
            cache[f"{stream}{i}"] = (cc, z > 0)
        feats.append(h)
    cat = np.concatenate(feats, axis=1)
    n, _, fh, fw = cat.shape
    zs = np.einsum("oc,nchw->nohw", p["squeeze_w"], cat) + p["squeeze_b"][:, None, None]
    sq = np.maximum(zs, 0.0)
    cache["cat"] = cat
    cache["sq_mask"] = zs > 0
    flat = sq.reshape(n, -1)
    outs = []
    for head in ("t", "r"):
        h = flat
        acts = [h]
        for j in range(3):
            z = h @ p[f"{head}_fc{j}_w"].T + p[f"{head}_fc{j}_b"]
            h = np.maximum(z, 0.0) if j < 2 else z
            acts.append(h)
        cache[head] = acts
        outs.append(h)
    return outs[0], outs[1], cache


def forward(model: LvoModel, batch) -> tuple[np.ndarray, np.ndarray]:
    """Run the network on ``(N, H, W, 3)`` 3D-flow rasters.

    Returns raw ``(N, 6)`` translation-head and ``(N, 3)`` rotation-head outputs.
    """
    t, r, _ = _forward(model, batch)
    return t, r


def backward(model: LvoModel, batch, grad_t, grad_r, cache=None) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(grad_t * t_out) + sum(grad_r * r_out)``, summed over the batch."""
    cfg = model.config
    p = model.params
    if cache is None:
        _, _, cache = _forward(model, batch)
    grads: dict[str, np.ndarray] = {}
    dflat = 0.0
    for head, g in (("t", grad_t), ("r", grad_r)):
        acts = cache[head]
        d = np.asarray(g, dtype=np.float64).reshape(acts[-1].shape)
        for j in (2, 1, 0):
            if j < 2:
                d = d * (acts[j + 1] > 0)
            grads[f"{head}_fc{j}_w"] = d.T @ acts[j]
            grads[f"{head}_fc{j}_b"] = d.sum(axis=0)
            d = d @ p[f"{head}_fc{j}_w"]
        dflat = dflat + d
    cat = cache["cat"]
    n, _, fh, fw = cat.shape
    dsq = dflat.reshape(n, cfg.squeeze_channels, fh, fw) * cache["sq_mask"]
    grads["squeeze_w"] = np.einsum("nohw,nchw->oc", dsq, cat)
    grads["squeeze_b"] = dsq.sum(axis=(0, 2, 3))
    dcat = np.einsum("oc,nohw->nchw", p["squeeze_w"], dsq)
    nlast = cfg.stream_channels[-1]
    for stream, dh in (("a", dcat[:, :nlast]), ("b", dcat[:, nlast:])):
        for i in reversed(range(len(cfg.stream_channels))):
            cc, mask = cache[f"{stream}{i}"]
            dz = dh * mask
            dh, dw, db = _conv_backward(dz, p[f"{stream}_conv{i}_w"], cc, cfg.conv_stride)
            grads[f"{stream}_conv{i}_w"] = dw
            grads[f"{stream}_conv{i}_b"] = db
    return {k: grads[k] for k in p}


# checkpoint file --------------------------------------------------------------

CHECKPOINT_MAGIC = b"LVOCKPT1"


def checkpoint_bytes(model: LvoModel) -> bytes:
    cfg = model.config
    header = [cfg.input_width, cfg.input_height, len(cfg.stream_channels), *cfg.stream_channels,
              cfg.squeeze_divisor, cfg.fc_hidden, cfg.conv_kernel, cfg.conv_stride]
    parts = [CHECKPOINT_MAGIC, struct.pack(f"<{len(header)}I", *header),
             struct.pack("<I", len(model.params))]
    for name, shape in cfg.param_shapes().items():
        arr = model.params[name]
        if arr.shape != shape:
            raise ShapeError(f"{name}: shape {arr.shape}, expected {shape}")
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: LvoModel, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def parse_checkpoint(buf: bytes) -> LvoModel:
    if len(buf) < len(CHECKPOINT_MAGIC) + 16 or buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic: not a checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch")
    off = 8
    w, h, nl = struct.unpack_from("<3I", body, off)
    off += 12
    chans = struct.unpack_from(f"<{nl}I", body, off)
    off += 4 * nl
    div, hidden, k, s, ntensors = struct.unpack_from("<5I", body, off)
    off += 20
    try:
        cfg = LvoConfig(w, h, chans, div, hidden, k, s)
    except ValueError as e:
        raise FormatError(f"invalid checkpoint config: {e}") from e
    shapes = cfg.param_shapes()
    if ntensors != len(shapes):
        raise FormatError(f"checkpoint has {ntensors} tensors, config implies {len(shapes)}")
    params = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        if off + 4 * count > len(body):
            raise FormatError("truncated checkpoint")
        params[name] = np.frombuffer(body, "<f4", count, off).reshape(shape).astype(np.float64)
        off += 4 * count
    if off != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return LvoModel(cfg, params)


def load_checkpoint(path) -> LvoModel:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


def as_float32(model: LvoModel) -> LvoModel:
    """Round every parameter to float32 precision (what a checkpoint stores)."""
    return LvoModel(model.config, {k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()})
