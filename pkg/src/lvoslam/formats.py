"""Readers and writers for the on-disk formats.

* ``.flo``  Middlebury optical flow: float32 magic 202021.25, int32 width,
  int32 height, then ``h*w`` interleaved ``(u, v)`` float32, little-endian.
* ``.pfm``  Portable float map, grayscale ``Pf`` only; negative scale means
  little-endian; rows are stored bottom-up.
* ``.f3d``  3D flow: ``b"F3D1"``, int32 width, int32 height, then the three
  channel planes ``(du, dv, dZ)`` of ``w*h`` float32 each, little-endian.
* ``.ppm``  binary ``P6`` 8-bit RGB.
* pose file: 12 floats per line, the row-major top 3x4 of a camera-to-world pose.
* intrinsics file: one line ``fx fy cx cy skew``.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .geometry import CameraIntrinsics

FLO_MAGIC = 202021.25
F3D_MAGIC = b"F3D1"
_ORTHO_EXACT = 1e-12
_ORTHO_FIXABLE = 1e-3


# optical flow ---------------------------------------------------------------

def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    magic = np.frombuffer(buf, "<f4", 1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad magic {magic!r}")
    w, h = struct.unpack_from("<ii", buf, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    if len(buf) != 12 + w * h * 8:
        raise FormatError(f"{path}: expected {12 + w * h * 8} bytes, found {len(buf)}")
    return np.frombuffer(buf, "<f4", w * h * 2, 12).reshape(h, w, 2).astype(np.float32)


def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (h, w, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(np.float32(FLO_MAGIC).astype("<f4").tobytes())
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


# depth -----------------------------------------------------------------------

def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    try:
        head, dims, scale_line, body = buf.split(b"\n", 3)
    except ValueError:
        raise FormatError(f"{path}: truncated PFM header") from None
    head = head.strip()
    if head == b"PF":
        raise FormatError(f"{path}: colour PFM (PF) is not supported")
    if head != b"Pf":
        raise FormatError(f"{path}: not a PFM file")
    try:
        w, h = (int(t) for t in dims.split())
        scale = float(scale_line.strip())
    except ValueError:
        raise FormatError(f"{path}: malformed PFM header") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise FormatError(f"{path}: malformed PFM header")
    if len(body) != w * h * 4:
        raise FormatError(f"{path}: expected {w * h * 4} data bytes, found {len(body)}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(body, dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def write_pfm(path, depth: np.ndarray, little_endian: bool = True) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError("PFM writer takes a single-channel raster")
    h, w = depth.shape
    scale = -1.0 if little_endian else 1.0
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n{scale!r}\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(depth), dtype="<f4" if little_endian else ">f4").tobytes())


# 3D flow ---------------------------------------------------------------------

def write_f3d(path, flow3d: np.ndarray) -> None:
    flow3d = np.asarray(flow3d)
    if flow3d.ndim != 3 or flow3d.shape[2] != 3:
        raise ValueError(f"3D flow must be (h, w, 3), got {flow3d.shape}")
    h, w = flow3d.shape[:2]
    planes = np.ascontiguousarray(np.transpose(flow3d, (2, 0, 1)), dtype="<f4")
    with open(path, "wb") as f:
        f.write(F3D_MAGIC + struct.pack("<ii", w, h) + planes.tobytes())


def read_f3d(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != F3D_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    w, h = struct.unpack_from("<ii", buf, 4)
    if w <= 0 or h <= 0 or len(buf) != 12 + 12 * w * h:
        raise FormatError(f"{path}: size does not match {w}x{h}")
    planes = np.frombuffer(buf, "<f4", 3 * w * h, 12).reshape(3, h, w)
    return np.transpose(planes, (1, 2, 0)).astype(np.float32)


# images ----------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(buf) and not buf[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: only 8-bit binary P6 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = buf[pos + 1:]
    if len(data) != w * h * 3:
        raise FormatError(f"{path}: pixel data size mismatch")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


# poses and calibration -------------------------------------------------------

def _orthonormalize(R: np.ndarray, where: str) -> np.ndarray:
    drift = np.max(np.abs(R.T @ R - np.eye(3)))
    if drift <= _ORTHO_EXACT and np.linalg.det(R) > 0:
        return R
    if drift >= _ORTHO_FIXABLE:
        raise FormatError(f"{where}: rotation is not orthonormal (drift {drift:.2e})")
    u, _, vt = np.linalg.svd(R)
    Rn = u @ vt
    if np.linalg.det(Rn) < 0:
        raise FormatError(f"{where}: rotation has negative determinant")
    return Rn


def parse_poses(text: str, name: str = "<poses>") -> np.ndarray:
    poses = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        toks = line.split()
        if len(toks) != 12:
            raise FormatError(f"{name}:{lineno}: expected 12 values, found {len(toks)}")
        try:
            vals = np.array([float(t) for t in toks])
        except ValueError:
            raise FormatError(f"{name}:{lineno}: non-numeric value") from None
        if not np.all(np.isfinite(vals)):
            raise FormatError(f"{name}:{lineno}: non-finite value")
        T = np.eye(4)
        T[:3, :] = vals.reshape(3, 4)
        T[:3, :3] = _orthonormalize(T[:3, :3], f"{name}:{lineno}")
        poses.append(T)
    if not poses:
        raise FormatError(f"{name}: no poses")
    return np.stack(poses)


def load_poses(path) -> np.ndarray:
    with open(path) as f:
        return parse_poses(f.read(), str(path))


def format_poses(traj: np.ndarray) -> str:
    # %.17g round-trips every float64 exactly
    lines = [" ".join(format(v, ".17g") for v in T[:3, :].ravel()) for T in np.asarray(traj)]
    return "\n".join(lines) + "\n"


def save_poses(path, traj: np.ndarray) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(format_poses(traj))


def load_intrinsics(path) -> CameraIntrinsics:
    with open(path) as f:
        toks = f.read().split()
    if len(toks) != 5:
        raise FormatError(f"{path}: expected 'fx fy cx cy skew', found {len(toks)} values")
    try:
        return CameraIntrinsics(*(float(t) for t in toks))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def save_intrinsics(path, intr: CameraIntrinsics) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(" ".join(format(v, ".17g") for v in (intr.fx, intr.fy, intr.cx, intr.cy, intr.skew)) + "\n")
