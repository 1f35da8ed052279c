"""Probabilistic occupancy octree with log-odds fusion.

Leaves are cubes of side ``resolution``. Integer voxel keys ``floor(p / res)``
index them; a tree of depth ``D`` covers keys in ``[-2**(D-1), 2**(D-1))`` on
each axis and doubles (``D += 1``) whenever an update falls outside.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError
from .geometry import PointCloud


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def logistic(l: float) -> float:
    return 1.0 / (1.0 + math.exp(-l))


@dataclass(frozen=True)
class OctreeConfig:
    resolution: float = 0.2
    prob_hit: float = 0.7
    prob_miss: float = 0.4
    prior: float = 0.5
    occupancy_threshold: float = 0.5
    clamp_min: float = 0.12
    clamp_max: float = 0.97
    max_range: float = 80.0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not 0 < self.prob_miss < self.prior < self.prob_hit < 1:
            raise ValueError("need 0 < prob_miss < prior < prob_hit < 1")
        if not 0 < self.clamp_min < self.occupancy_threshold <= self.clamp_max < 1:
            raise ValueError("need 0 < clamp_min < occupancy_threshold <= clamp_max < 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


def update_logodds(current: float, meas_prob: float, cfg: OctreeConfig) -> float:
    """Fuse one measurement: ``L + logit(p) - logit(prior)``, clamped."""
    if not 0 < meas_prob < 1:
        raise ValueError(f"measurement probability {meas_prob} outside (0, 1)")
    l = current + logit(meas_prob) - logit(cfg.prior)
    return min(max(l, logit(cfg.clamp_min)), logit(cfg.clamp_max))


class _Leaf:
    __slots__ = ("logodds", "color_sum", "color_count")

    def __init__(self, logodds):
        self.logodds = logodds
        self.color_sum = [0.0, 0.0, 0.0]
        self.color_count = 0


class _Node:
    __slots__ = ("children",)

    def __init__(self):
        self.children: list = [None] * 8


@dataclass(frozen=True)
class Voxel:
    center: tuple[float, float, float]
    side: float
    probability: float
    rgb: tuple[int, int, int]


class OccupancyOctree:
    def __init__(self, cfg: OctreeConfig | None = None):
        self.cfg = cfg or OctreeConfig()
        self.depth = 1
        self.root = _Node()

    # keys -----------------------------------------------------------------

    def key(self, p) -> tuple[int, int, int]:
        r = self.cfg.resolution
        return (math.floor(p[0] / r), math.floor(p[1] / r), math.floor(p[2] / r))

    def _contains(self, key) -> bool:
        half = 1 << (self.depth - 1)
        return all(-half <= k < half for k in key)

    def _expand(self):
        # old root child i sits in the opposite corner of new root child i
        new_root = _Node()
        for i, child in enumerate(self.root.children):
            if child is not None:
                mid = _Node()
                mid.children[7 - i] = child
                new_root.children[i] = mid
        self.root = new_root
        self.depth += 1

    def _path(self, key):
        off = 1 << (self.depth - 1)
        ux, uy, uz = key[0] + off, key[1] + off, key[2] + off
        for level in range(self.depth - 1, -1, -1):
            yield ((ux >> level) & 1) | (((uy >> level) & 1) << 1) | (((uz >> level) & 1) << 2)

    def leaf(self, key, create=False) -> _Leaf | None:
        if not self._contains(key):
            if not create:
                return None
            while not self._contains(key):
                self._expand()
        node = self.root
        idx = list(self._path(key))
        for level, i in enumerate(idx):
            child = node.children[i]
            if child is None:
                if not create:
                    return None
                child = _Leaf(logit(self.cfg.prior)) if level == len(idx) - 1 else _Node()
                node.children[i] = child
            node = child
        return node

    def probability(self, key) -> float:
        """Occupancy probability of the leaf at ``key`` (the prior if unknown)."""
        lf = self.leaf(key)
        return self.cfg.prior if lf is None else logistic(lf.logodds)

    def update(self, key, meas_prob: float, color=None) -> None:
        lf = self.leaf(key, create=True)
        lf.logodds = update_logodds(lf.logodds, meas_prob, self.cfg)
        if color is not None:
            for c in range(3):
                lf.color_sum[c] += float(color[c])
            lf.color_count += 1

    def leaves(self):
        """Yield ``(key, leaf)`` for every allocated leaf in preorder."""
        off = 1 << (self.depth - 1)

        def walk(node, level, base):
            for i, child in enumerate(node.children):
                if child is None:
                    continue
                span = 1 << (self.depth - 1 - level)
                b = (base[0] + (i & 1) * span, base[1] + ((i >> 1) & 1) * span,
                     base[2] + ((i >> 2) & 1) * span)
                if isinstance(child, _Leaf):
                    yield (b[0] - off, b[1] - off, b[2] - off), child
                else:
                    yield from walk(child, level + 1, b)

        yield from walk(self.root, 0, (0, 0, 0))

    # sensor model -----------------------------------------------------------

    def insert_point_cloud(self, origin, cloud: PointCloud) -> None:
        """Integrate one scan taken from ``origin``.

        Every endpoint leaf receives one hit and every other leaf crossed by a
        ray receives one miss, however many rays touch it in this scan.
        """
        origin = np.asarray(origin, dtype=np.float64)
        if not np.all(np.isfinite(origin)):
            raise ValueError("sensor origin must be finite")
        pts = cloud.points
        if len(pts) == 0:
            return
        keep = np.linalg.norm(pts - origin, axis=1) <= self.cfg.max_range
        keep &= np.all(np.isfinite(pts), axis=1)
        pts = pts[keep]
        colors = cloud.colors[keep] if cloud.colors is not None else None
        hits: dict[tuple, list] = {}
        free: set = set()
        for i, p in enumerate(pts):
            end = self.key(p)
            if end not in hits:
                hits[end] = []
            if colors is not None:
                hits[end].append(colors[i])
            free.update(ray_keys(origin, p, self.cfg.resolution))
        free.difference_update(hits)
        for k in sorted(free):
            self.update(k, self.cfg.prob_miss)
        for k in sorted(hits):
            cols = hits[k]
            self.update(k, self.cfg.prob_hit)
            if cols:
                lf = self.leaf(k)
                for c in cols:
                    for j in range(3):
                        lf.color_sum[j] += float(c[j])
                    lf.color_count += 1

    def extract_occupied(self) -> list[Voxel]:
        r = self.cfg.resolution
        out = []
        for key, lf in self.leaves():
            p = logistic(lf.logodds)
            if p > self.cfg.occupancy_threshold:
                if lf.color_count:
                    rgb = tuple(int(round(s / lf.color_count)) for s in lf.color_sum)
                else:
                    rgb = (128, 128, 128)
                out.append(Voxel(tuple((k + 0.5) * r for k in key), r, p, rgb))
        return out

    # binary dump --------------------------------------------------------------

    def to_bytes(self) -> bytes:
        cfg = self.cfg
        parts = [OCTREE_MAGIC, struct.pack("<8d", *asdict(cfg).values()), struct.pack("<I", self.depth)]

        def walk(node, level):
            mask = sum(1 << i for i, c in enumerate(node.children) if c is not None)
            parts.append(struct.pack("<B", mask))
            for c in node.children:
                if c is None:
                    continue
                if level == self.depth - 1:
                    parts.append(struct.pack("<d3dI", c.logodds, *c.color_sum, c.color_count))
                else:
                    walk(c, level + 1)

        walk(self.root, 0)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "OccupancyOctree":
        if buf[: len(OCTREE_MAGIC)] != OCTREE_MAGIC:
            raise FormatError("bad magic: not an octree dump")
        off = len(OCTREE_MAGIC)
        try:
            vals = struct.unpack_from("<8d", buf, off)
            off += 64
            (depth,) = struct.unpack_from("<I", buf, off)
            off += 4
            tree = cls(OctreeConfig(*vals))
            tree.depth = depth
            leaf_fmt = struct.Struct("<d3dI")

            def read(level):
                nonlocal off
                node = _Node()
                (mask,) = struct.unpack_from("<B", buf, off)
                off += 1
                for i in range(8):
                    if not mask >> i & 1:
                        continue
                    if level == depth - 1:
                        l, r, g, b, n = leaf_fmt.unpack_from(buf, off)
                        off += leaf_fmt.size
                        lf = _Leaf(l)
                        lf.color_sum = [r, g, b]
                        lf.color_count = n
                        node.children[i] = lf
                    else:
                        node.children[i] = read(level + 1)
                return node

            tree.root = read(0)
        except struct.error as e:
            raise FormatError(f"truncated octree dump: {e}") from e
        if off != len(buf):
            raise FormatError("trailing bytes in octree dump")
        return tree


OCTREE_MAGIC = b"LVOOCT1\0"


def ray_keys(origin, end, resolution: float) -> list[tuple[int, int, int]]:
    """Voxel keys crossed by the segment ``origin -> end``, excluding the end voxel.

    3D digital differential analyser (Amanatides & Woo). The origin voxel is
    included.
    """
    o = [c / resolution for c in origin]
    e = [c / resolution for c in end]
    cur = [math.floor(c) for c in o]
    last = [math.floor(c) for c in e]
    d = [e[i] - o[i] for i in range(3)]
    step = [0, 0, 0]
    t_max = [math.inf] * 3
    t_delta = [math.inf] * 3
    for i in range(3):
        if d[i] > 0:
            step[i] = 1
            t_max[i] = (cur[i] + 1 - o[i]) / d[i]
            t_delta[i] = 1.0 / d[i]
        elif d[i] < 0:
            step[i] = -1
            t_max[i] = (cur[i] - o[i]) / d[i]
            t_delta[i] = -1.0 / d[i]
    out = []
    limit = sum(abs(last[i] - cur[i]) for i in range(3)) + 1
    while cur != last and len(out) < limit:
        out.append(tuple(cur))
        i = min(range(3), key=t_max.__getitem__)
        if t_max[i] > 1.0:
            break
        cur[i] += step[i]
        t_max[i] += t_delta[i]
    return out


def export_ply(voxels, path) -> None:
    """ASCII PLY with one coloured vertex per voxel centre."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(voxels)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for v in voxels:
        x, y, z = (_fmt(c) for c in v.center)
        lines.append(f"{x} {y} {z} {v.rgb[0]} {v.rgb[1]} {v.rgb[2]}")
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _fmt(x: float) -> str:
    return format(x, ".9g")


def read_ply(path) -> np.ndarray:
    """Vertex table of an ASCII PLY written by :func:`export_ply`, as ``(N, 6)``."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        if line == "end_header":
            body = lines[i + 1: i + 1 + (n or 0)]
            break
    else:
        raise FormatError(f"{path}: missing end_header")
    if n is None or len(body) != n:
        raise FormatError(f"{path}: vertex count mismatch")
    return np.array([[float(t) for t in ln.split()] for ln in body]).reshape(n, 6)
