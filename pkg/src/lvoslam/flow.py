"""Dense 3D flow from 2D optical flow and per-frame depth.

Raster conventions (all plain numpy arrays, row-major, origin top-left):

* 2D flow: ``(h, w, 2)``, channels ``(du, dv)`` in pixels.
* depth / inverse depth: ``(h, w)``.
* 3D flow: ``(h, w, 3)``, channels ``(du, dv, dZ)`` where ``dZ`` is the change of
  inverse depth along the flow vector.
"""

from __future__ import annotations

import numpy as np

DEFAULT_MAX_INV = 10.0


def invert_depth(depth: np.ndarray, max_inv: float = DEFAULT_MAX_INV) -> np.ndarray:
    """``min(1/d, max_inv)`` on valid pixels, 0 where depth is invalid."""
    if max_inv <= 0:
        raise ValueError("max_inv must be positive")
    d = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    out = np.zeros_like(d)
    np.divide(1.0, d, out=out, where=valid)
    return np.minimum(out, max_inv)


def bilinear_sample(img: np.ndarray, x, y):
    """Bilinear lookup with border clamping.

    ``x`` is the column coordinate and ``y`` the row coordinate; both may be
    scalars or arrays of the same shape.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return out[()] if out.ndim == 0 else out


def associate_3d_flow(flow: np.ndarray, invd_k: np.ndarray, invd_k1: np.ndarray) -> np.ndarray:
    """Concatenate 2D flow with the depth change found at each flow endpoint.

    ``F_Z(x, y) = invd_k1(x + du, y + dv) - invd_k(x, y)``; the first two output
    channels are copied from ``flow`` unchanged.
    """
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (h, w, 2), got {flow.shape}")
    if invd_k.shape != flow.shape[:2] or invd_k1.shape != flow.shape[:2]:
        raise ValueError(
            f"raster size mismatch: flow {flow.shape[:2]}, depth {invd_k.shape} / {invd_k1.shape}"
        )
    h, w = invd_k.shape
    ys, xs = np.mgrid[0:h, 0:w]
    warped = bilinear_sample(invd_k1, xs + flow[..., 0].astype(np.float64),
                             ys + flow[..., 1].astype(np.float64))
    out = np.empty((h, w, 3), dtype=np.result_type(flow.dtype, np.float32))
    out[..., :2] = flow
    out[..., 2] = warped - invd_k
    return out


def downsample_raster(raster: np.ndarray, factor: int, flow_channels: int = 0) -> np.ndarray:
    """Area-average pooling by an integer factor.

    Rows and columns that do not fill a whole block are cropped from the
    bottom/right. The first ``flow_channels`` channels are displacements and are
    divided by ``factor`` so they stay in output-pixel units.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    raster = np.asarray(raster)
    if factor == 1:
        return raster.copy()
    h, w = raster.shape[:2]
    hh, ww = h // factor, w // factor
    if hh == 0 or ww == 0:
        raise ValueError(f"raster {h}x{w} smaller than factor {factor}")
    r = raster[: hh * factor, : ww * factor].astype(np.float64)
    r = r.reshape(hh, factor, ww, factor, *raster.shape[2:]).mean(axis=(1, 3))
    if flow_channels:
        r[..., :flow_channels] /= factor
    return r.astype(raster.dtype if raster.dtype.kind == "f" else np.float64)


def build_flow3d(flow: np.ndarray, depth_k: np.ndarray, depth_k1: np.ndarray, factor: int = 1,
                 max_inv: float = DEFAULT_MAX_INV, use_inverse: bool = True) -> np.ndarray:
    """Full-resolution association followed by downsampling to network size.

    ``use_inverse=False`` associates raw depth instead of inverse depth; it
    exists for ablations only.
    """
    if use_inverse:
        a, b = invert_depth(depth_k, max_inv), invert_depth(depth_k1, max_inv)
    else:
        a = np.nan_to_num(np.asarray(depth_k, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
        b = np.nan_to_num(np.asarray(depth_k1, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    f3 = associate_3d_flow(flow, a, b)
    return downsample_raster(f3, factor, flow_channels=2).astype(np.float32)
