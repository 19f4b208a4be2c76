"""Persistence and optical-flow extrapolation baselines.

The optical-flow baseline estimates a dense motion field with pyramidal
Lucas-Kanade least squares and advects the last frame backward along it
(constant-vector semi-Lagrangian scheme).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class FlowField:
    u: np.ndarray  # x (column) displacement, px per step
    v: np.ndarray  # y (row) displacement, px per step

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must share a shape")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow must be finite")

    def scaled(self, factor: float) -> "FlowField":
        return FlowField(self.u * factor, self.v * factor)


def persistence_forecast(last_input_frame, t_out: int) -> np.ndarray:
    frame = np.asarray(last_input_frame)
    return np.repeat(frame[None], t_out, axis=0)


def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional (rows, cols); taps outside the grid read as 0."""
    h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros(rows.shape, dtype=np.float64)
            vals[ok] = img[rr[ok], cc[ok]]
            out += wr * wc * vals
    return out


def advect(frame: np.ndarray, flow: FlowField) -> np.ndarray:
    """One backward semi-Lagrangian step: out(x) = frame(x - flow(x))."""
    h, w = frame.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    return bilinear_sample(np.asarray(frame, dtype=np.float64), rows - flow.v, cols - flow.u)


def _pyramid(img: np.ndarray, levels: int, min_side: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        prev = pyr[-1]
        if min(prev.shape) // 2 < min_side:
            break
        smooth = ndimage.gaussian_filter(prev, 1.0, mode="nearest")
        pyr.append(smooth[::2, ::2])
    return pyr


def _lk_refine(f0, f1, u, v, window: int, iterations: int, reg: float, chunk_rows: int = 32):
    """Gauss-Newton Lucas-Kanade per pixel, each window warped by that pixel's own flow."""
    h, w = f0.shape
    r = window // 2
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1]
    oy = oy.ravel().astype(np.float64)
    ox = ox.ravel().astype(np.float64)
    gy, gx = np.gradient(f0)
    lam = reg * max(float(np.mean(gx * gx + gy * gy)), 1e-12)
    u = np.array(u, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    for r0 in range(0, h, chunk_rows):
        rows, cols = np.mgrid[r0 : min(r0 + chunk_rows, h), 0:w].astype(np.float64)
        py = rows.ravel()[:, None] + oy[None, :]
        px = cols.ravel()[:, None] + ox[None, :]
        tmpl = ndimage.map_coordinates(f0, [py, px], order=1, mode="nearest")
        wx = ndimage.map_coordinates(gx, [py, px], order=1, mode="nearest")
        wy = ndimage.map_coordinates(gy, [py, px], order=1, mode="nearest")
        a = (wx * wx).sum(1) + lam
        d = (wy * wy).sum(1) + lam
        b = (wx * wy).sum(1)
        det = a * d - b * b
        cu = u[r0 : r0 + chunk_rows].ravel().copy()
        cv = v[r0 : r0 + chunk_rows].ravel().copy()
        act = np.arange(cu.size)
        for _ in range(iterations):
            warped = ndimage.map_coordinates(
                f1, [py[act] + cv[act, None], px[act] + cu[act, None]], order=3, mode="nearest"
            )
            it = warped - tmpl[act]
            sxt = (wx[act] * it).sum(1)
            syt = (wy[act] * it).sum(1)
            du = np.clip(-(d[act] * sxt - b[act] * syt) / det[act], -1.0, 1.0)
            dv = np.clip(-(a[act] * syt - b[act] * sxt) / det[act], -1.0, 1.0)
            cu[act] += du
            cv[act] += dv
            act = act[np.maximum(np.abs(du), np.abs(dv)) >= 1e-7]
            if act.size == 0:
                break
        u[r0 : r0 + chunk_rows] = cu.reshape(-1, w)
        v[r0 : r0 + chunk_rows] = cv.reshape(-1, w)
    return u, v


def estimate_flow(
    f0,
    f1,
    levels: int = 3,
    window: int = 11,
    iterations: int = 20,
    reg: float = 1e-3,
) -> FlowField:
    """Dense flow from f0 to f1 such that f1(x + flow(x)) ~ f0(x).

    Coarse-to-fine Lucas-Kanade: at each pyramid level, per-pixel window
    sums form 2x2 normal equations, Tikhonov-regularized by ``reg`` times
    the mean squared gradient so textureless regions resolve to zero motion.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    if f0.shape != f1.shape:
        raise ValueError("frames must share a shape")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    scale = max(float(np.abs(f0).max()), float(np.abs(f1).max()), 1e-12)
    # coarse levels must stay several windows wide or borders dominate the solves
    p0 = _pyramid(f0 / scale, levels, 3 * window)
    p1 = _pyramid(f1 / scale, levels, 3 * window)
    u = np.zeros(p0[-1].shape)
    v = np.zeros(p0[-1].shape)
    for lvl in reversed(range(len(p0))):
        a, b = p0[lvl], p1[lvl]
        if u.shape != a.shape:
            zoom = (a.shape[0] / u.shape[0], a.shape[1] / u.shape[1])
            u = ndimage.zoom(u, zoom, order=1, mode="nearest") * zoom[1]
            v = ndimage.zoom(v, zoom, order=1, mode="nearest") * zoom[0]
        u, v = _lk_refine(a, b, u, v, window, iterations, reg)
    return FlowField(u, v)


def optical_flow_forecast(
    inputs,
    t_out: int,
    cadence_ratio: float = 1.0,
    **flow_kw,
) -> np.ndarray:
    """Advect the last of two input frames forward ``t_out`` steps.

    ``cadence_ratio`` is output spacing over input spacing; the flow
    measured between the two inputs is scaled by it once.
    """
    frames = np.asarray(inputs, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError("need at least two input frames [T,H,W]")
    flow = estimate_flow(frames[-2], frames[-1], **flow_kw).scaled(cadence_ratio)
    out = np.empty((t_out,) + frames.shape[1:], dtype=np.float32)
    cur = frames[-1]
    for t in range(t_out):
        cur = advect(cur, flow)
        out[t] = cur
    return out
