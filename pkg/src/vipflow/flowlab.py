"""Optical flow utilities.

Flows are (H, W, 2) float arrays holding (u, v) = (dx, dy). Convention is the
backward-warp one: for a flow from frame k to frame j, frame j sampled at
``p + flow[p]`` corresponds to frame k at ``p``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowField:
    uv: np.ndarray
    degenerate: bool = False  # estimator found no texture and fell back to zero flow

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float64)
        if uv.ndim != 3 or uv.shape[2] != 2:
            raise FlowError(f"flow must have shape (H, W, 2), got {uv.shape}")
        if not np.all(np.isfinite(uv)):
            raise FlowError("flow contains non-finite values")
        object.__setattr__(self, "uv", uv)

    @property
    def u(self) -> np.ndarray:
        return self.uv[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.uv[..., 1]

    def __array__(self, dtype=None, copy=None):
        return self.uv if dtype is None else self.uv.astype(dtype)


def as_flow(flow) -> np.ndarray:
    uv = flow.uv if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    if uv.ndim != 3 or uv.shape[2] != 2:
        raise FlowError(f"flow must have shape (H, W, 2), got {uv.shape}")
    return uv


def zero_flow(h: int, w: int) -> np.ndarray:
    return np.zeros((h, w, 2))


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(flow, path) -> None:
    uv = as_flow(flow).astype("<f4")
    h, w = uv.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(uv.tobytes())


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowError(f"{path}: too short for a .flo header")
    magic, w, h = struct.unpack_from("<fii", raw, 0)
    if magic != FLO_MAGIC:
        raise FlowError(f"{path}: bad magic {magic}")
    if w <= 0 or h <= 0 or len(raw) != 12 + 8 * w * h:
        raise FlowError(f"{path}: size {len(raw)} inconsistent with {w}x{h}")
    return np.frombuffer(raw, "<f4", 2 * w * h, 12).reshape(h, w, 2).copy()


# ---------------------------------------------------------------------------
# sampling


def sample_bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray, valid: np.ndarray | None = None):
    """Bilinear lookup of ``img`` (H, W, C) at float coordinates.

    Returns ``(values, ok)``. ``ok`` is False wherever a tap with non-zero
    weight falls outside the image or on an invalid source pixel.
    """
    h, w = img.shape[:2]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    out = np.zeros(x.shape + img.shape[2:])
    ok = np.ones(x.shape, dtype=bool)
    for dy, dx, wt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi, yi = x0 + dx, y0 + dy
        active = wt > 0
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc, yc = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
        tap_ok = inb if valid is None else inb & (valid[yc, xc] != 0)
        ok &= ~active | tap_ok
        vals = img[yc, xc]
        wt_eff = np.where(active & inb, wt, 0.0)
        out += (wt_eff[..., None] if img.ndim == 3 else wt_eff) * vals
    return out, ok


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(np.float64), yy.astype(np.float64)


# ---------------------------------------------------------------------------
# estimation


def _gray(frame) -> np.ndarray:
    a = np.asarray(frame, dtype=np.float64)
    return a.mean(axis=2) if a.ndim == 3 else a


def _downsample(img, valid):
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    im = img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
    va = valid[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
    cnt = va.sum(axis=(1, 3))
    small = np.where(cnt > 0, (im * va).sum(axis=(1, 3)) / np.maximum(cnt, 1), 0.0)
    return small, (cnt == 4).astype(np.float64)


def _match(a, b, va, vb, init, radius, half, min_support=0.75):
    """Integer block matching of ``a`` against ``b`` around per-pixel ``init``.

    Every pixel sharing an initial displacement is matched with that same
    displacement applied to its whole window. Returns ``(flow, found)`` where
    the flow includes a parabolic sub-pixel step per axis.
    """
    h, w = a.shape
    size = 2 * half + 1
    n = 2 * radius + 1
    cands = [(du, dv) for dv in range(-radius, radius + 1) for du in range(-radius, radius + 1)]
    costs = np.full((len(cands), h, w), np.inf)
    init = np.asarray(init, dtype=np.int64)
    groups = np.unique(init.reshape(-1, 2), axis=0)
    own = ndimage.uniform_filter(va, size, mode="constant")
    for iu, iv in groups:
        sel = (init[..., 0] == iu) & (init[..., 1] == iv)
        for c, (du, dv) in enumerate(cands):
            sb, svb = _shift(b, vb, iu + du, iv + dv)
            wgt = va * svb
            num = ndimage.uniform_filter(wgt * (a - sb) ** 2, size, mode="constant")
            den = ndimage.uniform_filter(wgt, size, mode="constant")
            # a candidate must see most of the window's own valid pixels
            supported = (own > 0.2) & (den >= min_support * own)
            cost = np.where(supported, num / np.maximum(den, 1e-12), np.inf)
            # tiny preference for small displacements settles exact ties
            costs[c][sel] = cost[sel] + 1e-12 * (du * du + dv * dv)
    best = np.argmin(costs, axis=0)
    best_cost = np.take_along_axis(costs, best[None], 0)[0]
    # a minimum over a partially evaluated search window is biased toward the
    # evaluable side (frame borders, mask edges); such pixels are left unmatched
    found = np.isfinite(costs).all(axis=0)
    cand = np.asarray(cands)

    def parabola(step, inside):
        lo = np.where(inside, best - step, best)
        hi = np.where(inside, best + step, best)
        cm = np.take_along_axis(costs, lo[None], 0)[0]
        cp = np.take_along_axis(costs, hi[None], 0)[0]
        good = inside & found & np.isfinite(cm) & np.isfinite(cp)
        cm, cp, c0 = (np.where(good, c, 0.0) for c in (cm, cp, best_cost))
        denom = cm - 2 * c0 + cp
        good &= denom > 1e-12
        return np.clip(np.where(good, 0.5 * (cm - cp) / np.where(good, denom, 1.0), 0.0), -0.5, 0.5)

    bu, bv = best % n, best // n
    su = parabola(1, (bu > 0) & (bu < n - 1))
    sv = parabola(n, (bv > 0) & (bv < n - 1))
    flow = init.astype(np.float64)
    flow[..., 0] += np.where(found, cand[best, 0] + su, 0.0)
    flow[..., 1] += np.where(found, cand[best, 1] + sv, 0.0)
    return flow, found


def _shift(img, valid, du, dv):
    """``out[y, x] = img[y + dv, x + du]`` with out-of-range samples invalid."""
    h, w = img.shape
    out = np.zeros_like(img)
    ok = np.zeros_like(valid)
    ys = slice(max(0, -dv), min(h, h - dv))
    xs = slice(max(0, -du), min(w, w - du))
    yt = slice(max(0, dv), min(h, h + dv))
    xt = slice(max(0, du), min(w, w + du))
    out[ys, xs] = img[yt, xt]
    ok[ys, xs] = valid[yt, xt]
    return out, ok


def estimate_flow(a, b, valid_a=None, valid_b=None, radius: int = 4, half: int = 3,
                  texture_tol: float = 1e-6) -> FlowField:
    """Two-level coarse-to-fine block matching from ``a`` to ``b``.

    The coarse level searches +-``radius`` px at half resolution; the fine
    level searches +-2 px around the doubled coarse estimate, then applies a
    parabolic sub-pixel fit per axis.
    """
    ga, gb = _gray(a), _gray(b)
    if ga.shape != gb.shape:
        raise FlowError(f"frame shapes differ: {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    va = np.ones((h, w)) if valid_a is None else np.asarray(valid_a, dtype=np.float64)
    vb = np.ones((h, w)) if valid_b is None else np.asarray(valid_b, dtype=np.float64)
    if va.sum() == 0 or vb.sum() == 0 or ga[va > 0].std() < texture_tol or gb[vb > 0].std() < texture_tol:
        return FlowField(zero_flow(h, w), degenerate=True)

    sa, sva = _downsample(ga, va)
    sb, svb = _downsample(gb, vb)
    coarse, found = _match(sa, sb, sva, svb, np.zeros(sa.shape + (2,), np.int64), radius, half)
    if found.any() and not found.all():
        coarse, _, _ = harmonic_fill(coarse, ~found)
    init = np.zeros((h, w, 2))
    up = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)
    init[: up.shape[0], : up.shape[1]] = 2.0 * up
    if up.shape[0] < h:
        init[up.shape[0]:] = init[up.shape[0] - 1]
    if up.shape[1] < w:
        init[:, up.shape[1]:] = init[:, up.shape[1] - 1: up.shape[1]]
    init = np.rint(init).astype(np.int64)
    flow, found = _match(ga, gb, va, vb, init, 2, half)
    if not found.any():
        return FlowField(zero_flow(h, w), degenerate=True)
    if not found.all():
        # pixels without a supported match take the harmonic extension of their neighbours
        flow, _, _ = harmonic_fill(flow, ~found)
    return FlowField(flow)


# ---------------------------------------------------------------------------
# completion


def harmonic_fill(field: np.ndarray, unknown: np.ndarray, tol: float = 1e-4, max_sweeps: int = 10_000):
    """Solve the discrete Laplace equation on ``unknown`` pixels.

    Known pixels act as Dirichlet data; the image border is a zero-flux
    boundary. Red-black Gauss-Seidel until the max residual drops below
    ``tol``. Returns ``(filled, sweeps, residual)``.
    """
    f = np.array(field, dtype=np.float64, copy=True)
    unk = np.asarray(unknown, dtype=bool)
    if not unk.any():
        return f, 0, 0.0
    if unk.all():
        raise FlowError("harmonic fill needs at least one known pixel")
    h, w = unk.shape
    squeeze = f.ndim == 2
    if squeeze:
        f = f[..., None]

    ones = np.ones((h, w))
    cnt = np.zeros((h, w))
    cnt[1:] += ones[:-1]
    cnt[:-1] += ones[1:]
    cnt[:, 1:] += ones[:, :-1]
    cnt[:, :-1] += ones[:, 1:]

    def nbr_mean(a):
        s = np.zeros_like(a)
        s[1:] += a[:-1]
        s[:-1] += a[1:]
        s[:, 1:] += a[:, :-1]
        s[:, :-1] += a[:, 1:]
        return s / cnt[..., None]

    # start each hole at the mean of its own boundary values
    labels, n = ndimage.label(unk)
    known = ~unk
    ring = ndimage.binary_dilation(unk, structure=ndimage.generate_binary_structure(2, 1)) & known
    for lab in range(1, n + 1):
        comp = labels == lab
        border = ndimage.binary_dilation(comp, structure=ndimage.generate_binary_structure(2, 1)) & ring
        f[comp] = f[border].mean(axis=0)

    yy, xx = np.mgrid[0:h, 0:w]
    colors = [unk & ((yy + xx) % 2 == c) for c in (0, 1)]
    residual = np.inf
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        for sel in colors:
            f[sel] = nbr_mean(f)[sel]
        if sweeps % 10 == 0 or sweeps == max_sweeps:
            residual = float(np.abs(nbr_mean(f)[unk] - f[unk]).max())
            if residual < tol:
                break
    if squeeze:
        f = f[..., 0]
    return f, sweeps, residual


def complete_flow(x_k0, x_j0, m_k, m_j, **kwargs) -> FlowField:
    """Dense flow from frame k to frame j defined inside masked regions too.

    Unmasked pixels carry the block-matching estimate; masked pixels of frame k
    are filled by harmonic extension of the estimate at the mask border.
    """
    m_k = np.asarray(m_k, dtype=bool)
    m_j = np.asarray(m_j, dtype=bool)
    if m_k.all():
        raise FlowError("frame k is fully masked; no flow can be estimated")
    if m_j.all():
        raise FlowError("frame j is fully masked; no flow can be estimated")
    est = estimate_flow(x_k0, x_j0, valid_a=~m_k, valid_b=~m_j, **kwargs)
    if est.degenerate:
        log.warning("flow estimation found no texture; using zero flow")
        return est
    if not m_k.any():
        return est
    filled, _, _ = harmonic_fill(est.uv, m_k)
    return FlowField(filled)


def fb_consistency(f_kj, f_jk, tol: float = 1.0) -> np.ndarray:
    """Occlusion mask (1 = unreliable) from forward-backward round trips."""
    a = as_flow(f_kj)
    b = as_flow(f_jk)
    if a.shape != b.shape:
        raise FlowError(f"flow shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    xx, yy = _grid(h, w)
    x = xx + a[..., 0]
    y = yy + a[..., 1]
    outside = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
    back, _ = sample_bilinear(b, np.clip(x, 0, w - 1), np.clip(y, 0, h - 1))
    err = np.hypot(a[..., 0] + back[..., 0], a[..., 1] + back[..., 1])
    return (outside | (err > tol)).astype(np.uint8)
