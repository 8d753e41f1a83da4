"""Slow, literal reference implementations used only by the tests."""

import math

import numpy as np


def bilinear_pixel(src, src_valid, x, y):
    """Return (value, ok) for one location, tap by tap."""
    h, w = src.shape[:2]
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    val = np.zeros(src.shape[2])
    ok = True
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        if wt == 0:
            continue
        xi, yi = x0 + dx, y0 + dy
        if not (0 <= xi < w and 0 <= yi < h) or not src_valid[yi, xi]:
            ok = False
            continue
        val += wt * src[yi, xi]
    return val, ok


def propagate_oracle(filled, invalid, provenance, orig_mask, src, src_mask, flow, occl, j, compensate=True):
    """One propagation step written out per pixel."""
    h, w, C = filled.shape
    occl = np.zeros((h, w), np.uint8) if occl is None else occl
    warped = np.zeros_like(filled)
    valid = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            warped[y, x], valid[y, x] = bilinear_pixel(src, src_mask == 0, x + flow[y, x, 0], y + flow[y, x, 1])
    m_jk = np.zeros((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            m_jk[y, x] = invalid[y, x] * int(valid[y, x]) * (1 - occl[y, x])
    value = warped.copy()
    if compensate and m_jk.any():
        ov = [(y, x) for y in range(h) for x in range(w) if valid[y, x] and not occl[y, x] and orig_mask[y, x] == 0]
        if len(ov) >= 16:
            for c in range(C):
                A = np.array([[warped[y, x, c], 1.0] for y, x in ov])
                b = np.array([filled[y, x, c] for y, x in ov])
                (a_c, b_c), *_ = np.linalg.lstsq(A, b, rcond=None)
                value[..., c] = np.clip(a_c * warped[..., c] + b_c, 0, 1)
    out = filled.copy()
    inv = invalid.copy()
    prov = provenance.copy()
    for y in range(h):
        for x in range(w):
            if m_jk[y, x]:
                out[y, x] = value[y, x]
                inv[y, x] = invalid[y, x] - 1
                prov[y, x] = j
    return out, inv, prov, m_jk


def reachable_oracle(masks, flows, occl, k):
    """Pixels of frame k with at least one valid, non-occluded correspondence
    in some other frame (all-or-nothing bilinear footprint)."""
    n, h, w = masks.shape
    reach = np.zeros((h, w), bool)
    ones = np.ones((h, w, 1))
    for j in range(n):
        if j == k:
            continue
        f = flows(k, j)
        o = occl(k, j)
        for y in range(h):
            for x in range(w):
                if o[y, x]:
                    continue
                _, ok = bilinear_pixel(ones, masks[j] == 0, x + f[y, x, 0], y + f[y, x, 1])
                reach[y, x] |= ok
    return reach & (masks[k] == 1)


def overlap_oracle(masks, flows, k):
    """Start-frame score of frame k counted pixel by pixel."""
    n, h, w = masks.shape
    total = 0
    if not masks[k].any():
        return 0
    for j in range(n):
        if j == k or not masks[j].any():
            continue
        f = flows(k, j)
        for y in range(h):
            for x in range(w):
                if not masks[k, y, x]:
                    continue
                v, _ = bilinear_pixel(masks[j][..., None].astype(float), np.ones((h, w), bool),
                                      x + f[y, x, 0], y + f[y, x, 1])
                total += int(v[0] >= 0.5)
    return total
