"""Flow-guided pixel propagation into the masked area of a target frame."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .flowlab import as_flow, sample_bilinear
from .imaging import as_frame, as_mask

log = logging.getLogger(__name__)

NONE = -1
MIN_OVERLAP = 16


class PropagationError(ValueError):
    pass


@dataclass(frozen=True)
class WarpResult:
    image: np.ndarray  # (H, W, C)
    validity: np.ndarray  # (H, W) uint8, 1 = sample usable


@dataclass(frozen=True)
class PropagationState:
    filled: np.ndarray  # (H, W, C); zero wherever ``invalid`` is 1
    invalid: np.ndarray  # (H, W) uint8
    provenance: np.ndarray  # (H, W) int, source frame index or NONE
    mask: np.ndarray  # (H, W) uint8, the target's original mask

    @classmethod
    def initial(cls, frame, mask) -> "PropagationState":
        frame = as_frame(frame)
        mask = as_mask(mask)
        if frame.shape[:2] != mask.shape:
            raise PropagationError(f"frame {frame.shape[:2]} vs mask {mask.shape}")
        filled = np.where(mask[..., None] == 1, 0.0, frame)
        return cls(filled, mask.copy(), np.full(mask.shape, NONE, dtype=np.int64), mask.copy())

    @property
    def n_invalid(self) -> int:
        return int(self.invalid.sum())


@dataclass(frozen=True)
class ColorFit:
    gain: np.ndarray  # (C,)
    bias: np.ndarray  # (C,)
    identity: bool  # True when the overlap was too small to fit
    n_overlap: int


def backward_warp(src, src_valid, flow) -> WarpResult:
    src = as_frame(src)
    uv = as_flow(flow)
    h, w = src.shape[:2]
    if uv.shape[:2] != (h, w):
        raise PropagationError(f"flow {uv.shape[:2]} does not match frame {(h, w)}")
    valid = np.ones((h, w), np.uint8) if src_valid is None else np.asarray(src_valid)
    yy, xx = np.mgrid[0:h, 0:w]
    img, ok = sample_bilinear(src, xx + uv[..., 0], yy + uv[..., 1], valid)
    return WarpResult(np.where(ok[..., None], img, 0.0), ok.astype(np.uint8))


def fit_color(warped, target, overlap, min_overlap: int = MIN_OVERLAP) -> ColorFit:
    """Per-channel least-squares gain/bias mapping ``warped`` onto ``target``."""
    warped = as_frame(warped)
    target = as_frame(target)
    sel = np.asarray(overlap).astype(bool)
    n = int(sel.sum())
    C = warped.shape[2]
    if n < min_overlap:
        return ColorFit(np.ones(C), np.zeros(C), True, n)
    gain = np.ones(C)
    bias = np.zeros(C)
    for c in range(C):
        x = warped[..., c][sel]
        y = target[..., c][sel]
        xm, ym = x.mean(), y.mean()
        sxx = np.sum((x - xm) ** 2)
        if sxx <= 1e-12 * n:
            # flat source: only the offset is identifiable
            bias[c] = ym - xm
        else:
            gain[c] = np.sum((x - xm) * (y - ym)) / sxx
            bias[c] = ym - gain[c] * xm
    return ColorFit(gain, bias, False, n)


def color_compensate(warped, target, overlap, fill_region, min_overlap: int = MIN_OVERLAP):
    """Apply the fitted affine color correction on ``fill_region``.

    Returns ``(frame, fit)``; pixels outside the fill region are returned as-is.
    """
    fit = fit_color(warped, target, overlap, min_overlap)
    warped = as_frame(warped)
    if fit.identity:
        log.warning("color compensation skipped: only %d overlap pixels", fit.n_overlap)
        return warped.copy(), fit
    corrected = np.clip(warped * fit.gain + fit.bias, 0.0, 1.0)
    region = np.asarray(fill_region).astype(bool)[..., None]
    return np.where(region, corrected, warped), fit


def propagate_from(state: PropagationState, src, src_mask, flow, occl=None, src_index: int = 0,
                   compensate: bool = True) -> PropagationState:
    """Fill invalid target pixels from one reference frame.

    The propagated set is ``invalid * warp_validity * (1 - occl)``; it is
    removed from the invalid mask and its pixels are copied (after optional
    color compensation) into ``filled``.
    """
    src = as_frame(src)
    src_mask = as_mask(src_mask)
    if src.shape != state.filled.shape:
        raise PropagationError(f"source frame {src.shape} vs target {state.filled.shape}")
    if src_mask.shape != state.invalid.shape:
        raise PropagationError(f"source mask {src_mask.shape} vs target {state.invalid.shape}")
    occl = np.zeros_like(state.invalid) if occl is None else as_mask(occl)

    w = backward_warp(src, 1 - src_mask, flow)
    reliable = w.validity * (1 - occl)
    m_jk = state.invalid * reliable
    if not m_jk.any():
        return state
    image = w.image
    if compensate:
        overlap = reliable * (1 - state.mask)
        image, _ = color_compensate(image, state.filled, overlap, m_jk)
    take = m_jk[..., None] == 1
    filled = np.where(take, image, state.filled)
    provenance = np.where(m_jk == 1, src_index, state.provenance)
    return replace(state, filled=filled, invalid=(state.invalid - m_jk).astype(np.uint8), provenance=provenance)


def reference_order(k: int, candidates) -> list[int]:
    """Nearest first by |j - k|, ties toward the smaller index."""
    return sorted((j for j in candidates if j != k), key=lambda j: (abs(j - k), j))


def save_provenance(provenance: np.ndarray, path) -> None:
    """16-bit PNG holding source index + 1 (0 = not propagated)."""
    data = (np.asarray(provenance) + 1).astype(np.uint16)
    Image.fromarray(data).save(path)


def load_provenance(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img).astype(np.int64) - 1
