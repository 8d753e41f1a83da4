"""PSNR, SSIM and the flow warping error, plus a serializable report."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .flowlab import as_flow, sample_bilinear
from .imaging import as_frame

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_WIN = 11
C1 = 0.01**2
C2 = 0.03**2


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = as_frame(a)
    b = as_frame(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_maps(a, b):
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WIN:
        raise MetricError(f"frame {a.shape[:2]} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    # radius 5 at sigma 1.5 gives the 11x11 window
    filt = lambda x: gaussian_filter(x, SSIM_SIGMA, truncate=3.5, mode="reflect")
    pad = (SSIM_WIN - 1) // 2
    out = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        crop = (slice(pad, -pad), slice(pad, -pad))
        out.append((mx[crop], my[crop], vx[crop], vy[crop], cxy[crop]))
    return out


def ssim(a, b) -> float:
    """Gaussian-window SSIM, averaged over the valid interior and channels."""
    vals = []
    for mx, my, vx, vy, cxy in _ssim_maps(a, b):
        s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
        vals.append(s.mean())
    return float(np.mean(vals))


def ssim_terms(a, b) -> dict:
    """Mean luminance, contrast and structure terms (C3 = C2 / 2)."""
    c3 = C2 / 2
    lum, con, st = [], [], []
    for mx, my, vx, vy, cxy in _ssim_maps(a, b):
        sx = np.sqrt(np.maximum(vx, 0))
        sy = np.sqrt(np.maximum(vy, 0))
        lum.append(((2 * mx * my + C1) / (mx * mx + my * my + C1)).mean())
        con.append(((2 * sx * sy + C2) / (vx + vy + C2)).mean())
        st.append(((cxy + c3) / (sx * sy + c3)).mean())
    return {"luminance": float(np.mean(lum)), "contrast": float(np.mean(con)), "structure": float(np.mean(st))}


@dataclass
class WarpError:
    per_pair: list  # float or None for skipped pairs
    skipped: list[int]
    mean: float


def warp_error(frames, flows, occl=None) -> WarpError:
    """Mean over consecutive pairs of the squared error between frame k+1 and
    frame k backward-warped along ``flows[k]`` (= f_{k+1 -> k}).

    Occluded pixels and pixels whose bilinear footprint leaves the frame are
    excluded. Pairs with nothing left to compare are skipped and listed.
    """
    frames = [as_frame(f) for f in frames]
    if len(flows) != len(frames) - 1:
        raise MetricError(f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flows)}")
    h, w = frames[0].shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    per_pair, skipped = [], []
    for k, f in enumerate(flows):
        uv = as_flow(f)
        warped, ok = sample_bilinear(frames[k], xx + uv[..., 0], yy + uv[..., 1])
        keep = ok if occl is None or occl[k] is None else ok & (np.asarray(occl[k]) == 0)
        if not keep.any():
            per_pair.append(None)
            skipped.append(k)
            continue
        d = (frames[k + 1] - warped)[keep]
        per_pair.append(float(np.mean(d * d)))
    vals = [v for v in per_pair if v is not None]
    return WarpError(per_pair, skipped, float(np.mean(vals)) if vals else 0.0)


@dataclass
class MetricReport:
    psnr: list[float]
    psnr_mean: float
    ssim: list[float]
    ssim_mean: float
    e_warp: list
    e_warp_mean: float
    e_warp_skipped: list[int] = field(default_factory=list)
    flow_source: str = "gt"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def summary(self) -> dict:
        return {"psnr": self.psnr_mean, "ssim": self.ssim_mean, "e_warp": self.e_warp_mean}


def evaluate(pred, gt, flows, occl=None, flow_source: str = "gt") -> MetricReport:
    """Per-frame PSNR/SSIM of ``pred`` against ``gt`` and the warping error of ``pred``."""
    if len(pred) != len(gt):
        raise MetricError(f"{len(pred)} predicted frames vs {len(gt)} ground-truth frames")
    p = [psnr(a, b) for a, b in zip(pred, gt)]
    s = [ssim(a, b) for a, b in zip(pred, gt)]
    we = warp_error(pred, flows, occl)
    return MetricReport(p, float(np.mean(p)), s, float(np.mean(s)), we.per_pair, we.mean, we.skipped, flow_source)


def write_table_csv(rows: list[dict], path, columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({c: r[c] for c in columns})
