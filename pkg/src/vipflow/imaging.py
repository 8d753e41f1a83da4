"""Frame, mask and video containers plus PNG directory I/O.

Frames are float64 arrays of shape (H, W, C) with values in [0, 1]; masks are
uint8 arrays of shape (H, W) with 1 marking invalid pixels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


class ImagingError(ValueError):
    pass


def as_frame(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ImagingError(f"frame must be (H, W) or (H, W, 1|3), got shape {a.shape}")
    return a


def as_mask(data) -> np.ndarray:
    m = np.asarray(data)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[..., 0]
    if m.ndim != 2:
        raise ImagingError(f"mask must be 2-D, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ImagingError("mask values must be exactly 0 or 1")
    return m.astype(np.uint8)


def apply_mask(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the masked pixels: ``frame * (1 - mask)``."""
    frame = as_frame(frame)
    mask = as_mask(mask)
    if frame.shape[:2] != mask.shape:
        raise ImagingError(f"frame shape {frame.shape[:2]} does not match mask shape {mask.shape}")
    return np.where(mask[..., None] == 1, 0.0, frame)


@dataclass(frozen=True)
class VideoSequence:
    frames: np.ndarray  # (N, H, W, C)
    masks: np.ndarray  # (N, H, W)

    def __post_init__(self):
        frames = [as_frame(f) for f in self.frames]
        masks = [as_mask(m) for m in self.masks]
        if len(frames) < 1:
            raise ImagingError("a sequence needs at least one frame")
        if len(frames) != len(masks):
            raise ImagingError(f"{len(frames)} frames but {len(masks)} masks")
        shape = frames[0].shape
        bad = [i for i, f in enumerate(frames) if f.shape != shape]
        if bad:
            raise ImagingError(f"frames {bad} differ in shape from frame 0 {shape}")
        bad = [i for i, m in enumerate(masks) if m.shape != shape[:2]]
        if bad:
            raise ImagingError(f"masks {bad} do not match frame size {shape[:2]}")
        if shape[0] < 8 or shape[1] < 8:
            raise ImagingError(f"frames must be at least 8x8, got {shape[:2]}")
        f = np.stack(frames)
        m = np.stack(masks)
        f.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "frames", f)
        object.__setattr__(self, "masks", m)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    def masked_frames(self) -> np.ndarray:
        return np.where(self.masks[..., None] == 1, 0.0, self.frames)

    def replace(self, frames=None, masks=None) -> "VideoSequence":
        return VideoSequence(self.frames if frames is None else frames, self.masks if masks is None else masks)


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def write_png(frame: np.ndarray, path) -> None:
    q = quantize(as_frame(frame))
    img = Image.fromarray(q[..., 0] if q.shape[2] == 1 else q, mode="L" if q.shape[2] == 1 else "RGB")
    img.save(path)


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
            a = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise ImagingError(f"unreadable image {path}: {exc}") from exc
    return as_frame(a.astype(np.float64) / 255.0)


def write_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(as_mask(mask) * 255, mode="L").save(path)


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            a = np.asarray(img.convert("L"))
    except (OSError, ValueError) as exc:
        raise ImagingError(f"unreadable mask {path}: {exc}") from exc
    return (a >= 128).astype(np.uint8)


_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")
_MASK_RE = re.compile(r"^mask_(\d+)\.png$")


def _index(directory: Path, pattern: re.Pattern) -> dict[int, Path]:
    return {int(m.group(1)): p for p in directory.iterdir() if (m := pattern.match(p.name))}


def save_sequence(seq: VideoSequence, path, frames: Sequence[np.ndarray] | None = None) -> None:
    """Write ``frame_%04d.png`` / ``mask_%04d.png`` pairs into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    data = seq.frames if frames is None else frames
    for i in range(len(seq)):
        write_png(data[i], out / f"frame_{i:04d}.png")
        write_mask(seq.masks[i], out / f"mask_{i:04d}.png")


def load_sequence(path, require_masks: bool = True) -> VideoSequence:
    d = Path(path)
    if not d.is_dir():
        raise ImagingError(f"{d} is not a directory")
    frames = _index(d, _FRAME_RE)
    masks = _index(d, _MASK_RE)
    if not frames:
        raise ImagingError(f"no frame_XXXX.png files in {d}")
    unmatched = sorted(set(frames) ^ set(masks))
    if unmatched and (require_masks or masks):
        names = [frames[i].name if i in frames else masks[i].name for i in unmatched]
        raise ImagingError(f"unmatched frame/mask files: {', '.join(names)}")
    order = sorted(frames)
    imgs = [read_png(frames[i]) for i in order]
    sizes = {im.shape for im in imgs}
    if len(sizes) > 1:
        ref = imgs[0].shape
        bad = [order[k] for k, im in enumerate(imgs) if im.shape != ref]
        raise ImagingError(f"inconsistent frame dimensions at indices {bad} (frame {order[0]} is {ref})")
    if masks:
        ms = [read_mask(masks[i]) for i in order]
        bad = [order[k] for k, m in enumerate(ms) if m.shape != imgs[0].shape[:2]]
        if bad:
            raise ImagingError(f"mask dimensions disagree with frames at indices {bad}")
    else:
        ms = [np.zeros(imgs[0].shape[:2], np.uint8) for _ in order]
    return VideoSequence(np.stack(imgs), np.stack(ms))
