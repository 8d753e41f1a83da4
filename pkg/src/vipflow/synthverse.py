"""Deterministic synthetic videos with exact flows and occlusions.

A scene is a periodic value-noise background that translates by ``pan``
pixels per frame, with rectangular textured sprites moving on top. Because
every pixel's layer and motion are known, the flow between any two frames and
the occluded pixels are computed exactly rather than estimated.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .imaging import VideoSequence, apply_mask, as_mask

MASK_KINDS = ("stationary", "sprite", "moving")
TEXTURE_LO, TEXTURE_HI = 0.15, 0.85


class SceneSpecError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid scene spec: " + "; ".join(errors))
        self.errors = errors


@dataclass
class SpriteSpec:
    texture_seed: int
    size: tuple[int, int]  # (height, width)
    velocity: tuple[float, float]  # (vx, vy) px/frame
    start: tuple[float, float]  # (x, y) of the top-left corner at frame 0


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_frames: int = 8
    channels: int = 3
    texture_seed: int = 0
    texture_cell: int = 8
    pan: tuple[float, float] = (1.0, 0.0)  # apparent background motion, px/frame
    sprites: list[SpriteSpec] = field(default_factory=list)
    mask_kind: str = "stationary"
    mask_fraction: float = 0.2
    mask_velocity: tuple[int, int] = (0, 0)  # only for mask_kind == "moving"
    brightness_ramp: float = 0.0  # additive offset per frame
    wrap: bool = False  # sprites wrap around the frame edges

    def validate(self) -> list[str]:
        errs = []
        if self.height < 8 or self.width < 8:
            errs.append(f"resolution {self.height}x{self.width} below 8x8")
        if self.n_frames < 1:
            errs.append("n_frames must be >= 1")
        if self.channels not in (1, 3):
            errs.append("channels must be 1 or 3")
        if self.texture_cell < 2:
            errs.append("texture_cell must be >= 2")
        if self.mask_kind not in MASK_KINDS:
            errs.append(f"mask_kind {self.mask_kind!r} not in {MASK_KINDS}")
        if not (0 < self.mask_fraction <= 0.9):
            errs.append(f"mask_fraction {self.mask_fraction} outside (0, 0.9]")
        if self.mask_kind == "sprite" and not self.sprites:
            errs.append("mask_kind 'sprite' needs at least one sprite")
        lo = TEXTURE_LO + min(0.0, self.brightness_ramp * (self.n_frames - 1))
        hi = TEXTURE_HI + max(0.0, self.brightness_ramp * (self.n_frames - 1))
        if lo < 0 or hi > 1:
            errs.append(f"brightness_ramp {self.brightness_ramp} pushes values outside [0, 1]")
        for i, s in enumerate(self.sprites):
            h, w = s.size
            if h < 1 or w < 1 or h > self.height or w > self.width:
                errs.append(f"sprite {i}: size {s.size} does not fit the frame")
                continue
            if self.wrap:
                continue
            for t in (0, self.n_frames - 1):
                x = s.start[0] + t * s.velocity[0]
                y = s.start[1] + t * s.velocity[1]
                if x < 0 or y < 0 or x + w > self.width or y + h > self.height:
                    errs.append(f"sprite {i}: out of bounds at frame {t} (x={x:g}, y={y:g}) and wrap is off")
                    break
        return errs

    def check(self) -> "SceneSpec":
        errs = self.validate()
        if errs:
            raise SceneSpecError(errs)
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise SceneSpecError([f"unknown field {k!r}" for k in unknown])
        sprites = []
        for i, s in enumerate(d.pop("sprites", [])):
            try:
                sprites.append(SpriteSpec(int(s["texture_seed"]), tuple(s["size"]), tuple(s["velocity"]), tuple(s["start"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise SceneSpecError([f"sprite {i}: malformed ({exc})"]) from exc
        for key in ("pan", "mask_velocity"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(sprites=sprites, **d)
        except TypeError as exc:
            raise SceneSpecError([str(exc)]) from exc

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SceneSpecError([f"not valid JSON: {exc}"]) from exc
        if not isinstance(d, dict):
            raise SceneSpecError(["top level must be an object"])
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# textures


class ValueNoise:
    """Periodic two-octave value noise evaluated at arbitrary coordinates."""

    def __init__(self, seed: int, cell: int, channels: int, period_cells: int = 32):
        rng = np.random.default_rng(seed)
        self.cell = cell
        self.period = period_cells
        self.coarse = rng.random((period_cells, period_cells, channels))
        self.fine = rng.random((2 * period_cells, 2 * period_cells, channels))

    @staticmethod
    def _lookup(grid, x, y, cell):
        n = grid.shape[0]
        gx, gy = x / cell, y / cell
        x0, y0 = np.floor(gx).astype(np.int64), np.floor(gy).astype(np.int64)
        fx, fy = gx - x0, gy - y0
        sx = fx * fx * (3 - 2 * fx)
        sy = fy * fy * (3 - 2 * fy)
        x0m, x1m = x0 % n, (x0 + 1) % n
        y0m, y1m = y0 % n, (y0 + 1) % n
        top = grid[y0m, x0m] * (1 - sx)[..., None] + grid[y0m, x1m] * sx[..., None]
        bot = grid[y1m, x0m] * (1 - sx)[..., None] + grid[y1m, x1m] * sx[..., None]
        return top * (1 - sy)[..., None] + bot * sy[..., None]

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        v = (2 * self._lookup(self.coarse, x, y, self.cell) + self._lookup(self.fine, x, y, self.cell / 2)) / 3
        return TEXTURE_LO + (TEXTURE_HI - TEXTURE_LO) * v


# ---------------------------------------------------------------------------
# generation


@dataclass
class SynthScene:
    spec: SceneSpec
    clean: np.ndarray  # (N, H, W, C)
    masks: np.ndarray  # (N, H, W)
    layers: np.ndarray  # (N, H, W) int, 0 = background, i+1 = sprite i

    @property
    def video(self) -> VideoSequence:
        """Clean frames paired with the scripted masks."""
        return VideoSequence(self.clean, self.masks)

    def corrupted(self) -> VideoSequence:
        return corrupt(VideoSequence(self.clean, np.zeros_like(self.masks)), self.masks)

    def _sprite_pos(self, i: int, t: int) -> np.ndarray:
        s = self.spec.sprites[i]
        return np.array([s.start[0] + t * s.velocity[0], s.start[1] + t * s.velocity[1]])

    def flow(self, k: int, j: int) -> np.ndarray:
        """Exact flow from frame k to frame j (backward-warp convention)."""
        spec = self.spec
        H, W = spec.height, spec.width
        out = np.zeros((H, W, 2))
        out[...] = (j - k) * np.asarray(spec.pan, dtype=np.float64)
        lay = self.layers[k]
        yy, xx = np.mgrid[0:H, 0:W]
        for i, s in enumerate(spec.sprites):
            on = lay == i + 1
            if not on.any():
                continue
            d = (j - k) * np.asarray(s.velocity, dtype=np.float64)
            if spec.wrap:
                tx = np.mod(xx[on] + d[0], W)
                ty = np.mod(yy[on] + d[1], H)
                out[on, 0] = tx - xx[on]
                out[on, 1] = ty - yy[on]
            else:
                out[on] = d
        return out

    def occlusion(self, k: int, j: int) -> np.ndarray:
        """1 where frame k's pixel is not visible as the same surface in frame j."""
        H, W = self.spec.height, self.spec.width
        f = self.flow(k, j)
        yy, xx = np.mgrid[0:H, 0:W]
        x = xx + f[..., 0]
        y = yy + f[..., 1]
        occ = (x < 0) | (x > W - 1) | (y < 0) | (y > H - 1)
        x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
        fx, fy = x - x0, y - y0
        lay_k, lay_j = self.layers[k], self.layers[j]
        for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
            xi = np.clip(x0 + dx, 0, W - 1)
            yi = np.clip(y0 + dy, 0, H - 1)
            occ |= (wt > 0) & (lay_j[yi, xi] != lay_k)
        return occ.astype(np.uint8)

    @cached_property
    def flows_fwd(self) -> list[np.ndarray]:
        return [self.flow(k, k + 1) for k in range(self.spec.n_frames - 1)]

    @cached_property
    def flows_bwd(self) -> list[np.ndarray]:
        """``f_{k+1 -> k}``: what the warping error consumes."""
        return [self.flow(k + 1, k) for k in range(self.spec.n_frames - 1)]

    @cached_property
    def occl_bwd(self) -> list[np.ndarray]:
        return [self.occlusion(k + 1, k) for k in range(self.spec.n_frames - 1)]

    @cached_property
    def occl_fwd(self) -> list[np.ndarray]:
        return [self.occlusion(k, k + 1) for k in range(self.spec.n_frames - 1)]


def _mask_block(H, W, fraction, offset=(0, 0)):
    count = int(round(fraction * H * W))
    bw = min(W, max(1, int(round(np.sqrt(fraction) * W))))
    rows = int(np.ceil(count / bw))
    top = (H - rows) // 2 + offset[1]
    left = (W - bw) // 2 + offset[0]
    m = np.zeros((H, W), np.uint8)
    idx = np.arange(count)
    ys = top + idx // bw
    xs = left + idx % bw
    keep = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
    m[ys[keep], xs[keep]] = 1
    return m


def generate(spec: SceneSpec, seed: int = 0) -> SynthScene:
    spec.check()
    H, W, N, C = spec.height, spec.width, spec.n_frames, spec.channels
    bg = ValueNoise(int(np.random.default_rng([seed, spec.texture_seed]).integers(2**31)), spec.texture_cell, C)
    sprite_tex = [
        ValueNoise(int(np.random.default_rng([seed, s.texture_seed, 1]).integers(2**31)), max(2, spec.texture_cell // 2), C)
        for s in spec.sprites
    ]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    clean = np.zeros((N, H, W, C))
    layers = np.zeros((N, H, W), np.int64)
    masks = np.zeros((N, H, W), np.uint8)
    for t in range(N):
        frame = bg(xx - t * spec.pan[0], yy - t * spec.pan[1])
        for i, s in enumerate(spec.sprites):
            px = s.start[0] + t * s.velocity[0]
            py = s.start[1] + t * s.velocity[1]
            qx, qy = xx - px, yy - py
            if spec.wrap:
                qx, qy = np.mod(qx, W), np.mod(qy, H)
            on = (qx >= 0) & (qx < s.size[1]) & (qy >= 0) & (qy < s.size[0])
            tex = sprite_tex[i](qx, qy)
            frame = np.where(on[..., None], tex, frame)
            layers[t][on] = i + 1
        clean[t] = frame + spec.brightness_ramp * t
        if spec.mask_kind == "stationary":
            masks[t] = _mask_block(H, W, spec.mask_fraction)
        elif spec.mask_kind == "moving":
            off = (int(round(t * spec.mask_velocity[0])), int(round(t * spec.mask_velocity[1])))
            masks[t] = _mask_block(H, W, spec.mask_fraction, off)
        else:
            fp = layers[t] == 1
            grown = fp.copy()
            grown[1:] |= fp[:-1]
            grown[:-1] |= fp[1:]
            grown[:, 1:] |= fp[:, :-1]
            grown[:, :-1] |= fp[:, 1:]
            masks[t] = grown
    return SynthScene(spec, np.clip(clean, 0.0, 1.0), masks, layers)


def corrupt(clean: VideoSequence, masks) -> VideoSequence:
    """Zero the masked pixels of every frame; the mask travels with the result."""
    masks = [as_mask(m) for m in masks]
    if len(masks) != len(clean):
        raise ValueError(f"{len(clean)} frames but {len(masks)} masks")
    for i, m in enumerate(masks):
        if m.shape != clean.frames[i].shape[:2]:
            raise ValueError(f"mask {i} shape {m.shape} vs frame {clean.frames[i].shape[:2]}")
    return VideoSequence(np.stack([apply_mask(f, m) for f, m in zip(clean.frames, masks)]), np.stack(masks))


def standard_suite(n: int = 10, size: int = 32, n_frames: int = 6, base_seed: int = 0) -> list[SceneSpec]:
    """Seeded scene variety used for the ablation runs."""
    rng = np.random.default_rng(base_seed)
    specs = []
    for i in range(n):
        pan = (float(rng.choice([-2, -1, 1, 2])), float(rng.choice([-1, 0, 0, 1])))
        sprites = []
        if i % 2 == 1:
            h = w = size // 4
            v = (float(rng.choice([-1, 1])), 0.0)
            x0 = size / 2 - w / 2 - v[0] * (n_frames - 1) / 2
            sprites.append(SpriteSpec(int(rng.integers(1000)), (h, w), v, (float(np.floor(x0)), float(size // 8))))
        specs.append(SceneSpec(height=size, width=size, n_frames=n_frames, channels=3,
                               texture_seed=int(rng.integers(1_000_000)), texture_cell=max(4, size // 8),
                               pan=pan, sprites=sprites, mask_kind="stationary",
                               mask_fraction=float(rng.uniform(0.15, 0.3))))
    return specs


def training_frames(n_scenes: int = 20, size: int = 32, n_frames: int = 6, base_seed: int = 1000) -> np.ndarray:
    """Clean frames from a disjoint seeded suite, for fitting priors."""
    specs = standard_suite(n_scenes, size, n_frames, base_seed)
    return np.concatenate([generate(s, base_seed + i).clean for i, s in enumerate(specs)])
