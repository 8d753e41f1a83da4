"""Whole-sequence scheduling: propagate first, generate only what is left.

The scheduler starts at the frame whose mask overlaps the warped masks of the
other frames the most, fills it from its neighbours, generates whatever is
still missing, and then moves outward (s+1, s-1, s+2, ...). Completed frames
are used as propagation sources before still-corrupted ones, so generated
content travels to the rest of the video.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Protocol

import numpy as np

from .diffusion import Denoiser, DiffusionSchedule, sample
from .flowlab import FlowError, complete_flow, fb_consistency, sample_bilinear, zero_flow
from .imaging import VideoSequence
from .metrics import MetricReport, evaluate
from .noiseopt import DECAY, ETA0, GAMMA, STEPS, NoiseOptProblem, cond_loss, optimize_noise, paste_back
from .propagate import PropagationState, propagate_from, reference_order

log = logging.getLogger(__name__)

VARIANTS = ("full", "per-frame", "pp-only", "no-opt")
FLOW_SOURCES = ("gt", "estimated")


class ConfigError(ValueError):
    pass


@dataclass
class InpaintConfig:
    gamma: float = GAMMA
    eta0: float = ETA0
    decay: float = DECAY
    steps: int = STEPS
    flow: str = "gt"
    occlusion_gate: bool = True
    variant: str = "full"
    seed: int = 0
    color_compensation: bool = True
    fb_tol: float = 1.0
    all_pairs: bool = False
    early_stop: float | None = 1e-6

    def validate(self) -> list[str]:
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"variant {self.variant!r} not in {VARIANTS}")
        if self.flow not in FLOW_SOURCES:
            errs.append(f"flow {self.flow!r} not in {FLOW_SOURCES}")
        if self.gamma < 0:
            errs.append("gamma must be >= 0")
        if self.eta0 <= 0:
            errs.append("eta0 must be > 0")
        if not (0 < self.decay <= 1):
            errs.append("decay must lie in (0, 1]")
        if self.steps < 1:
            errs.append("steps must be >= 1")
        if self.fb_tol <= 0:
            errs.append("fb_tol must be > 0")
        return errs

    def check(self) -> "InpaintConfig":
        errs = self.validate()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InpaintConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config fields {unknown}")
        return cls(**d)


# ---------------------------------------------------------------------------
# flow providers


class FlowProvider(Protocol):
    source: str

    def flow(self, k: int, j: int) -> np.ndarray: ...

    def occlusion(self, k: int, j: int) -> np.ndarray: ...


class SceneFlows:
    """Exact flows and occlusions from a synthetic scene."""

    source = "gt"

    def __init__(self, scene):
        self.scene = scene

    def flow(self, k, j):
        return self.scene.flow(k, j)

    def occlusion(self, k, j):
        return self.scene.occlusion(k, j)


class ZeroFlows:
    """Static camera, nothing moves."""

    source = "gt"

    def __init__(self, h: int, w: int):
        self.h, self.w = h, w

    def flow(self, k, j):
        return zero_flow(self.h, self.w)

    def occlusion(self, k, j):
        return np.zeros((self.h, self.w), np.uint8)


class EstimatedFlows:
    """Completed block-matching flows, computed on demand and cached."""

    source = "estimated"

    def __init__(self, seq: VideoSequence, tol: float = 1.0, all_pairs: bool = False):
        self.frames = seq.masked_frames()
        self.masks = seq.masks
        self.tol = tol
        self._flows: dict[tuple[int, int], np.ndarray] = {}
        self._occl: dict[tuple[int, int], np.ndarray] = {}
        if all_pairs:
            n = len(seq)
            for k in range(n):
                for j in range(n):
                    if k != j:
                        self.flow(k, j)

    def flow(self, k, j):
        if (k, j) not in self._flows:
            try:
                f = complete_flow(self.frames[k], self.frames[j], self.masks[k], self.masks[j]).uv
            except FlowError as exc:
                log.warning("flow %d->%d unavailable (%s); using zero flow", k, j, exc)
                f = zero_flow(*self.masks.shape[1:])
            self._flows[(k, j)] = f
        return self._flows[(k, j)]

    def occlusion(self, k, j):
        if (k, j) not in self._occl:
            self._occl[(k, j)] = fb_consistency(self.flow(k, j), self.flow(j, k), self.tol)
        return self._occl[(k, j)]


# ---------------------------------------------------------------------------
# scheduling


def warp_mask(mask, flow) -> np.ndarray:
    """Bilinearly warp a binary mask along ``flow`` and threshold at 0.5."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    yy, xx = np.mgrid[0:h, 0:w]
    vals, _ = sample_bilinear(m, xx + flow[..., 0], yy + flow[..., 1])
    return (vals >= 0.5).astype(np.uint8)


def start_frame_scores(seq: VideoSequence, flows: FlowProvider) -> np.ndarray:
    masks = seq.masks
    n = len(seq)
    scores = np.zeros(n, dtype=np.int64)
    for k in range(n):
        if not masks[k].any():
            continue
        for j in range(n):
            if j == k or not masks[j].any():
                continue
            scores[k] += int(np.sum(masks[k] & warp_mask(masks[j], flows.flow(k, j))))
    return scores


def select_start_frame(seq: VideoSequence, flows: FlowProvider) -> int:
    """Frame with the most mask overlap; ties go to the larger mask, then the smaller index."""
    scores = start_frame_scores(seq, flows)
    areas = seq.masks.reshape(len(seq), -1).sum(axis=1).astype(np.int64)
    return min(range(len(seq)), key=lambda k: (-scores[k], -areas[k], k))


def visit_order(start: int, n: int) -> list[int]:
    order = [start]
    for d in range(1, n):
        for k in (start + d, start - d):
            if 0 <= k < n:
                order.append(k)
    return order


@dataclass
class FrameRecord:
    index: int
    invalid_before: int
    invalid_after_propagation: int
    generated: bool = False
    iterations: int = 0
    cond_loss_initial: float | None = None
    cond_loss_final: float | None = None
    sources: list = field(default_factory=list)  # [source index, pixels filled]


@dataclass
class InpaintReport:
    variant: str
    flow_source: str
    start_frame: int
    start_scores: list[int]
    visit_order: list[int]
    frames: list[FrameRecord]
    residual_invalid: list[int]
    config: dict
    schedule: dict
    wall_clock: float = 0.0

    @property
    def n_generation_runs(self) -> int:
        return sum(r.generated for r in self.frames)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        d["n_generation_runs"] = self.n_generation_runs
        if not include_timing:
            d.pop("wall_clock")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


def _frame_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, k])


def _optimize(state: PropagationState, k: int, config: InpaintConfig, denoiser, sched, traces):
    problem = NoiseOptProblem(state.filled, state.invalid, config.gamma, config.steps, config.eta0,
                              config.decay, config.early_stop)
    trace = optimize_noise(problem, denoiser, sched, _frame_rng(config.seed, k))
    traces[k] = trace
    out = paste_back(trace.y_hat, state.filled, state.invalid)
    losses = trace.cond_losses
    final = cond_loss(trace.y_hat, state.filled, state.invalid)
    return out, len(trace), float(losses[0]), final


def _unoptimized(state: PropagationState, z: np.ndarray, denoiser, sched):
    y = sample(denoiser, z, sched, cond=state.filled)
    loss = cond_loss(y, state.filled, state.invalid)
    return paste_back(y, state.filled, state.invalid), loss


def _propagate_all(k, state, sources, flows, config, record):
    for j, src, src_mask in sources:
        if not state.invalid.any():
            break
        occl = flows.occlusion(k, j) if config.occlusion_gate else None
        before = state.n_invalid
        state = propagate_from(state, src, src_mask, flows.flow(k, j), occl, j, config.color_compensation)
        if state.n_invalid < before:
            record.sources.append([j, before - state.n_invalid])
    return state


def inpaint_sequence(seq: VideoSequence, config: InpaintConfig, denoiser: Denoiser | None,
                     sched: DiffusionSchedule, flows: FlowProvider, traces: dict | None = None):
    """Complete every masked frame; returns ``(VideoSequence, InpaintReport)``.

    ``traces`` (optional dict) receives the optimization trace per generated frame.
    """
    config.check()
    t0 = time.perf_counter()
    traces = {} if traces is None else traces
    n = len(seq)
    if denoiser is None and config.variant != "pp-only":
        raise ConfigError(f"variant {config.variant!r} needs a denoiser")
    masked = seq.masked_frames()
    masks = seq.masks
    corrupted = [k for k in range(n) if masks[k].any()]

    scores = start_frame_scores(seq, flows) if corrupted else np.zeros(n, np.int64)
    areas = masks.reshape(n, -1).sum(axis=1).astype(np.int64)
    start = min(range(n), key=lambda k: (-scores[k], -areas[k], k))
    order = visit_order(start, n)

    out = masked.copy()
    out_masks = np.zeros_like(masks)
    records = {k: FrameRecord(k, int(areas[k]), int(areas[k])) for k in range(n)}

    if config.variant == "per-frame":
        for k in corrupted:
            state = PropagationState.initial(masked[k], masks[k])
            r = records[k]
            out[k], r.iterations, r.cond_loss_initial, r.cond_loss_final = _optimize(state, k, config, denoiser, sched, traces)
            r.generated = True
    elif config.variant == "no-opt":
        states = {}
        for k in order:
            if k not in corrupted:
                continue
            state = PropagationState.initial(masked[k], masks[k])
            srcs = [(j, masked[j], masks[j]) for j in reference_order(k, range(n))]
            states[k] = _propagate_all(k, state, srcs, flows, config, records[k])
            records[k].invalid_after_propagation = states[k].n_invalid
        z = np.random.default_rng(config.seed).standard_normal(masked.shape[1:])
        for k in order:
            if k not in states:
                continue
            st = states[k]
            if st.invalid.any():
                out[k], loss = _unoptimized(st, z, denoiser, sched)
                records[k].generated = True
                records[k].cond_loss_initial = records[k].cond_loss_final = loss
            else:
                out[k] = st.filled
    else:
        done = set(range(n)) - set(corrupted)
        for k in order:
            if k in done:
                continue
            r = records[k]
            state = PropagationState.initial(masked[k], masks[k])
            others = reference_order(k, range(n))
            srcs = [(j, out[j], out_masks[j]) for j in others if j in done]
            srcs += [(j, masked[j], masks[j]) for j in others if j not in done]
            state = _propagate_all(k, state, srcs, flows, config, r)
            r.invalid_after_propagation = state.n_invalid
            if not state.invalid.any():
                out[k] = state.filled
            elif config.variant == "full":
                out[k], r.iterations, r.cond_loss_initial, r.cond_loss_final = _optimize(state, k, config, denoiser, sched, traces)
                r.generated = True
            elif denoiser is not None:
                z = _frame_rng(config.seed, k).standard_normal(masked.shape[1:])
                out[k], loss = _unoptimized(state, z, denoiser, sched)
                r.generated = True
                r.cond_loss_initial = r.cond_loss_final = loss
            else:
                # partial completion: keep the holes
                out[k] = state.filled
                out_masks[k] = state.invalid
                log.info("frame %d keeps %d unreachable pixels", k, state.n_invalid)
                continue
            done.add(k)

    report = InpaintReport(
        variant=config.variant,
        flow_source=flows.source,
        start_frame=int(start),
        start_scores=[int(s) for s in scores],
        visit_order=order,
        frames=[records[k] for k in range(n)],
        residual_invalid=[int(m.sum()) for m in out_masks],
        config=config.to_dict(),
        schedule=sched.to_dict(),
        wall_clock=time.perf_counter() - t0,
    )
    return VideoSequence(out, out_masks), report


# ---------------------------------------------------------------------------
# ablation


def run_ablation(seq: VideoSequence, clean, config: InpaintConfig, denoiser: Denoiser, sched: DiffusionSchedule,
                 flows: FlowProvider, metric_flows, metric_occl=None, variants=VARIANTS) -> dict:
    """Run each variant on ``seq`` and score it against ``clean``.

    ``metric_flows[k]`` is the flow from frame k+1 to frame k used by E_warp.
    Returns ``{variant: (MetricReport, InpaintReport)}``.
    """
    if clean is None:
        raise ConfigError("ablation needs the clean ground-truth frames")
    results = {}
    for v in variants:
        cfg = InpaintConfig(**{**config.to_dict(), "variant": v})
        done, rep = inpaint_sequence(seq, cfg, denoiser, sched, flows)
        results[v] = (evaluate(done.frames, clean, metric_flows, metric_occl, flows.source), rep)
    return results


def _scene_ablation(args):
    spec, config, prior, sched, scene_seed = args
    from .diffusion import GMMDenoiser
    from .synthverse import generate

    scene = generate(spec, scene_seed)
    seq = scene.corrupted()
    flows = SceneFlows(scene) if config.flow == "gt" else EstimatedFlows(seq, config.fb_tol, config.all_pairs)
    res = run_ablation(seq, scene.clean, config, GMMDenoiser(prior, sched), sched, flows,
                       scene.flows_bwd, scene.occl_bwd)
    return {v: m.summary() for v, (m, _) in res.items()}


def ablation_suite(specs, config: InpaintConfig, prior, sched: DiffusionSchedule, scene_seed: int = 0,
                   jobs: int = 1) -> tuple[list[dict], list[dict]]:
    """Per-scene rows and the per-variant median table over a scene list."""
    tasks = [(s, config, prior, sched, scene_seed) for s in specs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            per_scene = list(ex.map(_scene_ablation, tasks))
    else:
        per_scene = [_scene_ablation(t) for t in tasks]
    rows = [{"scene": i, "variant": v, **m} for i, res in enumerate(per_scene) for v, m in res.items()]
    table = []
    for v in VARIANTS:
        sel = [r for r in rows if r["variant"] == v]
        table.append({"variant": v, **{k: float(np.median([r[k] for r in sel])) for k in ("psnr", "ssim", "e_warp")}})
    return rows, table


def table_row(table: list[dict], variant: str) -> dict:
    return next(r for r in table if r["variant"] == variant)


__all__ = [
    "InpaintConfig", "InpaintReport", "FrameRecord", "ConfigError", "VARIANTS",
    "SceneFlows", "ZeroFlows", "EstimatedFlows", "select_start_frame", "start_frame_scores",
    "visit_order", "warp_mask", "inpaint_sequence", "run_ablation", "ablation_suite", "MetricReport",
]
