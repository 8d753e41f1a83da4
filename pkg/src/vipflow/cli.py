"""Command-line driver.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Set ``VIPFLOW_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import DiffusionError, DiffusionSchedule, GMMDenoiser, fit_gmm_prior, load_prior, save_prior
from .flowlab import FlowError, complete_flow, fb_consistency, read_flo, write_flo
from .imaging import ImagingError, load_sequence, read_mask, save_sequence, write_mask
from .metrics import evaluate, write_table_csv
from .pipeline import (FLOW_SOURCES, VARIANTS, ConfigError, EstimatedFlows, InpaintConfig, SceneFlows,
                       ablation_suite, inpaint_sequence)
from .synthverse import SceneSpec, SceneSpecError, generate, standard_suite, training_frames

log = logging.getLogger("vipflow")


class UsageError(Exception):
    pass


USAGE_ERRORS = (UsageError, ConfigError, SceneSpecError, ImagingError, FlowError, DiffusionError, FileNotFoundError)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_manifest(out_dir: Path, args, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    resolved = {k: plain(v) for k, v in vars(args).items() if k != "func"}
    _write_json(out_dir / "run.json", {"version": __version__, "command": args.command, "args": resolved, **extra})


def _config(args) -> InpaintConfig:
    return InpaintConfig(gamma=args.gamma, eta0=args.eta0, decay=args.decay, steps=args.steps, flow=args.flow,
                         occlusion_gate=args.occlusion_gate == "on", variant=args.variant, seed=args.seed,
                         color_compensation=args.color_compensation == "on", fb_tol=args.fb_tol).check()


def _schedule(args) -> DiffusionSchedule:
    try:
        return DiffusionSchedule.linear(args.T, args.beta_start, args.beta_end)
    except DiffusionError as exc:
        raise ConfigError(f"bad schedule: {exc}") from exc


def _load_scene(directory: Path):
    spec_path = directory / "scene.json"
    if not spec_path.exists():
        raise UsageError(f"--flow gt needs {spec_path} (written by the synth command)")
    spec = SceneSpec.from_json(spec_path)
    seed = 0
    run = directory / "run.json"
    if run.exists():
        seed = int(json.loads(run.read_text())["args"].get("seed", 0))
    return generate(spec, seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SceneSpec.from_json(args.spec)
    scene = generate(spec, args.seed)
    out = Path(args.out)
    save_sequence(scene.video, out)
    for k, (f, o) in enumerate(zip(scene.flows_bwd, scene.occl_bwd)):
        write_flo(f, out / f"flow_{k:04d}.flo")
        write_mask(o, out / f"occl_{k:04d}.png")
    (out / "scene.json").write_text(spec.to_json() + "\n")
    _run_manifest(out, args)
    log.info("wrote %d frames to %s", spec.n_frames, out)
    return 0


def cmd_suite(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, spec in enumerate(standard_suite(args.n, args.size, args.frames, args.base_seed)):
        (out / f"scene_{i:02d}.json").write_text(spec.to_json() + "\n")
    _run_manifest(out, args)
    return 0


def cmd_fit_prior(args) -> int:
    frames = []
    for d in args.frames_dir:
        frames.extend(load_sequence(d, require_masks=False).frames)
    res = fit_gmm_prior(frames, args.K, seed=args.seed, max_iter=args.max_iter)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_prior(res.prior, out)
    _run_manifest(out.parent, args, log_likelihood=res.log_likelihood[-1], n_frames=len(frames))
    return 0


def cmd_inpaint(args) -> int:
    config = _config(args)
    sched = _schedule(args)
    in_dir, out = Path(args.input), Path(args.out)
    seq = load_sequence(in_dir)
    denoiser = None
    if args.prior is not None:
        prior = load_prior(args.prior)
        if prior.shape != seq.shape:
            raise UsageError(f"prior shape {prior.shape} does not match frames {seq.shape}")
        denoiser = GMMDenoiser(prior, sched)
    elif config.variant != "pp-only":
        raise UsageError(f"--prior is required for variant {config.variant!r}")
    if config.flow == "gt":
        scene = _load_scene(in_dir)
        if scene.clean.shape[1:] != seq.shape:
            raise UsageError(f"scene.json describes {scene.clean.shape[1:]} frames, directory holds {seq.shape}")
        flows = SceneFlows(scene)
    else:
        flows = EstimatedFlows(seq, config.fb_tol, config.all_pairs)
    traces = {}
    done, report = inpaint_sequence(seq, config, denoiser, sched, flows, traces)
    save_sequence(done, out)
    (out / "report.json").write_text(report.to_json() + "\n")
    _write_json(out / "timing.json", {"wall_clock_seconds": report.wall_clock})
    if traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for k, tr in sorted(traces.items()):
            tr.write_jsonl(tdir / f"trace_{k:04d}.jsonl")
    _run_manifest(out, args, config=config.to_dict(), schedule=sched.to_dict())
    print(json.dumps({"generation_runs": report.n_generation_runs, "start_frame": report.start_frame,
                      "residual_invalid": sum(report.residual_invalid)}))
    return 0


def _flows_from_dir(gt_dir: Path, n: int):
    flows, occl = [], []
    for k in range(n - 1):
        fp = gt_dir / f"flow_{k:04d}.flo"
        if not fp.exists():
            raise UsageError(f"--flow gt needs {fp}")
        flows.append(read_flo(fp))
        op = gt_dir / f"occl_{k:04d}.png"
        occl.append(read_mask(op) if op.exists() else None)
    return flows, occl


def _estimated_warp_flows(frames, tol):
    h, w = frames.shape[1:3]
    zero = np.zeros((h, w), np.uint8)
    flows, occl = [], []
    for k in range(len(frames) - 1):
        b = complete_flow(frames[k + 1], frames[k], zero, zero).uv
        f = complete_flow(frames[k], frames[k + 1], zero, zero).uv
        flows.append(b)
        occl.append(fb_consistency(b, f, tol))
    return flows, occl


def cmd_eval(args) -> int:
    pred = load_sequence(args.pred, require_masks=False)
    gt = load_sequence(args.gt, require_masks=False)
    if len(pred) != len(gt) or pred.shape != gt.shape:
        raise UsageError(f"prediction {len(pred)}x{pred.shape} vs ground truth {len(gt)}x{gt.shape}")
    if args.flow == "gt":
        flows, occl = _flows_from_dir(Path(args.gt), len(gt))
    else:
        flows, occl = _estimated_warp_flows(pred.frames, args.fb_tol)
    report = evaluate(pred.frames, gt.frames, flows, occl, args.flow)
    if args.out is not None:
        out = Path(args.out)
        _run_manifest(out, args)
        (out / "metrics.json").write_text(report.to_json() + "\n")
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    config = _config(args)
    sched = _schedule(args)
    scene_dir, out_csv = Path(args.scene_dir), Path(args.out)
    paths = sorted(scene_dir.glob("*.json"))
    paths = [p for p in paths if p.name != "run.json"]
    if not paths:
        raise UsageError(f"no scene spec JSON files in {scene_dir}")
    specs = [SceneSpec.from_json(p).check() for p in paths]
    shapes = {(s.height, s.width, s.channels) for s in specs}
    if len(shapes) != 1:
        raise UsageError(f"scenes disagree on frame shape: {sorted(shapes)}")
    if args.prior is not None:
        prior = load_prior(args.prior)
    else:
        s0 = specs[0]
        if s0.height != s0.width or s0.channels != 3:
            raise UsageError("automatic prior fitting needs square RGB scenes; pass --prior")
        prior = fit_gmm_prior(list(training_frames(args.train_scenes, s0.height, s0.n_frames)), args.K, seed=0).prior
    if prior.shape != shapes.pop():
        raise UsageError(f"prior shape {prior.shape} does not match the scenes")
    rows, table = ablation_suite(specs, config, prior, sched, scene_seed=args.seed, jobs=args.jobs)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_table_csv(table, out_csv, ["variant", "psnr", "ssim", "e_warp"])
    write_table_csv(rows, out_csv.with_name(out_csv.stem + "_scenes.csv"), ["scene", "variant", "psnr", "ssim", "e_warp"])
    _run_manifest(out_csv.parent, args, config=config.to_dict(), schedule=sched.to_dict(),
                  scenes=[p.name for p in paths])
    for r in table:
        print(f"{r['variant']:>10}  psnr {r['psnr']:.3f}  ssim {r['ssim']:.4f}  e_warp {r['e_warp']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_inpaint_flags(p):
    p.add_argument("--gamma", type=float, default=0.001)
    p.add_argument("--eta0", type=float, default=0.01)
    p.add_argument("--decay", type=float, default=0.9)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flow", choices=FLOW_SOURCES, default="gt")
    p.add_argument("--occlusion-gate", choices=("on", "off"), default="on")
    p.add_argument("--color-compensation", choices=("on", "off"), default="on")
    p.add_argument("--fb-tol", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.2)
    p.add_argument("--prior", type=Path, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vipflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene with ground-truth flows")
    p.add_argument("spec", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("suite", help="write the standard ablation scene specs")
    p.add_argument("out", type=Path)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--base-seed", type=int, default=0)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("fit-prior", help="fit a Gaussian-mixture prior to clean frames")
    p.add_argument("frames_dir", type=Path, nargs="+")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=200)
    p.set_defaults(func=cmd_fit_prior)

    p = sub.add_parser("inpaint", help="complete a masked frame directory")
    p.add_argument("input", type=Path)
    p.add_argument("out", type=Path)
    _add_inpaint_flags(p)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="PSNR, SSIM and warping error of a prediction")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--flow", choices=FLOW_SOURCES, default="gt")
    p.add_argument("--fb-tol", type=float, default=1.0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four variants over a scene directory")
    p.add_argument("scene_dir", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--train-scenes", type=int, default=20)
    _add_inpaint_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("VIPFLOW_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"vipflow {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"vipflow {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
