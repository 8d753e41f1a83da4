import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_prior
from oracles import overlap_oracle, reachable_oracle
from vipflow.diffusion import GMMDenoiser
from vipflow.imaging import VideoSequence
from vipflow.pipeline import (ConfigError, EstimatedFlows, InpaintConfig, SceneFlows, ZeroFlows, inpaint_sequence,
                              run_ablation, select_start_frame, start_frame_scores, visit_order)
from vipflow.synthverse import SceneSpec, SpriteSpec, generate

FAST = dict(steps=3)


def den_for(shape, sched, seed=0, K=3):
    return GMMDenoiser(random_prior(np.random.default_rng(seed), shape, K), sched)


def static_video(n=5, size=12, seed=0):
    f = np.random.default_rng(seed).random((1, size, size, 3)) * 0.8 + 0.1
    return np.repeat(f, n, axis=0)


# --- start frame --------------------------------------------------------


def test_only_masked_frame_is_chosen():
    masks = np.zeros((5, 10, 10), np.uint8)
    masks[3, 2:6, 2:6] = 1
    seq = VideoSequence(static_video(5, 10), masks)
    assert select_start_frame(seq, ZeroFlows(10, 10)) == 3
    assert not start_frame_scores(seq, ZeroFlows(10, 10)).any()


def test_identical_masks_tie_to_smallest_index():
    masks = np.zeros((4, 10, 10), np.uint8)
    masks[:, 3:7, 3:7] = 1
    assert select_start_frame(VideoSequence(static_video(4, 10), masks), ZeroFlows(10, 10)) == 0


def test_all_unmasked_returns_zero():
    seq = VideoSequence(static_video(3, 10), np.zeros((3, 10, 10), np.uint8))
    assert select_start_frame(seq, ZeroFlows(10, 10)) == 0


def test_scores_match_overlap_oracle():
    spec = SceneSpec(height=14, width=14, n_frames=4, pan=(1.0, 0.0), mask_fraction=0.1)
    sc = generate(spec, 0)
    masks = np.zeros((4, 14, 14), np.uint8)
    # frame 2's mask is covered by the warped masks of frames 1 and 3 together
    masks[2, 5:9, 4:10] = 1
    masks[1, 5:9, 3:6] = 1  # f_{2->1} = (-1, 0): lands on columns 4..6 of frame 2
    masks[3, 5:9, 8:12] = 1  # f_{2->3} = (+1, 0): lands on columns 7..10 of frame 2
    masks[0, 0:3, 0:3] = 1
    seq = VideoSequence(sc.clean, masks)
    scores = start_frame_scores(seq, SceneFlows(sc))
    for k in range(4):
        assert scores[k] == overlap_oracle(masks, sc.flow, k)
    assert scores[2] == masks[2].sum()
    assert select_start_frame(seq, SceneFlows(sc)) == 2


def test_visit_order_alternates():
    assert visit_order(2, 6) == [2, 3, 1, 4, 0, 5]
    assert visit_order(0, 3) == [0, 1, 2]


# --- scheduler ----------------------------------------------------------


def test_unmasked_input_is_untouched(sched):
    frames = np.random.default_rng(0).random((3, 10, 10, 3))
    seq = VideoSequence(frames, np.zeros((3, 10, 10), np.uint8))
    out, rep = inpaint_sequence(seq, InpaintConfig(), den_for((10, 10, 3), sched), sched, ZeroFlows(10, 10))
    assert np.array_equal(out.frames, frames)
    assert rep.n_generation_runs == 0


def test_static_fully_masked_frame_filled_by_propagation(sched):
    frames = static_video(5, 12)
    masks = np.zeros((5, 12, 12), np.uint8)
    masks[2] = 1
    seq = VideoSequence(frames, masks)
    out, rep = inpaint_sequence(seq, InpaintConfig(), den_for((12, 12, 3), sched), sched, ZeroFlows(12, 12))
    assert rep.n_generation_runs == 0
    assert np.abs(out.frames[2] - frames[1]).max() < 1e-6
    assert rep.frames[2].sources == [[1, 144]]


def test_static_scene_generates_exactly_once(sched):
    masks = np.zeros((5, 12, 12), np.uint8)
    masks[:, 3:8, 2:9] = 1
    seq = VideoSequence(static_video(5, 12, seed=2), masks)
    out, rep = inpaint_sequence(seq, InpaintConfig(**FAST), den_for((12, 12, 3), sched), sched, ZeroFlows(12, 12))
    assert rep.n_generation_runs == 1 and rep.frames[0].generated
    assert not out.masks.any()
    # the generated content is copied verbatim to every other frame
    for k in range(1, 5):
        assert np.array_equal(out.frames[k], out.frames[0])


def panning_scene(seed=0):
    # a stationary hole wider than the total pan is never fully revealed
    spec = SceneSpec(height=14, width=14, n_frames=4, texture_cell=4, pan=(1.0, 0.0), mask_fraction=0.35)
    return generate(spec, seed)


def test_pp_only_residuals_match_reachability(sched):
    sc = panning_scene()
    seq = sc.corrupted()
    out, rep = inpaint_sequence(seq, InpaintConfig(variant="pp-only"), None, sched, SceneFlows(sc))
    for k in range(4):
        reach = reachable_oracle(sc.masks, sc.flow, sc.occlusion, k)
        expect = (sc.masks[k] == 1) & ~reach
        assert expect.any()
        assert np.array_equal(out.masks[k], expect.astype(np.uint8))
        assert rep.residual_invalid[k] == expect.sum()
    assert rep.n_generation_runs == 0


def test_generation_runs_only_where_residuals_remain(sched):
    sc = panning_scene(1)
    seq = sc.corrupted()
    out, rep = inpaint_sequence(seq, InpaintConfig(**FAST), den_for((14, 14, 3), sched), sched, SceneFlows(sc))
    s = rep.start_frame
    reach = reachable_oracle(sc.masks, sc.flow, sc.occlusion, s)
    assert rep.frames[s].invalid_after_propagation == ((sc.masks[s] == 1) & ~reach).sum()
    for r in rep.frames:
        assert r.generated == (r.invalid_after_propagation > 0)
    assert not out.masks.any()


@settings(max_examples=8)
@given(st.integers(0, 1000), st.sampled_from(["full", "per-frame", "no-opt", "pp-only"]))
def test_valid_pixels_preserved_and_completed(sched, seed, variant):
    rng = np.random.default_rng(seed)
    spec = SceneSpec(height=12, width=12, n_frames=3, texture_cell=4, pan=(float(rng.integers(-1, 2)), 0.0),
                     mask_kind="moving", mask_velocity=(1, 0), mask_fraction=float(rng.uniform(0.1, 0.4)))
    sc = generate(spec, seed)
    seq = sc.corrupted()
    cfg = InpaintConfig(variant=variant, seed=seed, **FAST)
    out, rep = inpaint_sequence(seq, cfg, den_for((12, 12, 3), sched, seed), sched, SceneFlows(sc))
    keep = sc.masks == 0
    assert np.array_equal(out.frames[keep], sc.clean[keep])
    assert not out.masks.any()
    assert out.frames.min() >= 0 and out.frames.max() <= 1
    for r in rep.frames:
        assert r.generated == (r.invalid_after_propagation > 0)


def test_deterministic_outputs_and_reports(sched):
    sc = panning_scene(2)
    runs = [inpaint_sequence(sc.corrupted(), InpaintConfig(seed=4, **FAST), den_for((14, 14, 3), sched), sched,
                             SceneFlows(sc)) for _ in range(2)]
    assert np.array_equal(runs[0][0].frames, runs[1][0].frames)
    assert runs[0][1].to_json() == runs[1][1].to_json()
    assert "wall_clock" not in json.loads(runs[0][1].to_json())


def test_color_compensation_reduces_seam_error(sched):
    spec = SceneSpec(height=20, width=20, n_frames=3, pan=(0.0, 0.0), brightness_ramp=0.04, mask_kind="moving",
                     mask_velocity=(3, 0), mask_fraction=0.12)
    sc = generate(spec, 0)
    seq = sc.corrupted()
    errs = {}
    for comp in (True, False):
        out, _ = inpaint_sequence(seq, InpaintConfig(variant="pp-only", color_compensation=comp), None, sched,
                                  SceneFlows(sc))
        filled = (sc.masks == 1) & (out.masks == 0)
        errs[comp] = np.mean((out.frames - sc.clean)[filled] ** 2)
    assert errs[True] < errs[False]


def test_per_frame_variant_ignores_other_frames(sched):
    masks = np.zeros((3, 12, 12), np.uint8)
    masks[:, 3:8, 2:9] = 1
    seq = VideoSequence(static_video(3, 12), masks)
    _, rep = inpaint_sequence(seq, InpaintConfig(variant="per-frame", **FAST), den_for((12, 12, 3), sched), sched,
                              ZeroFlows(12, 12))
    assert rep.n_generation_runs == 3
    assert all(r.sources == [] for r in rep.frames)


def test_no_opt_uses_one_noise_for_all(sched):
    masks = np.zeros((3, 12, 12), np.uint8)
    masks[:, 3:8, 2:9] = 1
    seq = VideoSequence(static_video(3, 12), masks)
    out, rep = inpaint_sequence(seq, InpaintConfig(variant="no-opt"), den_for((12, 12, 3), sched), sched,
                                ZeroFlows(12, 12))
    assert rep.n_generation_runs == 3 and all(r.iterations == 0 for r in rep.frames)
    # identical constraints and identical z give identical frames
    assert np.array_equal(out.frames[0], out.frames[2])


def test_estimated_flow_provider_runs(sched):
    spec = SceneSpec(height=24, width=24, n_frames=3, pan=(1.0, 0.0), mask_fraction=0.1)
    sc = generate(spec, 0)
    seq = sc.corrupted()
    flows = EstimatedFlows(seq)
    out, rep = inpaint_sequence(seq, InpaintConfig(flow="estimated", **FAST), den_for((24, 24, 3), sched), sched,
                                flows)
    assert rep.flow_source == "estimated"
    assert not out.masks.any()
    assert np.abs(flows.flow(0, 1) - [1.0, 0.0]).max() < 0.5


def test_config_errors(sched):
    seq = VideoSequence(static_video(2, 10), np.zeros((2, 10, 10), np.uint8))
    with pytest.raises(ConfigError):
        InpaintConfig(variant="bogus").check()
    with pytest.raises(ConfigError, match="denoiser"):
        inpaint_sequence(seq, InpaintConfig(), None, sched, ZeroFlows(10, 10))
    with pytest.raises(ConfigError, match="unknown"):
        InpaintConfig.from_dict({"nope": 1})


def test_run_ablation_rows(sched):
    sc = panning_scene(3)
    res = run_ablation(sc.corrupted(), sc.clean, InpaintConfig(**FAST), den_for((14, 14, 3), sched), sched,
                       SceneFlows(sc), sc.flows_bwd, sc.occl_bwd)
    assert set(res) == {"full", "per-frame", "pp-only", "no-opt"}
    for metrics, rep in res.values():
        assert len(metrics.psnr) == 4 and len(metrics.e_warp) == 3
    with pytest.raises(ConfigError):
        run_ablation(sc.corrupted(), None, InpaintConfig(), None, sched, SceneFlows(sc), sc.flows_bwd)
