"""Final conditional loss as the regularization weight grows, at a fixed seed."""

import argparse

import numpy as np

from vipflow.diffusion import DiffusionSchedule, GMMDenoiser, fit_gmm_prior
from vipflow.noiseopt import NoiseOptProblem, cond_loss, optimize_noise
from vipflow.synthverse import SceneSpec, generate, training_frames


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.0, 0.001, 0.01, 0.1, 1.0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sched = DiffusionSchedule.linear()
    den = GMMDenoiser(fit_gmm_prior(training_frames(10, args.size, 4), 4, seed=0).prior, sched)
    x = generate(SceneSpec(height=args.size, width=args.size, n_frames=2, texture_cell=4), args.seed).clean[0]
    m = np.zeros(x.shape[:2], np.uint8)
    m[:, args.size // 2:] = 1
    z0 = np.random.default_rng(args.seed).standard_normal(x.shape)
    for g in args.gammas:
        prob = NoiseOptProblem(x, m, gamma=g, early_stop=None)
        tr = optimize_noise(prob, den, sched, np.random.default_rng(args.seed), z0=z0)
        drift = float(np.linalg.norm(tr.z_star - z0))
        print(f"gamma={g:<8g} cond_loss={cond_loss(tr.y_hat, x, m):.6f}  |z*-z0|={drift:.4f}")


if __name__ == "__main__":
    main()
