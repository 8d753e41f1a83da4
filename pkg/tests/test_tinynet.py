import numpy as np
import pytest

from vipflow.noiseopt import NoiseOptProblem, gradient_check
from vipflow.synthverse import SceneSpec, generate
from vipflow.tinynet import TinyDenoiser


def patches(n=64, size=8, seed=0):
    sc = generate(SceneSpec(height=48, width=48, n_frames=6, channels=1, pan=(1.0, 1.0)), seed)
    rng = np.random.default_rng(seed)
    return [sc.clean[rng.integers(6)][y:y + size, x:x + size] for y, x in rng.integers(0, 48 - size, (n, 2))]


@pytest.fixture(scope="module")
def trained(sched):
    net = TinyDenoiser(1, sched, seed=0)
    history = net.train(patches(), steps=500, seed=0)
    return net, history


def test_training_loss_decreases(trained):
    _, h = trained
    med10 = np.array([np.median(h[i:i + 10]) for i in range(0, len(h), 10)])
    blocks = [np.median(med10[i:i + 10]) for i in range(0, len(med10), 10)]
    assert all(b < a for a, b in zip(blocks, blocks[1:]))
    assert med10[-1] < med10[0]


def test_vjp_matches_finite_differences(trained):
    net, _ = trained
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        t = int(rng.integers(1, 51))
        x, v, d = (rng.standard_normal((8, 8, 1)) for _ in range(3))
        h = 1e-5
        fd = (np.sum(net.predict(x + h * d, t) * v) - np.sum(net.predict(x - h * d, t) * v)) / (2 * h)
        ad = np.sum(net.vjp(x, t, v) * d)
        worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad)))
    assert worst < 1e-3


def test_gradient_check_tiny(trained, sched):
    net, _ = trained
    m = np.zeros((8, 8), np.uint8)
    m[:, 4:] = 1
    prob = NoiseOptProblem(patches(1, seed=3)[0], m)
    assert gradient_check(prob, net, sched, 20, np.random.default_rng(0)) < 1e-3


def test_same_seed_same_weights(sched):
    x = np.random.default_rng(0).standard_normal((8, 8, 1))
    a, b = TinyDenoiser(1, sched, seed=5), TinyDenoiser(1, sched, seed=5)
    assert np.array_equal(a.predict(x, 10), b.predict(x, 10))
