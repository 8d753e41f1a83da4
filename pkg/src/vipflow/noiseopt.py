"""Constrained generation by gradient descent on the terminal diffusion noise."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffusion import Denoiser, DiffusionSchedule, sample, sample_vjp
from .imaging import as_frame, as_mask

# defaults from the reference implementation details
GAMMA = 0.001
ETA0 = 0.01
DECAY = 0.9
STEPS = 50


class NoiseOptError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseOptProblem:
    constraint_frame: np.ndarray  # (H, W, C), propagated target
    constraint_mask: np.ndarray  # (H, W), 1 = unconstrained
    gamma: float = GAMMA
    steps: int = STEPS
    eta0: float = ETA0
    decay: float = DECAY
    early_stop: float | None = 1e-6

    def __post_init__(self):
        frame = np.asarray(self.constraint_frame, dtype=np.float64)
        if frame.ndim == 2:
            frame = frame[..., None]
        mask = np.asarray(self.constraint_mask)
        if mask.ndim == 3:
            mask = mask[..., 0]
        if frame.shape[:2] != mask.shape:
            raise ValueError(f"constraint frame {frame.shape[:2]} vs mask {mask.shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("constraint mask must be binary")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0 < self.decay <= 1):
            raise ValueError("decay must lie in (0, 1]")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be > 0")
        object.__setattr__(self, "constraint_frame", frame)
        object.__setattr__(self, "constraint_mask", mask.astype(np.uint8))

    @property
    def weight(self) -> np.ndarray:
        """Per-element constraint indicator broadcast over channels."""
        return np.broadcast_to((1 - self.constraint_mask)[..., None], self.constraint_frame.shape).astype(np.float64)

    def eta(self, i: int) -> float:
        return self.eta0 * self.decay ** i


@dataclass
class IterRecord:
    iter: int
    eta: float
    cond_loss: float
    reg: float
    total: float


@dataclass
class OptimizationTrace:
    z0: np.ndarray
    z_star: np.ndarray
    y_hat: np.ndarray
    records: list[IterRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def cond_losses(self) -> np.ndarray:
        return np.array([r.cond_loss for r in self.records])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.__dict__) + "\n" for r in self.records)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def cond_loss(y_hat, x_tilde, m_tilde) -> float:
    """Sum of squared differences over constrained (mask == 0) pixels."""
    y = as_frame(y_hat)
    x = as_frame(x_tilde)
    m = as_mask(m_tilde)
    if y.shape != x.shape or y.shape[:2] != m.shape:
        raise ValueError(f"shape mismatch: y_hat {y.shape}, x_tilde {x.shape}, mask {m.shape}")
    d = (y - x) * (1 - m)[..., None]
    return float(np.sum(d * d))


def objective_and_grad(z, z0, problem: NoiseOptProblem, denoiser: Denoiser, sched: DiffusionSchedule):
    """Return ``(cond, reg, grad, y_hat)`` for the regularized objective at ``z``."""
    c = problem.weight
    y, states = sample(denoiser, z, sched, cond=problem.constraint_frame, return_states=True)
    r = (y - problem.constraint_frame) * c
    L = float(np.sum(r * r))
    dz = z - z0
    R = float(np.sum(dz * dz))
    grad = sample_vjp(denoiser, states, 2.0 * r, sched, cond=problem.constraint_frame) + 2.0 * problem.gamma * dz
    return L, R, grad, y


def objective(z, z0, problem: NoiseOptProblem, denoiser: Denoiser, sched: DiffusionSchedule) -> float:
    y = sample(denoiser, z, sched, cond=problem.constraint_frame)
    r = (y - problem.constraint_frame) * problem.weight
    return float(np.sum(r * r) + problem.gamma * np.sum((z - z0) ** 2))


def optimize_noise(problem: NoiseOptProblem, denoiser: Denoiser, sched: DiffusionSchedule,
                   rng: np.random.Generator, z0: np.ndarray | None = None) -> OptimizationTrace:
    """Plain gradient descent on z with step ``eta0 * decay**i``."""
    shape = problem.constraint_frame.shape
    z0 = rng.standard_normal(shape) if z0 is None else np.asarray(z0, dtype=np.float64)
    z = z0.copy()
    records = []
    for i in range(problem.steps):
        L, R, g, _ = objective_and_grad(z, z0, problem, denoiser, sched)
        eta = problem.eta(i)
        records.append(IterRecord(i, eta, L, R, L + problem.gamma * R))
        if problem.early_stop is not None and L < problem.early_stop:
            break
        if not np.all(np.isfinite(g)):
            raise NoiseOptError(
                f"non-finite gradient at iteration {i}: |z|={np.linalg.norm(z):.3g}, cond_loss={L:.3g}, reg={R:.3g}"
            )
        z = z - eta * g
    y_hat = sample(denoiser, z, sched, cond=problem.constraint_frame)
    return OptimizationTrace(z0, z, y_hat, records)


def paste_back(y_hat, constraint_frame, constraint_mask) -> np.ndarray:
    """Keep constraint pixels exactly; take the clipped generation elsewhere."""
    m = as_mask(constraint_mask)[..., None] == 1
    return np.where(m, np.clip(as_frame(y_hat), 0.0, 1.0), as_frame(constraint_frame))


def gradient_check(problem: NoiseOptProblem, denoiser: Denoiser, sched: DiffusionSchedule, n_probes: int,
                   rng: np.random.Generator, z: np.ndarray | None = None, z0: np.ndarray | None = None,
                   h: float = 1e-4) -> float:
    """Max relative error between the adjoint gradient and central differences
    along ``n_probes`` random unit directions."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    shape = problem.constraint_frame.shape
    z0 = rng.standard_normal(shape) if z0 is None else np.asarray(z0, dtype=np.float64)
    z = z0 + 0.1 * rng.standard_normal(shape) if z is None else np.asarray(z, dtype=np.float64)
    _, _, g, _ = objective_and_grad(z, z0, problem, denoiser, sched)
    worst = 0.0
    for _ in range(n_probes):
        d = rng.standard_normal(shape)
        d /= np.linalg.norm(d)
        fd = (objective(z + h * d, z0, problem, denoiser, sched) - objective(z - h * d, z0, problem, denoiser, sched)) / (2 * h)
        ad = float(np.sum(g * d))
        worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), 1e-12))
    return worst
