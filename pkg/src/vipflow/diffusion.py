"""Pixel-space diffusion: schedule, forward noising, deterministic reverse chain,
DDPM objective, and an analytic Gaussian-mixture denoiser.

The reverse chain is the zero-stochasticity (DDIM-style) update, so the sample
is a differentiable deterministic function of the terminal noise. Gradients
through the chain are obtained with :func:`sample_vjp`, which walks the stored
forward states in reverse order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule with cumulative products; index 0 is the clean state."""

    beta: np.ndarray  # shape (T,), beta[t-1] is beta_t
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)  # shape (T+1,), alpha_bar[0] = 1

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if beta.size < 1:
            raise DiffusionError("schedule needs at least one step")
        if not np.all((beta > 0) & (beta < 1)):
            raise DiffusionError("every beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @classmethod
    def linear(cls, T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.2) -> "DiffusionSchedule":
        if T == 1:
            return cls(np.array([beta_start]))
        return cls(np.linspace(beta_start, beta_end, T))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def signal(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def noise(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls(np.asarray(d["beta"], dtype=np.float64))


class Denoiser(Protocol):
    def predict(self, x_t: np.ndarray, t: int, cond: np.ndarray | None = None) -> np.ndarray: ...

    def vjp(self, x_t: np.ndarray, t: int, cotangent: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray: ...


def _check_t(t: int, sched: DiffusionSchedule, lo: int = 0) -> None:
    if not (lo <= t <= sched.T):
        raise DiffusionError(f"timestep {t} outside [{lo}, {sched.T}]")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    _check_t(t, sched)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DiffusionError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if t == 0:
        return x0.copy()
    return sched.signal(t) * x0 + sched.noise(t) * eps


def _step_coeffs(t: int, sched: DiffusionSchedule) -> tuple[float, float]:
    """x_{t-1} = c_x * x_t + c_eps * eps_hat for the deterministic update."""
    a_t, s_t = sched.signal(t), sched.noise(t)
    a_p, s_p = sched.signal(t - 1), sched.noise(t - 1)
    return a_p / a_t, s_p - a_p * s_t / a_t


def _predict_checked(denoiser: Denoiser, x_t, t, cond):
    eps_hat = np.asarray(denoiser.predict(x_t, t, cond), dtype=np.float64)
    if not np.all(np.isfinite(eps_hat)):
        raise DiffusionError(f"denoiser produced non-finite output at step t={t}")
    return eps_hat


def predict_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    return (x_t - sched.noise(t) * eps_hat) / sched.signal(t)


def reverse_step(x_t: np.ndarray, t: int, denoiser: Denoiser, sched: DiffusionSchedule,
                 cond: np.ndarray | None = None) -> np.ndarray:
    _check_t(t, sched, lo=1)
    eps_hat = _predict_checked(denoiser, x_t, t, cond)
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    if t == 1:
        # alpha_bar_0 = 1, so the update reduces to x0_hat exactly
        return x0_hat
    return sched.signal(t - 1) * x0_hat + sched.noise(t - 1) * eps_hat


def sample(denoiser: Denoiser, z: np.ndarray, sched: DiffusionSchedule, cond: np.ndarray | None = None,
           return_states: bool = False):
    """Run the reverse chain from ``x_T = z`` down to ``x_0``.

    With ``return_states`` the list ``[x_T, ..., x_1]`` is returned as well; it
    is what :func:`sample_vjp` needs for the adjoint pass.
    """
    x = np.asarray(z, dtype=np.float64)
    states = []
    for t in range(sched.T, 0, -1):
        if return_states:
            states.append(x)
        x = reverse_step(x, t, denoiser, sched, cond)
    if return_states:
        return x, states
    return x


def sample_vjp(denoiser: Denoiser, states: Sequence[np.ndarray], cotangent: np.ndarray,
               sched: DiffusionSchedule, cond: np.ndarray | None = None) -> np.ndarray:
    """Pull a cotangent on the sample back to the terminal noise z."""
    g = np.asarray(cotangent, dtype=np.float64)
    # states[0] is x_T, states[-1] is x_1
    for i in range(len(states) - 1, -1, -1):
        t = sched.T - i
        c_x, c_eps = _step_coeffs(t, sched)
        g = c_x * g + c_eps * np.asarray(denoiser.vjp(states[i], t, g, cond), dtype=np.float64)
    return g


def ddpm_loss(denoiser: Denoiser, batch: Sequence[np.ndarray], sched: DiffusionSchedule,
              rng: np.random.Generator) -> float:
    """Monte-Carlo estimate of E ||eps - eps_theta(x_t, t)||^2 with t ~ U{1..T}."""
    if len(batch) == 0:
        raise DiffusionError("ddpm_loss needs a non-empty batch")
    total = 0.0
    for x0 in batch:
        x0 = np.asarray(x0, dtype=np.float64)
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(x0.shape)
        x_t = forward_diffuse(x0, t, eps, sched)
        total += float(np.sum((eps - denoiser.predict(x_t, t)) ** 2))
    return total / len(batch)


# ---------------------------------------------------------------------------
# Gaussian-mixture prior


@dataclass(frozen=True)
class GMMPrior:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, *shape)
    variances: np.ndarray  # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if not (w.size == var.size == mu.shape[0]):
            raise DiffusionError("weights, means and variances disagree on K")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DiffusionError("weights must be positive and sum to 1")
        if np.any(var <= 0):
            raise DiffusionError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def K(self) -> int:
        return int(self.weights.size)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.means.shape[1:])


_GMM_MAGIC = b"VPGM"
_GMM_VERSION = 1


def save_prior(prior: GMMPrior, path) -> None:
    """Binary layout: magic, u32 version, u32 K, u32 ndim, u32 dims..., then
    float64 weights, means, variances, all little-endian."""
    shape = prior.shape
    with open(path, "wb") as fh:
        fh.write(_GMM_MAGIC)
        fh.write(struct.pack("<III", _GMM_VERSION, prior.K, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(prior.weights.astype("<f8").tobytes())
        fh.write(prior.means.astype("<f8").tobytes())
        fh.write(prior.variances.astype("<f8").tobytes())


def load_prior(path) -> GMMPrior:
    raw = Path(path).read_bytes()
    if raw[:4] != _GMM_MAGIC:
        raise DiffusionError(f"{path}: not a prior file (bad magic)")
    version, K, ndim = struct.unpack_from("<III", raw, 4)
    if version != _GMM_VERSION:
        raise DiffusionError(f"{path}: unsupported prior version {version}")
    off = 16
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    D = int(np.prod(shape))
    expected = off + 8 * (K + K * D + K)
    if len(raw) != expected:
        raise DiffusionError(f"{path}: truncated or oversized ({len(raw)} bytes, expected {expected})")
    w = np.frombuffer(raw, "<f8", K, off)
    off += 8 * K
    mu = np.frombuffer(raw, "<f8", K * D, off).reshape((K, *shape))
    off += 8 * K * D
    var = np.frombuffer(raw, "<f8", K, off)
    return GMMPrior(w.copy(), mu.copy(), var.copy())


class GMMDenoiser:
    """Exact noise prediction for data drawn from a :class:`GMMPrior`.

    Under component i, ``x_t ~ N(a mu_i, s_i^2 I)`` with ``a = sqrt(abar_t)`` and
    ``s_i^2 = a^2 var_i + 1 - a^2``. The posterior mean of x0 is the
    responsibility-weighted sum of the per-component conjugate means, and the
    predicted noise follows from the Tweedie relation.
    """

    def __init__(self, prior: GMMPrior, sched: DiffusionSchedule):
        self.prior = prior
        self.sched = sched
        self._mu = prior.means.reshape(prior.K, -1)
        self._log_w = np.log(prior.weights)

    def _terms(self, x_t: np.ndarray, t: int):
        _check_t(t, self.sched, lo=1)
        x = np.asarray(x_t, dtype=np.float64).reshape(-1)
        if x.size != self._mu.shape[1]:
            raise DiffusionError(f"input has {x.size} elements, prior expects {self._mu.shape[1]}")
        a = self.sched.signal(t)
        s2 = a * a * self.prior.variances + (1.0 - a * a)  # (K,)
        resid = x[None, :] - a * self._mu  # (K, D)
        D = x.size
        logp = self._log_w - 0.5 * D * np.log(2 * np.pi * s2) - 0.5 * np.einsum("kd,kd->k", resid, resid) / s2
        r = np.exp(logp - logsumexp(logp))
        gain = a * self.prior.variances / s2  # (K,)
        m = self._mu + gain[:, None] * resid  # per-component posterior means
        return x, a, s2, resid, r, gain, m

    def posterior_mean(self, x_t: np.ndarray, t: int) -> np.ndarray:
        _, _, _, _, r, _, m = self._terms(x_t, t)
        return (r @ m).reshape(np.shape(x_t))

    def predict(self, x_t, t, cond=None):
        x, a, _, _, r, _, m = self._terms(x_t, t)
        e = r @ m
        return ((x - a * e) / np.sqrt(1.0 - a * a)).reshape(np.shape(x_t))

    def vjp(self, x_t, t, cotangent, cond=None):
        x, a, s2, resid, r, gain, m = self._terms(x_t, t)
        v = np.asarray(cotangent, dtype=np.float64).reshape(-1)
        # d log N_i / dx = -resid_i / s2_i
        g = -resid / s2[:, None]
        g_bar = r @ g
        # J^T v for J = dE[x0|x_t]/dx_t
        jt_v = float(r @ gain) * v + ((r * (m @ v))[:, None] * (g - g_bar[None, :])).sum(axis=0)
        out = (v - a * jt_v) / np.sqrt(1.0 - a * a)
        return out.reshape(np.shape(x_t))


def gmm_epsilon(x_t: np.ndarray, t: int, prior: GMMPrior, sched: DiffusionSchedule) -> np.ndarray:
    """Exact predicted noise at ``(x_t, t)`` under ``prior``."""
    return GMMDenoiser(prior, sched).predict(x_t, t)


class ZeroDenoiser:
    def predict(self, x_t, t, cond=None):
        return np.zeros_like(np.asarray(x_t, dtype=np.float64))

    def vjp(self, x_t, t, cotangent, cond=None):
        return np.zeros_like(np.asarray(x_t, dtype=np.float64))


# ---------------------------------------------------------------------------
# EM fit


@dataclass
class EMResult:
    prior: GMMPrior
    log_likelihood: list[float]
    responsibilities: np.ndarray  # (n, K)


def _log_resp(X, w, mu, var):
    D = X.shape[1]
    sq = (X * X).sum(1)[:, None] - 2 * X @ mu.T + (mu * mu).sum(1)[None, :]
    sq = np.maximum(sq, 0.0)
    logp = np.log(w)[None, :] - 0.5 * D * np.log(2 * np.pi * var)[None, :] - 0.5 * sq / var[None, :]
    norm = logsumexp(logp, axis=1)
    return logp - norm[:, None], float(norm.sum())


def fit_gmm_prior(patches: Sequence[np.ndarray], K: int, seed: int = 0, max_iter: int = 200,
                  tol: float = 1e-8, var_floor: float = 1e-6) -> EMResult:
    """Isotropic-covariance EM. Means are seeded with k-means++ style picks."""
    if K < 1:
        raise DiffusionError("K must be >= 1")
    if len(patches) < K:
        raise DiffusionError(f"need at least K={K} patches, got {len(patches)}")
    shape = np.shape(patches[0])
    X = np.stack([np.asarray(p, dtype=np.float64).reshape(-1) for p in patches])
    n, D = X.shape
    rng = np.random.default_rng(seed)

    idx = [int(rng.integers(n))]
    for _ in range(1, K):
        d2 = np.min(((X[:, None, :] - X[idx][None, :, :]) ** 2).sum(-1), axis=1)
        if d2.sum() <= 0:
            idx.append(int(rng.integers(n)))
        else:
            idx.append(int(rng.choice(n, p=d2 / d2.sum())))
    mu = X[idx].copy()
    var = np.full(K, max(float(X.var()), var_floor))
    w = np.full(K, 1.0 / K)

    history = []
    log_r, ll = _log_resp(X, w, mu, var)
    history.append(ll)
    for _ in range(max_iter):
        r = np.exp(log_r)
        nk = r.sum(0) + 1e-300
        w = nk / n
        mu = (r.T @ X) / nk[:, None]
        sq = (X * X).sum(1)[:, None] - 2 * X @ mu.T + (mu * mu).sum(1)[None, :]
        var = np.maximum((r * np.maximum(sq, 0.0)).sum(0) / (nk * D), var_floor)
        w = np.maximum(w, 1e-300)
        w = w / w.sum()
        log_r, ll = _log_resp(X, w, mu, var)
        history.append(ll)
        if abs(history[-1] - history[-2]) <= tol * max(1.0, abs(history[-2])):
            break
    if K == 1:
        mu = X.mean(0, keepdims=True)
    prior = GMMPrior(w, mu.reshape((K, *shape)), var)
    return EMResult(prior, history, np.exp(log_r))
