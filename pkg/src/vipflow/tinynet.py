"""A small trainable convolutional noise predictor (torch, float64).

Used to exercise the noise optimizer with a non-analytic denoiser. Gradients
for the adjoint pass come from torch autograd.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .diffusion import DiffusionSchedule, forward_diffuse


class _Net(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels + 1, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, channels, 3, padding=1),
        )

    def forward(self, x, tfeat):
        # x: (B, C, H, W); tfeat: (B,) in [0, 1]
        t = tfeat[:, None, None, None].expand(x.shape[0], 1, x.shape[2], x.shape[3])
        return self.body(torch.cat([x, t], dim=1))


class TinyDenoiser:
    def __init__(self, channels: int, sched: DiffusionSchedule, hidden: int = 16, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        self.sched = sched
        self.channels = channels
        self.net = _Net(channels, hidden).double()
        with torch.no_grad():
            for p in self.net.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.1)

    def _tfeat(self, t, n):
        return torch.full((n,), float(t) / self.sched.T, dtype=torch.float64)

    @staticmethod
    def _to_torch(x):
        return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(x, dtype=np.float64), -1, 0)))[None]

    def predict(self, x_t, t, cond=None):
        with torch.no_grad():
            out = self.net(self._to_torch(x_t), self._tfeat(t, 1))
        return np.moveaxis(out[0].numpy(), 0, -1)

    def vjp(self, x_t, t, cotangent, cond=None):
        x = self._to_torch(x_t).requires_grad_(True)
        out = self.net(x, self._tfeat(t, 1))
        (g,) = torch.autograd.grad(out, x, grad_outputs=self._to_torch(cotangent))
        return np.moveaxis(g[0].numpy(), 0, -1)

    def train(self, patches, steps: int = 500, batch: int = 16, lr: float = 3e-3, seed: int = 0) -> list[float]:
        """Adam on the DDPM noise-prediction loss; returns the per-step loss."""
        data = np.stack([np.asarray(p, dtype=np.float64) for p in patches])
        if data.ndim == 3:
            data = data[..., None]
        rng = np.random.default_rng(seed)
        opt = torch.optim.Adam(self.net.parameters(), lr=lr)
        history = []
        for _ in range(steps):
            idx = rng.integers(0, len(data), size=batch)
            x0 = data[idx]
            t = rng.integers(1, self.sched.T + 1, size=batch)
            eps = rng.standard_normal(x0.shape)
            xt = np.stack([forward_diffuse(x0[b], int(t[b]), eps[b], self.sched) for b in range(batch)])
            xt_t = torch.from_numpy(np.moveaxis(xt, -1, 1).copy())
            eps_t = torch.from_numpy(np.moveaxis(eps, -1, 1).copy())
            tf = torch.from_numpy(t.astype(np.float64) / self.sched.T)
            loss = ((self.net(xt_t, tf) - eps_t) ** 2).sum(dim=(1, 2, 3)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
        return history
