"""Rectified-flow training and sampling primitives.

The flow interpolates linearly between a noise sample x0 and a data latent x1;
the regression target is the constant velocity x1 - x0. All array operations
here work on both numpy arrays and torch tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class IntegrationError(RuntimeError):
    """Sampling produced non-finite values."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


def _check_shapes(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x0, x1, t):
    """x_t = t*x1 + (1-t)*x0 for t in [0,1]; t may broadcast per-sample."""
    _check_shapes(x0, x1, "interpolate")
    return t * x1 + (1.0 - t) * x0


def velocity_target(x0, x1):
    """The constant velocity x1 - x0 (independent of t)."""
    _check_shapes(x0, x1, "velocity_target")
    return x1 - x0


def sample_timestep(rng: np.random.Generator, distribution: str = "uniform",
                    mu: float = 0.0, sigma: float = 1.0, size=None):
    """Draw t from the configured distribution; values lie in the open (0,1)."""
    if distribution == "uniform":
        t = rng.random(size)
    elif distribution == "logit-normal":
        z = rng.normal(mu, sigma, size)
        t = 1.0 / (1.0 + np.exp(-z))
    else:
        raise ValueError(f"unknown timestep distribution: {distribution!r}")
    eps = 1e-7
    return np.clip(t, eps, 1.0 - eps)


def rf_loss(model, xt, cond, t, vt):
    """Mean squared error between predicted and target velocity."""
    pred = model(xt, cond, t)
    _check_shapes(pred, vt, "rf_loss")
    diff = pred - vt
    return (diff * diff).mean()


def euler_sample(velocity_fn, x0, cond=None, n_steps: int = 8):
    """Integrate dx/dt = v(x, c, t) from t=0 to 1 with fixed Euler steps.

    x <- x + (1/n)*v(x, c, k/n) for k = 0..n-1.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    is_torch = isinstance(x0, torch.Tensor)
    x = x0.clone() if is_torch else np.array(x0, copy=True)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        v = velocity_fn(x, cond, k / n_steps)
        x = x + dt * v
        finite = torch.isfinite(x).all() if is_torch else np.isfinite(x).all()
        if not finite:
            raise IntegrationError(f"non-finite state after integration step {k}")
    return x


@dataclass
class RFSample:
    """One training draw: endpoints, timestep, interpolant and target."""

    x0: np.ndarray
    x1: np.ndarray
    t: float
    xt: np.ndarray
    vt: np.ndarray

    def __post_init__(self):
        _check_shapes(self.x0, self.x1, "RFSample")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must be in [0,1], got {self.t}")


def make_rf_sample(x1: np.ndarray, rng: np.random.Generator,
                   distribution: str = "uniform", mu: float = 0.0, sigma: float = 1.0) -> RFSample:
    x1 = np.asarray(x1, dtype=np.float32)
    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    t = float(sample_timestep(rng, distribution, mu, sigma))
    return RFSample(x0=x0, x1=x1, t=t,
                    xt=interpolate(x0, x1, t), vt=velocity_target(x0, x1))


def make_optimizer(model: torch.nn.Module, lr: float, weight_decay: float = 0.01):
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def train_step(model, batch, optimizer) -> float:
    """One gradient step on a batch of (RFSample, ConditioningPack) pairs.

    Returns the loss evaluated *before* the update. Packs in a batch must share
    their token layout.
    """
    if not batch:
        raise ValueError("empty training batch")
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    xt = torch.stack([torch.from_numpy(s.xt).to(dtype) for s, _ in batch]).to(device)
    vt = torch.stack([torch.from_numpy(s.vt).to(dtype) for s, _ in batch]).to(device)
    t = torch.tensor([s.t for s, _ in batch], dtype=dtype, device=device)
    packs = [p for _, p in batch]
    loss = rf_loss(model, xt, packs, t, vt)
    if not torch.isfinite(loss):
        raise TrainingError("non-finite training loss")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())
