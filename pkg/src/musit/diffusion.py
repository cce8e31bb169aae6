"""Discrete DDPM/DDIM path and the trigonometric interpolant path.

A *model* here is any callable ``model(x, t, cond) -> prediction`` with
``x`` of shape (B, T, d), ``t`` a (B,) tensor in [0, 1] and ``cond`` a
:class:`~musit.backbone.Condition`. Discrete step ``i`` is presented to the
model as ``t = i / N``.

Interpolant: ``x_t = cos(pi t / 2) x* + sin(pi t / 2) eps``; t = 0 is data,
t = 1 is noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .backbone import Condition
from .layers import masked_randn

Model = Callable[[torch.Tensor, torch.Tensor, Condition], torch.Tensor]
HALF_PI = math.pi / 2


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# discrete schedule


@dataclass(frozen=True)
class DiscreteSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, n: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiscreteSchedule":
        betas = np.linspace(beta_start, beta_end, n, dtype=np.float64)
        if not (0 < betas.min() and betas.max() < 1):
            raise ValueError("betas must lie in (0, 1)")
        return cls(betas, np.cumprod(1.0 - betas))

    @property
    def n(self) -> int:
        return len(self.betas)

    def alpha_bar(self, i) -> np.ndarray:
        """Cumulative product for 1-based step ``i``; step 0 is the clean data (1.0)."""
        i = np.asarray(i)
        if ((i < 0) | (i > self.n)).any():
            raise DomainError(f"step index outside [0, {self.n}]")
        return np.where(i == 0, 1.0, self.alpha_bars[np.maximum(i, 1) - 1])

    def substeps(self, steps: int) -> list[int]:
        """Uniformly strided descending indices starting at N (the last step goes to 0)."""
        if not 1 <= steps <= self.n:
            raise DomainError(f"steps must be in [1, {self.n}], got {steps}")
        return [int(round(self.n - k * self.n / steps)) for k in range(steps)]


def forward_diffuse_discrete(x0, eps, i, schedule: DiscreteSchedule):
    """x_i = sqrt(abar_i) x0 + sqrt(1 - abar_i) eps for 1 <= i <= N (i scalar or (B,))."""
    i_arr = np.asarray(i)
    if ((i_arr < 1) | (i_arr > schedule.n)).any():
        raise DomainError(f"step index must be in [1, {schedule.n}]")
    ab = torch.as_tensor(schedule.alpha_bar(i_arr), dtype=x0.dtype).reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


# ---------------------------------------------------------------------------
# interpolant


def alpha_sigma(t):
    """(alpha, sigma, d alpha/dt, d sigma/dt) of the cos/sin interpolant."""
    t_arr = torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
    if ((t_arr < 0) | (t_arr > 1)).any():
        raise DomainError("interpolant time must lie in [0, 1]")
    a = torch.cos(HALF_PI * t_arr)
    s = torch.sin(HALF_PI * t_arr)
    return a, s, -HALF_PI * s, HALF_PI * a


def _bcast(v, x):
    v = torch.as_tensor(v, dtype=x.dtype)
    return v.reshape(-1, *([1] * (x.dim() - 1))) if v.dim() else v


def forward_interpolate(x_star, eps, t, mask=None):
    if x_star.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(x_star.shape)} vs {tuple(eps.shape)}")
    a, s, _, _ = alpha_sigma(t)
    xt = _bcast(a, x_star) * x_star + _bcast(s, x_star) * eps
    if mask is not None:
        xt = xt * mask[..., None].to(xt.dtype)
    return xt


def velocity_target(x_star, eps, t):
    _, _, da, ds = alpha_sigma(t)
    return _bcast(da, x_star) * x_star + _bcast(ds, x_star) * eps


def velocity_to_score(v, x, t):
    """s = (v - (a'/a) x) / (sigma (a' sigma / a - sigma')), defined for 0 < t < 1."""
    t_arr = torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
    if ((t_arr <= 0) | (t_arr >= 1)).any():
        raise DomainError("velocity/score conversion is singular at t = 0 and t = 1")
    a, s, da, ds = (_bcast(q, x) for q in alpha_sigma(t_arr))
    return (v - (da / a) * x) / (s * (da * s / a - ds))


def score_to_velocity(score, x, t):
    t_arr = torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
    if ((t_arr <= 0) | (t_arr >= 1)).any():
        raise DomainError("velocity/score conversion is singular at t = 0 and t = 1")
    a, s, da, ds = (_bcast(q, x) for q in alpha_sigma(t_arr))
    return (da / a) * x + s * (da * s / a - ds) * score


# ---------------------------------------------------------------------------
# training losses


def masked_mse(pred, target, mask) -> torch.Tensor:
    m = mask.to(pred.dtype)[..., None]
    n = m.sum() * pred.shape[-1]
    if n == 0:
        raise DomainError("empty target region")
    return (((pred - target) ** 2) * m).sum() / n


def _clean_inputs(x_star, cond: Condition):
    if not cond.target_mask.any():
        raise DomainError("empty target region")
    return cond.clamp(x_star)


def ddpm_loss(model: Model, x_star, cond: Condition, schedule: DiscreteSchedule,
              generator: torch.Generator, return_draws: bool = False):
    """Epsilon-prediction MSE at uniformly drawn steps over target-region entries."""
    x_star = _clean_inputs(x_star, cond)
    b = x_star.shape[0]
    i = torch.randint(1, schedule.n + 1, (b,), generator=generator)
    eps = masked_randn(x_star.shape, cond.latent_mask, generator, x_star.dtype)
    xt = cond.clamp(forward_diffuse_discrete(x_star, eps, i.numpy(), schedule))
    pred = model(xt, i.to(x_star.dtype) / schedule.n, cond)
    loss = masked_mse(pred, eps, cond.target_mask)
    return (loss, {"i": i, "eps": eps, "x_t": xt, "pred": pred}) if return_draws else loss


def sit_velocity_loss(model: Model, x_star, cond: Condition, generator: torch.Generator,
                      return_draws: bool = False):
    """Velocity MSE at t ~ U(0, 1) over target-region entries."""
    x_star = _clean_inputs(x_star, cond)
    b = x_star.shape[0]
    t = torch.rand(b, generator=generator, dtype=x_star.dtype)
    eps = masked_randn(x_star.shape, cond.latent_mask, generator, x_star.dtype)
    xt = cond.clamp(forward_interpolate(x_star, eps, t))
    v_star = velocity_target(x_star, eps, t)
    pred = model(xt, t, cond)
    loss = masked_mse(pred, v_star, cond.target_mask)
    return (loss, {"t": t, "eps": eps, "x_t": xt, "v": v_star, "pred": pred}) if return_draws else loss


# ---------------------------------------------------------------------------
# samplers


def _initial_noise(cond: Condition, seed: int) -> tuple[torch.Tensor, torch.Generator]:
    gen = torch.Generator().manual_seed(int(seed))
    x = masked_randn(cond.shape, cond.latent_mask, gen, cond.dtype)
    return cond.clamp(x), gen


def _trace(trace, step, t, x, pred):
    if trace is not None:
        trace.append((step, float(t), float(x.abs().mean()), float(pred.abs().mean())))


def ddim_step(x, eps_hat, i: int, i_next: int, schedule: DiscreteSchedule, clip: float | None = 6.0):
    ab, ab_next = (float(schedule.alpha_bar(k)) for k in (i, i_next))
    x0 = (x - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)
    if clip is not None:
        x0 = x0.clamp(-clip, clip)
    return math.sqrt(ab_next) * x0 + math.sqrt(1 - ab_next) * eps_hat


@torch.no_grad()
def ddim_sample(model: Model, cond: Condition, schedule: DiscreteSchedule, steps: int, seed: int,
                clip: float | None = 6.0, trace: list | None = None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM from seeded noise at step N down to 0."""
    seq = schedule.substeps(steps)
    x, _ = _initial_noise(cond, seed)
    b = x.shape[0]
    for k, i in enumerate(seq):
        i_next = seq[k + 1] if k + 1 < len(seq) else 0
        eps_hat = model(x, torch.full((b,), i / schedule.n, dtype=x.dtype), cond)
        x = cond.clamp(ddim_step(x, eps_hat, i, i_next, schedule, clip))
        _trace(trace, k, i / schedule.n, x, eps_hat)
    return x


def _time_grid(steps: int, t_min: float) -> np.ndarray:
    if steps < 1:
        raise DomainError("steps must be >= 1")
    return np.linspace(1.0 - t_min, t_min, steps + 1)


@torch.no_grad()
def ode_sample_heun(model: Model, cond: Condition, steps: int, seed: int, t_min: float = 0.0,
                    trace: list | None = None) -> torch.Tensor:
    """Heun integration of dx/dt = v(x, t) from t = 1 - t_min down to t_min.

    The final step is a plain Euler step so the velocity is never evaluated at
    the data end, where the conditional field is singular; the local error of
    that one step is O(h^2), so the scheme stays second order.
    """
    grid = _time_grid(steps, t_min)
    x, _ = _initial_noise(cond, seed)
    b = x.shape[0]
    for k in range(steps):
        t0, t1 = float(grid[k]), float(grid[k + 1])
        h = t1 - t0
        v0 = model(x, torch.full((b,), t0, dtype=x.dtype), cond)
        if k == steps - 1:
            x = cond.clamp(x + h * v0)
        else:
            x_pred = cond.clamp(x + h * v0)
            v1 = model(x_pred, torch.full((b,), t1, dtype=x.dtype), cond)
            x = cond.clamp(x + 0.5 * h * (v0 + v1))
        _trace(trace, k, t1, x, v0)
    return x


@torch.no_grad()
def ode_sample_euler(model: Model, cond: Condition, steps: int, seed: int, t_min: float = 1e-3,
                     trace: list | None = None) -> torch.Tensor:
    grid = _time_grid(steps, t_min)
    x, _ = _initial_noise(cond, seed)
    b = x.shape[0]
    for k in range(steps):
        t0, t1 = float(grid[k]), float(grid[k + 1])
        v = model(x, torch.full((b,), t0, dtype=x.dtype), cond)
        x = cond.clamp(x + (t1 - t0) * v)
        _trace(trace, k, t1, x, v)
    return x


def sigma_diffusion(t) -> float:
    """w(t) = sin(pi t / 2): the default diffusion coefficient."""
    return math.sin(HALF_PI * t)


@torch.no_grad()
def sde_sample_euler(model: Model, cond: Condition, steps: int, w: Callable[[float], float], seed: int,
                     t_min: float = 1e-3, trace: list | None = None) -> torch.Tensor:
    """Euler-Maruyama on dx = [v - (w/2) s] dt + sqrt(w) dW, integrated backwards in time.

    The score comes from the velocity prediction; t is confined to
    [t_min, 1 - t_min]. With ``w = 0`` every step equals the Euler ODE step.
    """
    grid = _time_grid(steps, t_min)
    x, gen = _initial_noise(cond, seed)
    b = x.shape[0]
    for k in range(steps):
        t0, t1 = float(grid[k]), float(grid[k + 1])
        h = t1 - t0
        wt = float(w(t0))
        if wt < 0:
            raise DomainError(f"diffusion coefficient w({t0}) = {wt} is negative")
        tt = torch.full((b,), t0, dtype=x.dtype)
        v = model(x, tt, cond)
        s = velocity_to_score(v, x, tt)
        z = masked_randn(x.shape, cond.latent_mask, gen, x.dtype)
        x = cond.clamp(x + h * (v - 0.5 * wt * s) + math.sqrt(wt * abs(h)) * z)
        _trace(trace, k, t1, x, v)
    return x


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 50
    t_min: float = 1e-3
    diffusion: str = "sigma"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddim", "ode_heun", "sde_euler"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("sampler steps must be >= 1")
        if self.diffusion not in ("sigma", "zero"):
            raise ValueError(f"unknown diffusion coefficient {self.diffusion!r}")

    def w(self) -> Callable[[float], float]:
        return sigma_diffusion if self.diffusion == "sigma" else (lambda t: 0.0)


def sample(model: Model, cond: Condition, sampler: SamplerConfig, schedule: DiscreteSchedule | None = None,
           seed: int | None = None, trace: list | None = None) -> torch.Tensor:
    seed = sampler.seed if seed is None else seed
    if sampler.kind == "ddim":
        return ddim_sample(model, cond, schedule or DiscreteSchedule.linear(), sampler.steps, seed, trace=trace)
    if sampler.kind == "ode_heun":
        return ode_sample_heun(model, cond, sampler.steps, seed, t_min=sampler.t_min, trace=trace)
    return sde_sample_euler(model, cond, sampler.steps, sampler.w(), seed, t_min=sampler.t_min, trace=trace)
