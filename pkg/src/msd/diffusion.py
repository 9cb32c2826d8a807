"""Noise schedules and diffusion steps for an x0-predicting denoiser.

Step functions take plain coefficients and work on numpy arrays or torch
tensors alike, so chains stay differentiable when fed tensors. Time steps are
1-based; index 0 of every table is the clean signal (alpha = alpha_bar = 1).
Noise is always supplied by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidSchedule, NotOnDdimGrid, ShapeMismatch

MAX_BETA = 0.9999


@dataclass(frozen=True)
class DiffusionSchedule:
    kind: str
    T: int
    S: int
    alpha: np.ndarray  # (T+1,), alpha[0] = 1
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] = 1
    ddim_index_map: tuple[int, ...]

    def beta(self, t: int) -> float:
        return 1.0 - float(self.alpha[t])

    def snap(self, k: int) -> int:
        """Largest DDIM grid point <= k (0 if k is below the first grid point)."""
        below = [t for t in self.ddim_index_map if t <= k]
        return below[-1] if below else 0

    def ddim_path(self, k: int) -> list[int]:
        """Grid points ``[0, t_1, ..., snap(k)]`` in increasing order."""
        top = self.snap(k)
        return [0] + [t for t in self.ddim_index_map if t <= top]

    def num_ddim_steps(self, k: int) -> int:
        return len(self.ddim_path(k)) - 1


def _cosine_alpha_bar(T: int, s: float = 0.008) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T) + s) / (1.0 + s) * math.pi / 2.0) ** 2
    return f / f[0]


def make_schedule(kind: str = "cosine", T: int = 1000, S: int = 20) -> DiffusionSchedule:
    if not (isinstance(T, int) and isinstance(S, int)) or not T >= S >= 1:
        raise InvalidSchedule(f"need integers T >= S >= 1, got T={T}, S={S}")
    if kind == "cosine":
        ab = _cosine_alpha_bar(T)
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, MAX_BETA)
    elif kind == "linear":
        scale = 1000.0 / T
        beta = np.linspace(1e-4 * scale, 0.02 * scale, T)
    else:
        raise InvalidSchedule(f"unknown schedule kind {kind!r}")
    alpha = np.concatenate([[1.0], 1.0 - beta])
    alpha_bar = np.cumprod(alpha)
    a = alpha[1:]
    if np.any(a <= 0.0) or np.any(a >= 1.0):
        raise InvalidSchedule("alpha_t must lie in (0, 1)")
    if np.any(np.diff(a) >= 0.0):
        raise InvalidSchedule("alpha_t must be strictly decreasing")
    if not alpha_bar[T] < 1e-3:
        raise InvalidSchedule(f"alpha_bar_T = {alpha_bar[T]:.3g} is not < 1e-3")
    grid = tuple((i * T) // S for i in range(1, S + 1))
    if any(b <= a_ for a_, b in zip(grid, grid[1:])) or grid[-1] != T or grid[0] < 1:
        raise InvalidSchedule("DDIM grid must be strictly increasing and end at T")
    return DiffusionSchedule(kind, T, S, alpha, alpha_bar, grid)


def _check_t(sched: DiffusionSchedule, t: int, lo: int = 1) -> None:
    if not lo <= t <= sched.T:
        raise InvalidSchedule(f"step {t} outside [{lo}, {sched.T}]")


def _check_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def forward_sample(sched: DiffusionSchedule, m0, t: int, eps):
    """Closed form ``m_t = sqrt(abar_t) m0 + sqrt(1 - abar_t) eps``."""
    _check_t(sched, t, lo=0)
    _check_shape(m0, eps)
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * m0 + math.sqrt(1.0 - ab) * eps


def forward_step(sched: DiffusionSchedule, m_prev, t: int, eps):
    """One Markov step ``m_t = sqrt(alpha_t) m_{t-1} + sqrt(1 - alpha_t) eps``."""
    _check_t(sched, t)
    _check_shape(m_prev, eps)
    a = float(sched.alpha[t])
    return math.sqrt(a) * m_prev + math.sqrt(1.0 - a) * eps


def posterior_coefficients(sched: DiffusionSchedule, t: int) -> tuple[float, float, float]:
    """``(c_x0, c_xt, variance)`` of q(m_{t-1} | m_t, m_0)."""
    _check_t(sched, t)
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t - 1])
    beta = 1.0 - float(sched.alpha[t])
    c_x0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    c_xt = math.sqrt(float(sched.alpha[t])) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
    return c_x0, c_xt, var


def ddpm_reverse_step(sched: DiffusionSchedule, m_t, t: int, x0_hat, eps_fresh=None):
    """Posterior mean from ``(m_t, x0_hat)`` plus ``sigma_t * eps_fresh`` for t > 1."""
    _check_shape(m_t, x0_hat)
    c_x0, c_xt, var = posterior_coefficients(sched, t)
    mean = c_x0 * x0_hat + c_xt * m_t
    if t == 1 or eps_fresh is None:
        return mean
    _check_shape(m_t, eps_fresh)
    return mean + math.sqrt(var) * eps_fresh


def _check_adjacent(sched: DiffusionSchedule, t: int, t_prev: int) -> None:
    if t == t_prev:
        return
    points = (0,) + sched.ddim_index_map
    if t not in points or t_prev not in points or points.index(t) != points.index(t_prev) + 1:
        raise NotOnDdimGrid(f"({t} -> {t_prev}) are not adjacent DDIM grid points")


def implied_noise(sched: DiffusionSchedule, m_t, t: int, x0_hat):
    ab = float(sched.alpha_bar[t])
    return (m_t - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)


def ddim_reverse_step(sched: DiffusionSchedule, m_t, t: int, t_prev: int, x0_hat):
    """Deterministic (eta = 0) DDIM update from grid point ``t`` to ``t_prev``."""
    _check_adjacent(sched, t, t_prev)
    if t == t_prev:
        return m_t
    _check_shape(m_t, x0_hat)
    eps_hat = implied_noise(sched, m_t, t, x0_hat)
    ab_prev = float(sched.alpha_bar[t_prev])
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_forward_step(sched: DiffusionSchedule, m_prev, t_prev: int, t: int, x0_hat=None):
    """Deterministic DDIM inversion from grid point ``t_prev`` up to ``t``.

    From the clean signal (``t_prev == 0``) the noise is undefined for an x0
    model, so the step is the noise-free forward mean ``sqrt(abar_t) m0``.
    """
    _check_adjacent(sched, t, t_prev)
    if t == t_prev:
        return m_prev
    ab = float(sched.alpha_bar[t])
    if t_prev == 0:
        return math.sqrt(ab) * m_prev
    _check_shape(m_prev, x0_hat)
    eps_hat = implied_noise(sched, m_prev, t_prev, x0_hat)
    return math.sqrt(ab) * x0_hat + math.sqrt(1.0 - ab) * eps_hat


Denoise = Callable[[object, int], object]


def ddim_invert(sched: DiffusionSchedule, denoise: Denoise, m0, k: int):
    """Run deterministic inversion over the grid up to ``snap(k)``; returns ``m_k``."""
    path = sched.ddim_path(k)
    m = m0
    for t_prev, t in zip(path[:-1], path[1:]):
        x0_hat = denoise(m, t_prev) if t_prev > 0 else None
        m = ddim_forward_step(sched, m, t_prev, t, x0_hat)
    return m


def ddim_sample(sched: DiffusionSchedule, denoise: Denoise, m_k, k: int, return_predictions: bool = False):
    """Deterministic reverse chain from ``snap(k)`` to 0.

    With ``return_predictions`` also returns the list of x0 predictions made
    at every chain step (highest t first).
    """
    path = sched.ddim_path(k)
    m = m_k
    preds = []
    for t, t_prev in zip(path[:0:-1], path[-2::-1]):
        x0_hat = denoise(m, t)
        preds.append(x0_hat)
        m = ddim_reverse_step(sched, m, t, t_prev, x0_hat)
    return (m, preds) if return_predictions else m


def ddpm_sample(sched: DiffusionSchedule, denoise: Denoise, m_start, start_t: int, noise: Callable[[int], object],
                inpaint: Callable[[object], object] | None = None):
    """Ancestral DDPM chain from ``start_t`` down to 0.

    ``noise(t)`` supplies fresh standard-normal noise for step t (t > 1).
    ``inpaint`` is applied to every x0 prediction before it is used.
    Returns the final clean estimate (the inpainted prediction at t = 1).
    """
    m = m_start
    x0_hat = m_start
    for t in range(start_t, 0, -1):
        x0_hat = denoise(m, t)
        if inpaint is not None:
            x0_hat = inpaint(x0_hat)
        m = ddpm_reverse_step(sched, m, t, x0_hat, noise(t) if t > 1 else None)
    return x0_hat if start_t > 0 else m
