"""Diffusion sampling arithmetic: ancestral schedule constants, strength-
controlled partial sampling, and multi-view consistency rectification
coupled to Gaussian-scene updates.

One reverse step is x_{t-1} = s_t * x_t + d_t * mu_t + sigma_t * eps, where
mu_t is the denoiser's estimate of the clean signal x_0 and the constants
come from the standard ancestral decomposition of a variance schedule:

    s_t = sqrt(a_t) * (1 - abar_{t-1}) / (1 - abar_t)
    d_t = sqrt(abar_{t-1}) * b_t / (1 - abar_t)
    sigma_t = posterior std = sqrt(b_t * (1 - abar_{t-1}) / (1 - abar_t))

with b_t the per-step variance, a_t = 1 - b_t, abar the cumulative product
(abar_0 = 1). These satisfy s_t * sqrt(abar_t) + d_t = sqrt(abar_{t-1}) for
every t, and sigma_1 = 0 so the final step lands exactly on mu_1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegeneracyError, InputError


@dataclass(frozen=True)
class VarianceSpec:
    """Per-step noise variances: linear ramp beta_start..beta_end over T."""

    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def betas(self, timesteps: int) -> np.ndarray:
        if self.kind != "linear":
            raise InputError(f"unknown variance spec kind {self.kind!r}")
        if not (0.0 <= self.beta_start <= self.beta_end < 1.0):
            raise InputError("variance spec needs 0 <= beta_start <= beta_end < 1")
        if timesteps == 1:
            return np.array([self.beta_end])
        return np.linspace(self.beta_start, self.beta_end, timesteps)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed per-step constants, indexed by timestep t in [1, T]."""

    timesteps: int
    betas: np.ndarray
    alpha_bars: np.ndarray   # abar_t for t = 1..T
    s: np.ndarray
    d: np.ndarray
    sigma: np.ndarray

    def s_t(self, t: int) -> float:
        return float(self.s[t - 1])

    def d_t(self, t: int) -> float:
        return float(self.d[t - 1])

    def sigma_t(self, t: int) -> float:
        return float(self.sigma[t - 1])

    def alpha_bar(self, t: int) -> float:
        """abar_t with the abar_0 = 1 convention."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def to_json(self) -> str:
        return json.dumps({
            "timesteps": self.timesteps,
            "betas": self.betas.tolist(),
            "s": self.s.tolist(),
            "d": self.d.tolist(),
            "sigma": self.sigma.tolist(),
        }, indent=2)


def build_schedule(timesteps: int, variance: VarianceSpec = VarianceSpec()) -> DiffusionSchedule:
    """Ancestral-sampler constants for a variance schedule; see module docs.

    Degenerate steps with abar_t == 1 (an all-zero variance prefix) become
    exact pass-throughs: s=1, d=0, sigma=0.
    """
    if timesteps < 1:
        raise InputError("schedule needs at least 1 timestep")
    betas = variance.betas(timesteps)
    alphas = 1.0 - betas
    abar = np.cumprod(alphas)
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    one_minus = 1.0 - abar
    degenerate = one_minus <= 0.0
    safe = np.where(degenerate, 1.0, one_minus)
    s = np.where(degenerate, 1.0, np.sqrt(alphas) * (1.0 - abar_prev) / safe)
    d = np.where(degenerate, 0.0, np.sqrt(abar_prev) * betas / safe)
    sigma = np.where(degenerate, 0.0,
                     np.sqrt(np.clip(betas * (1.0 - abar_prev) / safe, 0.0, None)))
    return DiffusionSchedule(timesteps=timesteps, betas=betas, alpha_bars=abar,
                             s=s, d=d, sigma=sigma)


def strength_to_start_step(gamma: float, timesteps: int) -> int:
    """Map denoising strength to the starting timestep: t = round(gamma * T).

    gamma = 1 starts from pure noise; gamma = 0 performs no denoising.
    """
    if not (0.0 <= gamma <= 1.0):
        raise InputError(f"gamma must lie in [0, 1], got {gamma}")
    return int(np.floor(gamma * timesteps + 0.5))


@dataclass
class DenoisingState:
    """One view's in-flight sample x_t plus its private noise stream."""

    x: np.ndarray
    t: int
    seed: int
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if not (0 <= self.t):
            raise InputError("timestep must be >= 0")
        self.rng = np.random.default_rng(self.seed)


def init_state(signal: np.ndarray, gamma: float, schedule: DiffusionSchedule,
               seed: int) -> DenoisingState:
    """Starting state for gamma-strength sampling of `signal`.

    gamma = 1 is pure seeded noise (independent of the signal); intermediate
    gamma forward-noises the signal to the corresponding timestep; gamma = 0
    returns the signal at t = 0 (nothing to do).
    """
    t = strength_to_start_step(gamma, schedule.timesteps)
    state = DenoisingState(x=np.array(signal, dtype=np.float64), t=t, seed=seed)
    if t == schedule.timesteps:
        state.x = state.rng.standard_normal(state.x.shape)
    elif t > 0:
        abar = schedule.alpha_bar(t)
        eps = state.rng.standard_normal(state.x.shape)
        state.x = np.sqrt(abar) * state.x + np.sqrt(1.0 - abar) * eps
    return state


@dataclass
class RectificationInputs:
    mu_t: np.ndarray
    mu_bar_t: np.ndarray
    w_t: float

    def __post_init__(self):
        self.mu_t = np.asarray(self.mu_t, dtype=np.float64)
        self.mu_bar_t = np.asarray(self.mu_bar_t, dtype=np.float64)
        if self.mu_t.shape != self.mu_bar_t.shape:
            raise InputError("rectification inputs must share a shape")
        if not (0.0 <= self.w_t <= 1.0):
            raise InputError("w_t must lie in [0, 1]")


def rectify_mu(inputs: RectificationInputs) -> np.ndarray:
    """Blend the denoiser estimate toward the scene render, range-normalized:

        phi = std(mu) / std(mu_bar)        (population std, all elements)
        mu_hat = w * phi * mu_bar + (1 - w) * mu

    The phi factor equalizes dynamic range so the render term cannot
    over- or under-expose the blend.
    """
    if inputs.w_t == 0.0:
        return inputs.mu_t.copy()
    std_ref = float(inputs.mu_bar_t.std())
    if std_ref == 0.0:
        raise DegeneracyError("reference render has zero std; cannot normalize")
    phi = float(inputs.mu_t.std()) / std_ref
    return inputs.w_t * phi * inputs.mu_bar_t + (1.0 - inputs.w_t) * inputs.mu_t


Denoiser = Callable[[np.ndarray, int], np.ndarray]
Rectifier = Callable[[np.ndarray, int], np.ndarray]


def sample_step(state: DenoisingState, schedule: DiffusionSchedule,
                denoiser: Denoiser, rectifier: Rectifier | None = None) -> DenoisingState:
    """Advance one reverse step: query the denoiser for mu_t, optionally
    rectify it, then apply x_{t-1} = s_t x_t + d_t mu_t + sigma_t eps."""
    t = state.t
    if t < 1:
        raise InputError("sample_step requires t >= 1")
    mu = np.asarray(denoiser(state.x, t), dtype=np.float64)
    if rectifier is not None:
        mu = rectifier(mu, t)
    x_prev = schedule.s_t(t) * state.x + schedule.d_t(t) * mu
    sigma = schedule.sigma_t(t)
    if sigma > 0.0:
        x_prev = x_prev + sigma * state.rng.standard_normal(state.x.shape)
    state.x = x_prev
    state.t = t - 1
    return state


def run_sampling(state: DenoisingState, schedule: DiffusionSchedule,
                 denoiser: Denoiser, rectifier: Rectifier | None = None) -> np.ndarray:
    """Run the state down to t = 0 and return x_0."""
    while state.t > 0:
        sample_step(state, schedule, denoiser, rectifier)
    return state.x


def linear_w_schedule(w_at_T: float = 0.8, w_at_1: float = 0.2) -> Callable[[int, int], float]:
    """Blend-weight ramp: w(T) = w_at_T down to w(1) = w_at_1."""

    def w(t: int, timesteps: int) -> float:
        if timesteps <= 1 or t <= 1:
            return w_at_1
        frac = (t - 1) / (timesteps - 1)
        return w_at_1 + (w_at_T - w_at_1) * frac

    return w


def run_mcs(views: Sequence, scene, schedule: DiffusionSchedule,
            denoisers: Sequence[Denoiser], w_schedule: Callable[[int, int], float],
            optimizer_config, seed: int, gamma: float = 1.0,
            step_callback: Callable[[int, list[np.ndarray]], None] | None = None):
    """Multi-view consistency sampling over N views, updating the scene.

    Per denoising step (all views advance in lockstep): render the current
    scene at every view as the reference mu_bar, rectify each view's
    denoiser estimate toward it, advance each x_t one step, then refit the
    scene against the clipped rectified estimates. Returns the final
    x_0 list and the updated scene.

    `views` are FrameEntry-like objects carrying pose/intrinsics; their
    images are ignored except as the gamma < 1 starting signal.
    """
    from . import gaussian_scene as gs

    if len(views) < 1:
        raise InputError("run_mcs needs at least one view")
    if len(denoisers) != len(views):
        raise InputError("one denoiser callable per view is required")

    settings = optimizer_config.settings
    states = []
    for i, view in enumerate(views):
        start = np.asarray(view.image, dtype=np.float64)
        states.append(init_state(start, gamma, schedule, seed=seed + 1000 + i))

    mcs_frames = [gs.FrameEntry(image=v.image, mask=np.ones(v.image.shape[:2]),
                                pose=v.pose, intrinsics=v.intrinsics)
                  for v in views]

    t_start = states[0].t
    for t in range(t_start, 0, -1):
        mu_bars = [gs.render(scene, v.intrinsics, v.pose, settings).rgb for v in views]
        w_t = w_schedule(t, schedule.timesteps)
        mu_hats = []
        for i, state in enumerate(states):
            mu = np.asarray(denoisers[i](state.x, t), dtype=np.float64)
            mu_hat = rectify_mu(RectificationInputs(mu_t=mu, mu_bar_t=mu_bars[i], w_t=w_t))
            mu_hats.append(mu_hat)
            x_prev = schedule.s_t(t) * state.x + schedule.d_t(t) * mu_hat
            sigma = schedule.sigma_t(t)
            if sigma > 0.0:
                x_prev = x_prev + sigma * state.rng.standard_normal(state.x.shape)
            state.x = x_prev
            state.t = t - 1
        for frame, mu_hat in zip(mcs_frames, mu_hats):
            frame.image = np.clip(mu_hat, 0.0, 1.0)
        gs.optimize(scene, optimizer_config, seed=seed + t, frames=mcs_frames)
        if step_callback is not None:
            step_callback(t, [s.x for s in states])
    return [s.x for s in states], scene
