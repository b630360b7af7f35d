"""Cosine noise schedule and the deterministic DDIM forward/inverse steps.

alpha_bar here is the cumulative signal coefficient; the sampler update is

    z_{t-1} = sqrt(abar_{t-1}/abar_t) z_t
              + sqrt(abar_{t-1}) (sqrt(1/abar_{t-1} - 1) - sqrt(1/abar_t - 1)) eps

and the inverse step is its algebraic mirror with t -> t+1. Both are exact
inverses of each other under a shared eps, which the tests exploit.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Field
from .attention import COND, UNCOND, AttentionTape, Conditioning
from .denoiser import cfg_eps
from .errors import ConfigError, DimensionError, NumericAbort


@dataclass(frozen=True)
class Schedule:
    """Cumulative signal coefficients abar_0..abar_T, strictly decreasing, abar_0 = 1."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or ab.size < 3:
            raise ConfigError("schedule needs at least T+1 = 3 coefficients")
        if ab[0] != 1.0:
            raise ConfigError(f"abar_0 must be 1, got {ab[0]}")
        if ab[-1] <= 0.0 or np.any(np.diff(ab) >= 0.0):
            raise ConfigError("abar must be strictly decreasing and end above 0")

    @property
    def T(self):
        return self.alpha_bar.size - 1


def make_schedule(T):
    """Cosine schedule (offset s = 0.008) with T native steps, clamped to [1e-4, 1]."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    s = 0.008
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
    abar = np.clip(f / f[0], 1e-4, 1.0)
    return Schedule(abar)


def _coeffs(sched, t_from, t_to):
    ab = sched.alpha_bar
    a_from, a_to = float(ab[t_from]), float(ab[t_to])
    c1 = math.sqrt(a_to / a_from)
    c2 = math.sqrt(a_to) * (math.sqrt(1.0 / a_to - 1.0) - math.sqrt(1.0 / a_from - 1.0))
    return c1, c2


def ddim_step(z_t, eps, t, sched):
    """One deterministic sampling step t -> t-1."""
    if not 1 <= t <= sched.T:
        raise DimensionError(f"ddim_step: t={t} outside 1..{sched.T}")
    if z_t.shape != eps.shape:
        raise DimensionError(f"ddim_step: z {z_t.shape} vs eps {eps.shape}")
    c1, c2 = _coeffs(sched, t, t - 1)
    return ad.add(ad.mul(z_t, c1), ad.mul(eps, c2))


def ddim_inverse_step(z_t, eps, t, sched):
    """One inversion step t -> t+1 (mirror of ddim_step)."""
    if not 0 <= t <= sched.T - 1:
        raise DimensionError(f"ddim_inverse_step: t={t} outside 0..{sched.T - 1}")
    if z_t.shape != eps.shape:
        raise DimensionError(f"ddim_inverse_step: z {z_t.shape} vs eps {eps.shape}")
    c1, c2 = _coeffs(sched, t, t + 1)
    return ad.add(ad.mul(z_t, c1), ad.mul(eps, c2))


@dataclass
class Trajectory:
    """Latents z_0..z_T plus the per-timestep attention tapes a_1..a_T."""

    latents: list = field(default_factory=list)      # T+1 arrays, latents[0] == source
    attn: list = field(default_factory=list)         # T tapes, attn[i] is timestep i+1

    def tape_at(self, t):
        return self.attn[t - 1]


def ddim_invert(x, cond, sched, model, w=1.0, uncond=None):
    """Run the inverse steps from an image to latent noise, capturing attention.

    Returns z_0..z_T and the cross/self maps a_1..a_T of the guided branch.
    The step from z_t uses eps(z_t, t); one extra prediction at (z_T, T)
    supplies a_T, and the latent it would synthesize is discarded.
    """
    T = sched.T
    z = x if isinstance(x, Field) else Field(np.asarray(x, dtype=np.float32))
    traj = Trajectory(latents=[z.data.copy()])
    for t in range(T):
        tape = AttentionTape()
        eps = cfg_eps(model, z, t, cond, uncond, w, tapes={COND: tape, UNCOND: tape})
        if not np.isfinite(eps.data).all():
            raise NumericAbort(f"ddim_invert: non-finite eps at t={t}")
        if t >= 1:
            traj.attn.append(tape)
        z = ddim_inverse_step(z, eps, t, sched)
        traj.latents.append(z.data.copy())
    # attention at t = T comes from one more prediction; z_{T+1} is thrown out
    tape = AttentionTape()
    cfg_eps(model, z, T, cond, uncond, w, tapes={COND: tape, UNCOND: tape})
    traj.attn.append(tape)
    return traj


def ddim_sample(z_T, cond_schedule, sched, model, w, uncond=None, hooks=None,
                tape_sink=None):
    """Deterministic sampling T -> 0 with per-timestep conditioning.

    cond_schedule is either a Conditioning or a callable t -> Conditioning
    (the mechanism behind the value-source switch). hooks, when given,
    supplies per-step attention/feature overrides and feature capture:
    attn_overrides(t, branch), feature_overrides(t, branch),
    feature_sink(t, branch). Returns the final z_0 array.
    """
    T = sched.T
    z = z_T if isinstance(z_T, Field) else Field(np.asarray(z_T, dtype=np.float32))
    for t in range(T, 0, -1):
        cond = cond_schedule(t) if callable(cond_schedule) else cond_schedule
        tapes = None
        if tape_sink is not None:
            tape = AttentionTape()
            tapes = {COND: tape, UNCOND: tape}
        kwargs = {}
        if hooks is not None:
            kwargs["overrides"] = {b: hooks.attn_overrides(t, b) for b in (COND, UNCOND)}
            kwargs["feature_overrides"] = {b: hooks.feature_overrides(t, b) for b in (COND, UNCOND)}
            kwargs["feature_sink"] = {b: hooks.feature_sink(t, b) for b in (COND, UNCOND)}
        eps = cfg_eps(model, z, t, cond, uncond, w, tapes=tapes, **kwargs)
        if not np.isfinite(eps.data).all():
            raise NumericAbort(f"ddim_sample: non-finite eps at t={t}")
        z = ddim_step(z, eps, t, sched)
        if tape_sink is not None:
            tape_sink.append(tape)
    return z.data


class SampleHooks:
    """Base hooks object for ddim_sample; override what you need."""

    def attn_overrides(self, t, branch):
        return None

    def feature_overrides(self, t, branch):
        return None

    def feature_sink(self, t, branch):
        return None
