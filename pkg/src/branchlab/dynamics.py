"""Single-particle trait dynamics: Euler-Maruyama steps and thinned jumps.

The three dynamics classes share one fixed-step scheme:

- diffusion:        x -> x - a(x) dt + sqrt(dt) * N(0,1)
- diffusion-jumps:  with probability Rbar(x) dt a jump from R(x,.)/Rbar(x)
                    replaces the diffusion step
- drifted-jump:     x -> x + dt between jumps (exact translation, no
                    discretization error in the drift)

Jump thinning requires sup Rbar * dt <= 0.1 so the neglected double-jump
probability stays O(dt^2) below statistical noise.  All step functions are
stateless; randomness comes from the counter-based streams in ``rng``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .model import DIFFUSION, DRIFTED_JUMP

__all__ = ["PathSegment", "step_diffusion", "step_with_jumps", "sample_path", "THINNING_CAP"]

THINNING_CAP = 0.1


class ConfigurationError(ValueError):
    pass


@dataclass
class PathSegment:
    """A sampled trajectory piece: aligned times/states plus jump flags."""

    times: np.ndarray
    states: np.ndarray
    jumped: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.jumped = np.asarray(self.jumped, dtype=bool)

    @property
    def t_start(self):
        return float(self.times[0])

    @property
    def t_end(self):
        return float(self.times[-1])

    def state_at(self, t):
        """State at time t by previous-value lookup (cadlag convention)."""
        i = np.searchsorted(self.times, t, side="right") - 1
        return float(self.states[max(i, 0)])


def step_diffusion(x, dt, noise, a):
    """One Euler-Maruyama step of dX = dB - a(X) dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return x - a(x) * dt + np.sqrt(dt) * noise


def check_thinning_cap(dyn, dt, scan_radius=50.0):
    if not dyn.has_jumps:
        return
    xs = np.linspace(-scan_radius, scan_radius, 1001)
    sup_rate = float(np.max(dyn.jump.total_mass(xs)))
    if sup_rate * dt > THINNING_CAP + 1e-12:
        raise ConfigurationError(
            f"jump thinning needs sup Rbar * dt <= {THINNING_CAP}; "
            f"got {sup_rate * dt:.3g}, reduce dt to {THINNING_CAP / sup_rate:.3g}"
        )


def step_with_jumps(x, dt, key, step_index, dyn):
    """One thinned step of a jump variant; returns (new state, jumped flag).

    With probability Rbar(x) dt the particle jumps to z ~ R(x,.)/Rbar(x);
    otherwise it takes the continuous step (diffusion or x + dt).
    Vectorized over x/key arrays.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    key = np.asarray(key, dtype=np.uint64)
    kernel = dyn.jump
    rate = np.asarray(kernel.total_mass(x), dtype=float)
    if np.max(rate, initial=0.0) * dt > THINNING_CAP + 1e-12:
        raise ConfigurationError("dt too large for the jump thinning cap")
    u_accept = rng.uniform(key, step_index, rng.CH_MOVE)
    jumped = u_accept < rate * dt
    u_size = rng.uniform(key, step_index, rng.CH_JUMP_SIZE)
    z_jump = x + kernel.sample_displacement(u_size)
    if dyn.variant == DRIFTED_JUMP:
        z_cont = x + dt
    else:
        noise = rng.normal(key, step_index, rng.CH_MOVE2)
        z_cont = x - dyn.a(x) * dt + np.sqrt(dt) * noise
    out = np.where(jumped, z_jump, z_cont)
    if out.ndim == 0:
        return float(out), bool(jumped)
    return out, jumped


def _one_step(x, key, step_index, dt, dyn):
    if dyn.has_jumps:
        return step_with_jumps(x, dt, key, step_index, dyn)
    noise = rng.normal(np.asarray(key, dtype=np.uint64), step_index, rng.CH_MOVE)
    out = np.asarray(x, dtype=float) - dyn.a(x) * dt + np.sqrt(dt) * noise
    flags = np.zeros(np.shape(out), dtype=bool)
    if out.ndim == 0:
        return float(out), False
    return out, flags


def sample_path(x0, t_end, dt, dyn, seed):
    """Sample one trajectory on [0, t_end] with fixed step dt.

    Deterministic given (seed, dt); the final time equals t_end exactly
    (the last step is shortened).  Returns a PathSegment.
    """
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    check_thinning_cap(dyn, dt)
    key = rng.root_key(seed)
    times = [0.0]
    states = [float(x0)]
    flags = [False]
    if t_end == 0:
        return PathSegment(times, states, flags)
    n_full = int(np.floor(t_end / dt + 1e-12))
    x = float(x0)
    step = 0
    for step in range(n_full):
        x, j = _one_step(x, key, step, dt, dyn)
        times.append((step + 1) * dt)
        states.append(x)
        flags.append(bool(np.any(j)))
    rem = t_end - n_full * dt
    if rem > 1e-12 * max(1.0, t_end):
        x, j = _one_step(x, key, n_full, rem, dyn)
        times.append(t_end)
        states.append(x)
        flags.append(bool(np.any(j)))
    else:
        times[-1] = t_end
    return PathSegment(times, states, flags)
