"""Noise schedule and the two deterministic denoising step maps.

Convention: ``alphas[t]`` is the cumulative signal coefficient at timestep
``t``, with ``alphas[0] == 1`` (clean data) and ``alphas[T]`` the noisiest
level. All step math runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericError

SCHEDULE_KINDS = ("linear_beta", "cosine", "constant_test")

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
COSINE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable cumulative-alpha table plus the parameters that built it."""

    kind: str
    alphas: np.ndarray  # shape [T+1], alphas[0] == 1.0
    params: dict

    @property
    def num_steps(self) -> int:
        return len(self.alphas) - 1

    def alpha(self, t: int) -> float:
        return float(self.alphas[t])

    def to_dict(self) -> dict:
        """Serializable form for run manifests: kind, T, params, full alpha table."""
        return {
            "kind": self.kind,
            "num_steps": self.num_steps,
            "params": dict(self.params),
            "alphas": [float(a) for a in self.alphas],
        }

    @staticmethod
    def from_dict(d: dict) -> "NoiseSchedule":
        sched = build_schedule(d["kind"], d["num_steps"], **d.get("params", {}))
        if not np.array_equal(sched.alphas, np.asarray(d["alphas"], dtype=np.float64)):
            raise ConfigError("manifest alpha table does not match rebuilt schedule")
        return sched


@dataclass(frozen=True)
class LatentState:
    """A batch of token-grid latents at a given timestep.

    ``data`` has shape [batch, tokens, channels]; ``seed_lineage`` records the
    RNG seeds that produced this state so runs are replayable.
    """

    data: np.ndarray
    timestep: int
    seed_lineage: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 3:
            raise ValueError(f"latent data must be [batch, tokens, channels], got shape {self.data.shape}")

    def with_data(self, data: np.ndarray, timestep: int) -> "LatentState":
        return replace(self, data=data, timestep=timestep)


def build_schedule(kind: str, num_steps: int, **params) -> NoiseSchedule:
    """Construct a schedule of the given kind over ``num_steps`` timesteps.

    linear_beta: beta linearly spaced in [beta_start, beta_end].
    cosine: squared-cosine cumulative alphas with per-step beta clipping.
    constant_test: alpha_t = value for all t >= 1; test-only, makes the
    forward/inverse cancellation identities exact.
    """
    if not isinstance(num_steps, (int, np.integer)) or num_steps < 1:
        raise ConfigError(f"num_steps must be a positive integer, got {num_steps!r}")
    num_steps = int(num_steps)

    if kind == "linear_beta":
        beta_start = float(params.pop("beta_start", DEFAULT_BETA_START))
        beta_end = float(params.pop("beta_end", DEFAULT_BETA_END))
        _reject_unknown(kind, params)
        if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
            raise ConfigError(f"betas must lie in (0, 1), got [{beta_start}, {beta_end}]")
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
        alphas = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        built = {"beta_start": beta_start, "beta_end": beta_end}
    elif kind == "cosine":
        offset = float(params.pop("offset", COSINE_OFFSET))
        max_beta = float(params.pop("max_beta", COSINE_MAX_BETA))
        _reject_unknown(kind, params)
        t = np.arange(num_steps + 1, dtype=np.float64)
        f = np.cos((t / num_steps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
        raw = f / f[0]
        betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, max_beta)
        alphas = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        built = {"offset": offset, "max_beta": max_beta}
    elif kind == "constant_test":
        value = float(params.pop("value", 0.5))
        _reject_unknown(kind, params)
        if not (0.0 < value <= 1.0):
            raise ConfigError(f"constant_test value must lie in (0, 1], got {value}")
        alphas = np.concatenate([[1.0], np.full(num_steps, value)])
        built = {"value": value}
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")

    sched = NoiseSchedule(kind=kind, alphas=alphas, params=built)
    _validate(sched)
    sched.alphas.setflags(write=False)
    return sched


def _reject_unknown(kind, params):
    if params:
        raise ConfigError(f"unknown parameters for {kind}: {sorted(params)}")


def _validate(sched: NoiseSchedule):
    a = sched.alphas
    if a[0] != 1.0:
        raise ConfigError("alpha_0 must be exactly 1")
    if not np.all(np.isfinite(a)):
        raise ConfigError("schedule produced non-finite alphas")
    if np.any(a <= 0.0) or np.any(a > 1.0):
        raise ConfigError("alphas must lie in (0, 1]")
    if sched.kind in ("linear_beta", "cosine") and not np.all(np.diff(a) < 0.0):
        raise ConfigError(f"{sched.kind} schedule must be strictly decreasing in t")


def denoise_step(state: LatentState, eps: np.ndarray, sched: NoiseSchedule) -> LatentState:
    """One deterministic denoising update from timestep t to t-1.

    x_{t-1} = sqrt(a_{t-1}) * (x_t - sqrt(1-a_t)*eps) / sqrt(a_t)
              + sqrt(1-a_{t-1}) * eps
    """
    t = state.timestep
    if t < 1:
        raise ValueError(f"denoise_step requires timestep >= 1, got {t}")
    if t > sched.num_steps:
        raise ValueError(f"timestep {t} exceeds schedule length {sched.num_steps}")
    eps = _check_eps(eps, state)
    a_t = sched.alphas[t]
    a_prev = sched.alphas[t - 1]
    x0_pred = (state.data - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
    out = math.sqrt(a_prev) * x0_pred + math.sqrt(1.0 - a_prev) * eps
    return _finite_state(state, out, t - 1)


def inverse_step(state: LatentState, eps: np.ndarray, sched: NoiseSchedule) -> LatentState:
    """One deterministic inverse update from timestep t-1 back to t.

    x_t = sqrt(a_t / a_{t-1}) * x_{t-1}
          + sqrt(a_t) * (sqrt(1/a_t - 1) - sqrt(1/a_{t-1} - 1)) * eps
    """
    t_prev = state.timestep
    t = t_prev + 1
    if t_prev >= sched.num_steps:
        raise ValueError(f"inverse_step from timestep {t_prev} would exceed T={sched.num_steps}")
    if t_prev < 0:
        raise ValueError(f"negative timestep {t_prev}")
    eps = _check_eps(eps, state)
    a_t = sched.alphas[t]
    a_prev = sched.alphas[t_prev]
    carry = math.sqrt(a_t / a_prev)
    drift = math.sqrt(a_t) * (math.sqrt(1.0 / a_t - 1.0) - math.sqrt(1.0 / a_prev - 1.0))
    out = carry * state.data + drift * eps
    return _finite_state(state, out, t)


def _check_eps(eps, state):
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != state.data.shape:
        raise ValueError(f"eps shape {eps.shape} does not match latent shape {state.data.shape}")
    if not np.all(np.isfinite(eps)):
        raise NumericError("noise prediction contains non-finite values")
    return eps


def _finite_state(state, data, timestep) -> LatentState:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"step produced non-finite latent at timestep {timestep}")
    return state.with_data(data, timestep)


def initial_noise(batch: int, tokens: int, channels: int, timestep: int, seed, label: str = "init") -> LatentState:
    """Standard-normal starting latent at the given timestep, seed recorded in the lineage."""
    seq = np.random.SeedSequence(seed)
    rng = np.random.default_rng(seq)
    data = rng.standard_normal((batch, tokens, channels))
    return LatentState(data=data, timestep=timestep, seed_lineage=((label, _seed_repr(seed)),))


def _seed_repr(seed):
    if isinstance(seed, (list, tuple)):
        return tuple(int(s) for s in seed)
    return int(seed)
