"""Zigzag sampling loop, its ablation variants, and story orchestration.

Every timestep of a zigzag run is a zig / zag / generation triple:

  zig  - guided denoise t -> t-1 with identity key/value injection,
  zag  - inverse denoise t-1 -> t under the null prompt at zero guidance,
  gen  - guided denoise t -> t-1, no injection.

Variants differ only in which phases inject (and, for symmetric_prompt,
whether zag keeps the fused prompt). Vanilla is the plain guided DDIM loop.
"""

from __future__ import annotations

import dataclasses
import enum
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .cache import IdentityTokenCache, build_cache
from .denoiser import DenoiserRequest, TransformerDenoiser, guided_eps
from .errors import ConfigError
from .prompts import (
    DEFAULT_W_ACTIVE,
    DEFAULT_W_INACTIVE,
    FusedPrompt,
    GuidanceConfig,
    Phase,
    PromptVocabulary,
    embed,
    fuse_prompts,
    identity_prompt,
    null_prompt,
    phase_prompt,
)
from .schedule import LatentState, NoiseSchedule, denoise_step, initial_noise, inverse_step


class SamplerVariant(str, enum.Enum):
    VANILLA = "vanilla"
    AZS_ASYMMETRIC = "azs_asymmetric"
    ZIG_GEN_SYMMETRIC = "zig_gen_symmetric"
    ZIG_ZAG_SYMMETRIC = "zig_zag_symmetric"
    ALL_SYMMETRIC = "all_symmetric"
    SYMMETRIC_PROMPT = "symmetric_prompt"


INJECTION_MASKS = {
    SamplerVariant.VANILLA: {Phase.ZIG: False, Phase.ZAG: False, Phase.GENERATION: False},
    SamplerVariant.AZS_ASYMMETRIC: {Phase.ZIG: True, Phase.ZAG: False, Phase.GENERATION: False},
    SamplerVariant.ZIG_GEN_SYMMETRIC: {Phase.ZIG: True, Phase.ZAG: False, Phase.GENERATION: True},
    SamplerVariant.ZIG_ZAG_SYMMETRIC: {Phase.ZIG: True, Phase.ZAG: True, Phase.GENERATION: False},
    SamplerVariant.ALL_SYMMETRIC: {Phase.ZIG: True, Phase.ZAG: True, Phase.GENERATION: True},
    SamplerVariant.SYMMETRIC_PROMPT: {Phase.ZIG: True, Phase.ZAG: False, Phase.GENERATION: False},
}


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    variant: SamplerVariant = SamplerVariant.AZS_ASYMMETRIC
    guidance: GuidanceConfig = GuidanceConfig()
    k_ratio: float = 0.2
    layer_mask: Optional[frozenset] = None  # None = all layers
    w_active: float = DEFAULT_W_ACTIVE
    w_inactive: float = DEFAULT_W_INACTIVE
    seed: int = 0
    window: Optional[int] = None
    stride: Optional[int] = None
    zigzag_fraction: float = 1.0  # fraction of steps (from t=T down) that run the triple
    cache_selection: str = "per_layer"

    def __post_init__(self):
        object.__setattr__(self, "variant", SamplerVariant(self.variant))
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")
        if not (0.0 <= self.zigzag_fraction <= 1.0):
            raise ConfigError(f"zigzag_fraction must lie in [0, 1], got {self.zigzag_fraction}")

    @property
    def injection_mask(self) -> dict:
        return dict(INJECTION_MASKS[self.variant])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["layer_mask"] = sorted(self.layer_mask) if self.layer_mask is not None else None
        d["guidance"] = {"s_main": self.guidance.s_main, "s_zag": self.guidance.s_zag}
        return d


@dataclass
class StepLog:
    timestep: int
    phase: str
    injected: bool
    calls: int
    latent_norm: float


@dataclass
class SceneLog:
    scene: int
    seed_entropy: tuple
    steps: List[StepLog]
    total_calls: int
    wall_clock: dict  # phase tag -> seconds

    def calls_by_phase(self) -> dict:
        out = {}
        for s in self.steps:
            out[s.phase] = out.get(s.phase, 0) + s.calls
        return out


@dataclass
class StoryResult:
    images: List[np.ndarray]  # final x_0 per scene, [tokens, channels]
    per_scene_logs: List[SceneLog]
    config_snapshot: SamplerConfig
    cache_ref: Optional[str]  # cache header hash, None for vanilla
    scene_assignments: Optional[list] = None  # long-story: per scene, (window, start)


class _CountingDenoiser:
    """Wraps a denoiser, counting predict calls; used for call accounting."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def predict(self, req):
        self.calls += 1
        return self.inner.predict(req)


def _phase_condition(fp, scene, phase, vocab, config: SamplerConfig):
    """Prompt and scale for a phase, honoring the symmetric_prompt override."""
    if phase is Phase.ZAG and config.variant is SamplerVariant.SYMMETRIC_PROMPT:
        emb = embed(fp, scene, vocab, config.w_active, config.w_inactive)
        return emb, config.guidance.s_main
    return phase_prompt(fp, scene, phase, vocab, config.guidance, config.w_active, config.w_inactive)


def _phase_eps(denoiser, latent, timestep, emb, scale, injection, vocab):
    if emb.is_null:
        req_null = DenoiserRequest(latent=latent, timestep=timestep, prompt_embedding=emb, injection=injection)
        if scale == 0.0:
            return denoiser.predict(req_null).eps
        req_cond = req_null
    else:
        req_cond = DenoiserRequest(latent=latent, timestep=timestep, prompt_embedding=emb, injection=injection)
        req_null = DenoiserRequest(
            latent=latent, timestep=timestep, prompt_embedding=null_prompt(vocab), injection=injection
        )
    return guided_eps(denoiser, req_cond, req_null, scale)


def _latent_shape(denoiser):
    inner = denoiser.inner if isinstance(denoiser, _CountingDenoiser) else denoiser
    if hasattr(inner, "latent_shape"):
        return inner.latent_shape
    return inner.weights.tokens, inner.weights.channels


def sample_vanilla(
    fp: FusedPrompt,
    scene: int,
    denoiser,
    vocab: PromptVocabulary,
    sched: NoiseSchedule,
    config: SamplerConfig,
    seed_entropy=None,
    batch: int = 1,
) -> tuple:
    """Plain guided DDIM loop from Gaussian noise; returns (final state, log)."""
    counter = _CountingDenoiser(denoiser)
    tokens, channels = _latent_shape(denoiser)
    entropy = tuple(seed_entropy) if seed_entropy is not None else (config.seed, 1, scene)
    state = initial_noise(batch, tokens, channels, sched.num_steps, list(entropy), label="scene")
    steps: List[StepLog] = []
    clock = {"generation": 0.0}
    for t in range(sched.num_steps, 0, -1):
        before = counter.calls
        t0 = time.perf_counter()
        emb, s = phase_prompt(fp, scene, Phase.GENERATION, vocab, config.guidance, config.w_active, config.w_inactive)
        eps = _phase_eps(counter, state, t, emb, s, None, vocab)
        state = denoise_step(state, eps, sched)
        clock["generation"] += time.perf_counter() - t0
        steps.append(
            StepLog(t, Phase.GENERATION.value, False, counter.calls - before, float(np.linalg.norm(state.data)))
        )
    log = SceneLog(scene=scene, seed_entropy=entropy, steps=steps, total_calls=counter.calls, wall_clock=clock)
    return state, log


def sample_zigzag(
    fp: FusedPrompt,
    scene: int,
    cache: IdentityTokenCache,
    denoiser,
    vocab: PromptVocabulary,
    sched: NoiseSchedule,
    config: SamplerConfig,
    seed_entropy=None,
    batch: int = 1,
) -> tuple:
    """Zig / zag / generation triple per timestep; returns (final state, log)."""
    if config.variant is SamplerVariant.VANILLA:
        raise ConfigError("sample_zigzag requires a zigzag variant; use sample_vanilla")
    if cache.num_steps != sched.num_steps:
        raise ConfigError(f"cache built for T={cache.num_steps}, sampler uses T={sched.num_steps}")
    if cache.schedule != sched.to_dict():
        raise ConfigError("cache was built under a different schedule")
    mask = config.injection_mask
    counter = _CountingDenoiser(denoiser)
    tokens, channels = _latent_shape(denoiser)
    entropy = tuple(seed_entropy) if seed_entropy is not None else (config.seed, 1, scene)
    state = initial_noise(batch, tokens, channels, sched.num_steps, list(entropy), label="scene")
    steps: List[StepLog] = []
    clock = {p.value: 0.0 for p in Phase}
    triple_steps = round(config.zigzag_fraction * sched.num_steps)

    for t in range(sched.num_steps, 0, -1):
        run_triple = (sched.num_steps - t) < triple_steps
        slice_t = cache.slice_at(t) if run_triple and any(mask.values()) else None

        if run_triple:
            # zig: forward denoise with injection and full text guidance
            state = _run_phase(
                counter, state, t, Phase.ZIG, t, fp, scene, vocab, config, sched,
                slice_t if mask[Phase.ZIG] else None, steps, clock, forward=True,
            )
            # zag: inverse denoise, evaluated at t-1, injection only for symmetric variants
            state = _run_phase(
                counter, state, t - 1, Phase.ZAG, t, fp, scene, vocab, config, sched,
                slice_t if mask[Phase.ZAG] else None, steps, clock, forward=False,
            )
            # generation: final denoise with text guidance
            state = _run_phase(
                counter, state, t, Phase.GENERATION, t, fp, scene, vocab, config, sched,
                slice_t if mask[Phase.GENERATION] else None, steps, clock, forward=True,
            )
        else:
            state = _run_phase(
                counter, state, t, Phase.GENERATION, t, fp, scene, vocab, config, sched,
                None, steps, clock, forward=True,
            )

    log = SceneLog(scene=scene, seed_entropy=entropy, steps=steps, total_calls=counter.calls, wall_clock=clock)
    return state, log


def _run_phase(counter, state, eval_t, phase, triple_t, fp, scene, vocab, config, sched, injection, steps, clock, forward):
    before = counter.calls
    t0 = time.perf_counter()
    emb, s = _phase_condition(fp, scene, phase, vocab, config)
    eps = _phase_eps(counter, state, eval_t, emb, s, injection, vocab)
    state = denoise_step(state, eps, sched) if forward else inverse_step(state, eps, sched)
    clock[phase.value] += time.perf_counter() - t0
    steps.append(
        StepLog(triple_t, phase.value, injection is not None, counter.calls - before, float(np.linalg.norm(state.data)))
    )
    return state


def generate_story(
    identity: Sequence[str],
    scenes: Sequence[Sequence[str]],
    config: SamplerConfig,
    weights,
    sched: NoiseSchedule,
    vocab: PromptVocabulary,
    cache: Optional[IdentityTokenCache] = None,
) -> StoryResult:
    """Build the cache once, fuse prompts once, then sample every scene.

    A pre-built cache may be supplied (the CLI loads one from disk);
    otherwise it is built here from the identity prompt with the config's
    seed lineage.
    """
    if len(scenes) < 1:
        raise ConfigError("a story needs at least one scene")
    fp = fuse_prompts(identity, scenes)
    denoiser = TransformerDenoiser(weights)
    vanilla = config.variant is SamplerVariant.VANILLA
    if not vanilla and cache is None:
        cache = build_cache(
            identity_prompt(identity),
            weights,
            sched,
            config.k_ratio,
            layer_mask=config.layer_mask,
            seed=[config.seed, 0],
            guidance_scale=config.guidance.s_main,
            selection=config.cache_selection,
            w_active=config.w_active,
            w_inactive=config.w_inactive,
        )
    images, logs = [], []
    for j in range(len(scenes)):
        if vanilla:
            state, log = sample_vanilla(fp, j, denoiser, vocab, sched, config, seed_entropy=(config.seed, 1, j))
        else:
            state, log = sample_zigzag(fp, j, cache, denoiser, vocab, sched, config, seed_entropy=(config.seed, 1, j))
        images.append(state.data[0].copy())
        logs.append(log)
    return StoryResult(
        images=images,
        per_scene_logs=logs,
        config_snapshot=config,
        cache_ref=None if vanilla else cache.header_hash(),
    )


def window_assignments(num_scenes: int, window: int, stride: int):
    """Scene -> (window index, window start) with each scene in the first window containing it."""
    if window < 1 or stride < 1:
        raise ConfigError("window and stride must be >= 1")
    if window > num_scenes:
        raise ConfigError(f"window {window} larger than scene count {num_scenes}")
    starts = list(range(0, num_scenes - window + 1, stride))
    if starts[-1] + window < num_scenes:
        starts.append(num_scenes - window)
    assignment = {}
    for w, start in enumerate(starts):
        for s in range(start, start + window):
            if s not in assignment:
                assignment[s] = (w, start)
    return starts, [assignment[s] for s in range(num_scenes)]


def generate_long_story(
    identity: Sequence[str],
    scenes: Sequence[Sequence[str]],
    config: SamplerConfig,
    weights,
    sched: NoiseSchedule,
    vocab: PromptVocabulary,
    cache: Optional[IdentityTokenCache] = None,
) -> StoryResult:
    """Sliding-window long-story mode: fuse W consecutive scenes at a time.

    The identity cache is shared across windows; per-scene seeds depend only
    on the global scene index, so window == scene count reproduces
    generate_story exactly.
    """
    if config.window is None:
        raise ConfigError("long-story mode requires config.window")
    window = config.window
    stride = config.stride if config.stride is not None else window
    starts, assignments = window_assignments(len(scenes), window, stride)
    denoiser = TransformerDenoiser(weights)
    vanilla = config.variant is SamplerVariant.VANILLA
    if not vanilla and cache is None:
        cache = build_cache(
            identity_prompt(identity),
            weights,
            sched,
            config.k_ratio,
            layer_mask=config.layer_mask,
            seed=[config.seed, 0],
            guidance_scale=config.guidance.s_main,
            selection=config.cache_selection,
            w_active=config.w_active,
            w_inactive=config.w_inactive,
        )
    images = [None] * len(scenes)
    logs = [None] * len(scenes)
    for j, (w, start) in enumerate(assignments):
        fp = fuse_prompts(identity, scenes[start : start + window])
        local = j - start
        if vanilla:
            state, log = sample_vanilla(fp, local, denoiser, vocab, sched, config, seed_entropy=(config.seed, 1, j))
        else:
            state, log = sample_zigzag(fp, local, cache, denoiser, vocab, sched, config, seed_entropy=(config.seed, 1, j))
        log.scene = j
        images[j] = state.data[0].copy()
        logs[j] = log
    return StoryResult(
        images=images,
        per_scene_logs=logs,
        config_snapshot=config,
        cache_ref=None if vanilla else cache.header_hash(),
        scene_assignments=assignments,
    )
