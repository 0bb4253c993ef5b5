"""Synthetic visual-story world: glyph subjects composed onto scene backgrounds.

Latents are token grids in [-1, 1]. Each scene id keys a smooth background
pattern; each identity id keys a fixed glyph pattern stamped over a square
footprint. Identity prompt tokens name a *family* of glyph variants
(GLYPH_VARIANTS concrete appearances per family), so the prompt alone
underdetermines the subject's look; that ambiguity is what subject
consistency across a story measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .prompts import NULL_TOKEN

IDENTITY_NAMES = ("cat", "dog", "owl", "fox", "bee", "elk")
SCENE_NAMES = ("park", "beach", "forest", "night", "city", "cave", "river", "attic")

GLYPH_VARIANTS = 3  # concrete appearances per identity family
GLYPH_SIZE = 4
BG_AMPLITUDE = 0.45
GLYPH_AMPLITUDE = 0.9

_BG_SEED = 9001
_GLYPH_SEED = 7001


@dataclass(frozen=True)
class SceneSpec:
    """One rendered item: a concrete glyph placed over a scene background."""

    identity_id: int  # concrete glyph = family * GLYPH_VARIANTS + variant
    scene_id: int
    placement: Tuple[int, int] = (2, 2)  # top-left grid offset of the glyph


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 24
    learning_rate: float = 2e-3
    grid: Tuple[int, int] = (8, 8)
    channels: int = 4
    identity_count: int = 4  # glyph families
    scene_count: int = 6
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "channels", "identity_count", "scene_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if self.identity_count < 2:
            raise ConfigError("identity_count must be >= 2 (consistency metrics need contrast)")
        if self.grid[0] < GLYPH_SIZE or self.grid[1] < GLYPH_SIZE:
            raise ConfigError(f"grid {self.grid} too small for glyph size {GLYPH_SIZE}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


def identity_tokens(count: int) -> tuple:
    if count <= len(IDENTITY_NAMES):
        return IDENTITY_NAMES[:count]
    return IDENTITY_NAMES + tuple(f"sub{i}" for i in range(len(IDENTITY_NAMES), count))


def scene_tokens(count: int) -> tuple:
    if count <= len(SCENE_NAMES):
        return SCENE_NAMES[:count]
    return SCENE_NAMES + tuple(f"place{i}" for i in range(len(SCENE_NAMES), count))


def vocab_tokens(identity_count: int, scene_count: int) -> tuple:
    return (NULL_TOKEN,) + identity_tokens(identity_count) + scene_tokens(scene_count)


def canonical_placement(grid: Tuple[int, int]) -> Tuple[int, int]:
    return ((grid[0] - GLYPH_SIZE) // 2, (grid[1] - GLYPH_SIZE) // 2)


def background_pattern(scene_id: int, grid=(8, 8), channels=4) -> np.ndarray:
    """Smooth per-scene pattern, [rows, cols, channels], amplitude BG_AMPLITUDE."""
    rng = np.random.default_rng([_BG_SEED, int(scene_id)])
    fx = rng.integers(1, 4)
    fy = rng.integers(1, 4)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    chan_step = rng.uniform(0.5, 2.5)
    r = np.arange(grid[0])[:, None, None]
    c = np.arange(grid[1])[None, :, None]
    ch = np.arange(channels)[None, None, :]
    angle = 2.0 * math.pi * (fx * r + fy * c) / grid[0] + phase + chan_step * ch
    return BG_AMPLITUDE * np.cos(angle)


def glyph_pattern(identity_id: int, channels=4) -> np.ndarray:
    """Fixed random sign pattern for one concrete glyph, [GLYPH_SIZE, GLYPH_SIZE, channels]."""
    rng = np.random.default_rng([_GLYPH_SEED, int(identity_id)])
    signs = rng.choice([-1.0, 1.0], size=(GLYPH_SIZE, GLYPH_SIZE, channels))
    return GLYPH_AMPLITUDE * signs


def glyph_footprint(placement: Tuple[int, int], grid=(8, 8)) -> np.ndarray:
    """Boolean token mask of the glyph square at the given placement."""
    r0, c0 = placement
    if r0 < 0 or c0 < 0 or r0 + GLYPH_SIZE > grid[0] or c0 + GLYPH_SIZE > grid[1]:
        raise ConfigError(f"placement {placement} puts the glyph outside grid {grid}")
    mask = np.zeros(grid, dtype=bool)
    mask[r0 : r0 + GLYPH_SIZE, c0 : c0 + GLYPH_SIZE] = True
    return mask.reshape(-1)


def render_scene(spec: SceneSpec, grid=(8, 8), channels=4) -> np.ndarray:
    """Deterministic clean latent [tokens, channels]: background with the glyph stamped in."""
    r0, c0 = spec.placement
    glyph_footprint(spec.placement, grid)  # placement validity
    img = background_pattern(spec.scene_id, grid, channels).copy()
    img[r0 : r0 + GLYPH_SIZE, c0 : c0 + GLYPH_SIZE, :] = glyph_pattern(spec.identity_id, channels)
    return img.reshape(grid[0] * grid[1], channels)


@dataclass(frozen=True)
class DatasetItem:
    spec: SceneSpec
    family: int
    scene_id: int


def build_dataset(config: TrainConfig) -> List[DatasetItem]:
    """Every (family, variant, scene) combination at the canonical placement."""
    place = canonical_placement(config.grid)
    items = []
    for family in range(config.identity_count):
        for variant in range(GLYPH_VARIANTS):
            for scene in range(config.scene_count):
                spec = SceneSpec(
                    identity_id=family * GLYPH_VARIANTS + variant,
                    scene_id=scene,
                    placement=place,
                )
                items.append(DatasetItem(spec=spec, family=family, scene_id=scene))
    return items
