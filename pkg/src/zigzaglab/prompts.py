"""Fused multi-scene prompts, per-scene reweighting, and phase-dependent guidance.

A fused prompt concatenates the identity description with every scene
description. Embedding it for a particular scene scales that scene's rows
(and the identity rows) by ``w_active`` and every other scene's rows by
``w_inactive``, so one prompt serves the whole story while each image leans
on its own scene. The zag phase always gets the null prompt at zero scale.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, VocabError

NULL_TOKEN = "<null>"
DEFAULT_W_ACTIVE = 1.0
DEFAULT_W_INACTIVE = 0.3


class Phase(str, enum.Enum):
    ZIG = "zig"
    ZAG = "zag"
    GENERATION = "generation"


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scales per phase; zig and generation share s_main."""

    s_main: float = 5.5
    s_zag: float = 0.0


@dataclass(frozen=True)
class PromptVocabulary:
    """Closed token vocabulary backed by a learned embedding table.

    Row 0 of ``embeddings`` is the dedicated null token. The table is shared
    with (and trained as part of) the denoiser weights.
    """

    tokens: tuple  # ordered token strings, tokens[0] == NULL_TOKEN
    embeddings: np.ndarray  # [vocab, text_dim]

    def __post_init__(self):
        if self.tokens[0] != NULL_TOKEN:
            raise ConfigError(f"vocabulary slot 0 must be {NULL_TOKEN!r}")
        if len(self.tokens) != self.embeddings.shape[0]:
            raise ConfigError("token list and embedding table disagree on vocabulary size")
        if not np.all(np.isfinite(self.embeddings)):
            raise ConfigError("vocabulary embeddings contain non-finite values")

    @property
    def text_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def null_token(self) -> np.ndarray:
        return self.embeddings[0]

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise VocabError(f"token {token!r} not in vocabulary {self.tokens}") from None


@dataclass(frozen=True)
class FusedPrompt:
    identity_segment: tuple
    scene_segments: tuple  # tuple of token tuples, one per scene
    weights: tuple  # per-token multipliers, aligned with token order
    active_scene: Optional[int] = None

    @property
    def all_tokens(self) -> tuple:
        toks = list(self.identity_segment)
        for seg in self.scene_segments:
            toks.extend(seg)
        return tuple(toks)

    @property
    def num_scenes(self) -> int:
        return len(self.scene_segments)

    def scene_token_range(self, scene: int) -> range:
        start = len(self.identity_segment)
        for j, seg in enumerate(self.scene_segments):
            if j == scene:
                return range(start, start + len(seg))
            start += len(seg)
        raise ValueError(f"scene index {scene} out of range for {self.num_scenes} scenes")


@dataclass(frozen=True)
class PromptEmbedding:
    """Weighted embedding rows plus provenance for training-time gradients."""

    matrix: np.ndarray  # [text_tokens, text_dim]
    subject_token_indices: frozenset
    is_null: bool
    token_ids: np.ndarray = None  # vocabulary row per embedding row
    row_weights: np.ndarray = None


def identity_prompt(identity: Sequence[str]) -> FusedPrompt:
    """A prompt holding only the subject description; used to build the token cache."""
    identity = tuple(identity)
    if not identity:
        raise ConfigError("identity token list must be nonempty")
    return FusedPrompt(
        identity_segment=identity,
        scene_segments=(),
        weights=(1.0,) * len(identity),
        active_scene=None,
    )


def fuse_prompts(identity: Sequence[str], scenes: Sequence[Sequence[str]]) -> FusedPrompt:
    """Concatenate identity and scene descriptions into one prompt, all weights 1."""
    identity = tuple(identity)
    if not identity:
        raise ConfigError("identity token list must be nonempty")
    if len(scenes) < 1:
        raise ConfigError("fused prompt needs at least one scene")
    segments = tuple(tuple(s) for s in scenes)
    if any(len(s) == 0 for s in segments):
        raise ConfigError("scene token lists must be nonempty")
    total = len(identity) + sum(len(s) for s in segments)
    return FusedPrompt(
        identity_segment=identity,
        scene_segments=segments,
        weights=(1.0,) * total,
        active_scene=None,
    )


def embed(
    fp: FusedPrompt,
    scene: Optional[int],
    vocab: PromptVocabulary,
    w_active: float = DEFAULT_W_ACTIVE,
    w_inactive: float = DEFAULT_W_INACTIVE,
) -> PromptEmbedding:
    """Embed a fused prompt with the given scene active.

    Identity tokens and the active scene's tokens carry ``w_active``; every
    other scene's tokens carry ``w_inactive``. ``scene=None`` is only valid
    for identity-only prompts.
    """
    if not (w_active > w_inactive >= 0.0):
        raise ConfigError(f"need w_active > w_inactive >= 0, got {w_active}, {w_inactive}")
    if scene is None:
        if fp.num_scenes:
            raise ValueError("scene selection required for a prompt with scenes")
    elif not (0 <= scene < fp.num_scenes):
        raise ValueError(f"scene {scene} out of range for {fp.num_scenes} scenes")

    tokens = fp.all_tokens
    n_id = len(fp.identity_segment)
    weights = np.full(len(tokens), w_inactive, dtype=np.float64)
    weights[:n_id] = w_active
    if scene is not None:
        rng_ = fp.scene_token_range(scene)
        weights[rng_.start : rng_.stop] = w_active
    token_ids = np.array([vocab.index(t) for t in tokens], dtype=np.intp)
    matrix = weights[:, None] * vocab.embeddings[token_ids]
    return PromptEmbedding(
        matrix=matrix,
        subject_token_indices=frozenset(range(n_id)),
        is_null=False,
        token_ids=token_ids,
        row_weights=weights,
    )


def null_prompt(vocab: PromptVocabulary) -> PromptEmbedding:
    """Single-row embedding of the learned null token."""
    return PromptEmbedding(
        matrix=vocab.null_token[None, :].copy(),
        subject_token_indices=frozenset(),
        is_null=True,
        token_ids=np.array([0], dtype=np.intp),
        row_weights=np.array([1.0]),
    )


def phase_prompt(
    fp: FusedPrompt,
    scene: int,
    phase: Phase,
    vocab: PromptVocabulary,
    cfg: GuidanceConfig,
    w_active: float = DEFAULT_W_ACTIVE,
    w_inactive: float = DEFAULT_W_INACTIVE,
):
    """Prompt embedding and guidance scale for a zigzag phase.

    Zig and generation use the reweighted fused prompt at s_main; zag uses
    the null prompt at s_zag (0 by default), independent of fp and scene.
    """
    phase = Phase(phase)
    if phase is Phase.ZAG:
        return null_prompt(vocab), cfg.s_zag
    return embed(fp, scene, vocab, w_active, w_inactive), cfg.s_main


def parse_story(text: str):
    """Parse a story file: line 1 ``identity: <tokens>``, then ``scene: <tokens>`` lines.

    Blank lines and ``#`` comments are ignored. Returns (identity tokens,
    list of scene token lists).
    """
    identity = None
    scenes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise ConfigError(f"story line {lineno}: expected 'identity:' or 'scene:', got {line!r}")
        toks = rest.split()
        if key.strip() == "identity":
            if identity is not None:
                raise ConfigError(f"story line {lineno}: duplicate identity line")
            identity = toks
        elif key.strip() == "scene":
            if identity is None:
                raise ConfigError(f"story line {lineno}: scene before identity")
            scenes.append(toks)
        else:
            raise ConfigError(f"story line {lineno}: unknown key {key.strip()!r}")
    if identity is None or not identity:
        raise ConfigError("story file has no identity line")
    if not scenes:
        raise ConfigError("story file has no scenes")
    return identity, scenes
