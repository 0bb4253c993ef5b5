"""Identity token cache: score, select, store, and inject subject key/values.

Built by running a full denoising pass under an identity-only prompt with
attention recording on. At every (layer, timestep) the visual tokens are
scored by their text-image attention mass on the subject tokens, the top-k
fraction is selected, and those tokens' self-attention key/value projections
are cached. During sampling the cached rows are prepended to the layer's
current keys and values; queries are untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Optional, Tuple

import numpy as np

from .denoiser import AttentionRecord, DenoiserRequest, TransformerDenoiser
from .errors import CacheError, ConfigError
from .prompts import DEFAULT_W_ACTIVE, DEFAULT_W_INACTIVE, FusedPrompt, embed, null_prompt
from .schedule import NoiseSchedule, denoise_step, initial_noise
from .weights import ToyDenoiserWeights

CACHE_MAGIC = b"zigzaglab-cache"
CACHE_VERSION = 1

SELECTION_MODES = ("per_layer", "averaged")


@dataclass(frozen=True)
class SubjectScoreVector:
    scores: np.ndarray  # [visual_tokens], nonnegative
    layer: int
    timestep: int


@dataclass(frozen=True)
class CacheEntry:
    keys: np.ndarray  # [k_count, width]
    values: np.ndarray
    source_indices: np.ndarray  # ascending, subset of [0, tokens)


@dataclass
class IdentityTokenCache:
    entries: Dict[Tuple[int, int], CacheEntry]
    k_ratio: float
    layer_mask: FrozenSet[int]
    num_steps: int
    tokens: int
    width: int
    identity_prompt_text: str
    schedule: dict  # serialized schedule the cache was built under
    guidance_scale: float
    seed_entropy: tuple
    source_branch: str = "conditional"
    selection: str = "per_layer"

    @property
    def k_count(self) -> int:
        return k_count_for(self.k_ratio, self.tokens)

    def slice_at(self, timestep: int) -> Dict[int, CacheEntry]:
        """Entries for every masked layer at one timestep; missing entries are an error."""
        out = {}
        for layer in sorted(self.layer_mask):
            key = (layer, timestep)
            if key not in self.entries:
                raise CacheError(f"cache has no entry for layer {layer}, timestep {timestep}")
            out[layer] = self.entries[key]
        return out

    def header(self) -> dict:
        return {
            "format_version": CACHE_VERSION,
            "k_ratio": self.k_ratio,
            "num_steps": self.num_steps,
            "layer_mask": sorted(self.layer_mask),
            "tokens": self.tokens,
            "width": self.width,
            "identity_prompt": self.identity_prompt_text,
            "schedule": self.schedule,
            "guidance_scale": self.guidance_scale,
            "seed_entropy": list(self.seed_entropy),
            "source_branch": self.source_branch,
            "selection": self.selection,
            "entries": [
                [l, m, int(e.keys.shape[0]), [int(i) for i in e.source_indices]]
                for (l, m), e in sorted(self.entries.items())
            ],
        }

    def header_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.header(), sort_keys=True).encode()).hexdigest()

    def validate(self):
        if not (0.0 < self.k_ratio <= 1.0):
            raise ConfigError(f"k_ratio must lie in (0, 1], got {self.k_ratio}")
        if not self.layer_mask:
            raise ConfigError("cache layer mask is empty")
        kc = self.k_count
        for (l, m), e in self.entries.items():
            if e.keys.shape != (kc, self.width) or e.values.shape != (kc, self.width):
                raise CacheError(f"entry ({l}, {m}) shapes {e.keys.shape}/{e.values.shape}, expected ({kc}, {self.width})")
            idx = e.source_indices
            if idx.shape != (kc,) or np.any(idx < 0) or np.any(idx >= self.tokens):
                raise CacheError(f"entry ({l}, {m}) has out-of-range source indices")
            if np.any(np.diff(idx) <= 0):
                raise CacheError(f"entry ({l}, {m}) source indices not strictly ascending")


def k_count_for(k_ratio: float, n: int) -> int:
    if not (0.0 < k_ratio <= 1.0):
        raise ConfigError(f"k_ratio must lie in (0, 1], got {k_ratio}")
    return max(1, math.floor(k_ratio * n))


def subject_scores(record: AttentionRecord, subject_token_indices) -> SubjectScoreVector:
    """Per visual token, the post-softmax attention mass on the subject tokens."""
    idx = sorted(int(i) for i in subject_token_indices)
    if not idx:
        raise ConfigError("subject token set is empty")
    n_text = record.text_image_scores.shape[1]
    if idx[0] < 0 or idx[-1] >= n_text:
        raise ConfigError(f"subject indices {idx} outside prompt range [0, {n_text})")
    scores = record.text_image_scores[:, idx].sum(axis=1)
    return SubjectScoreVector(scores=scores, layer=record.layer_index, timestep=record.timestep)


def top_k_select(scores: SubjectScoreVector, k_ratio: float):
    """Indices of the top floor(k_ratio * n) scores (at least 1), ascending.

    Ties break toward the lower index.
    """
    return _top_k_indices(scores.scores, k_ratio)


def _top_k_indices(values: np.ndarray, k_ratio: float) -> np.ndarray:
    values = np.asarray(values)
    n = values.shape[0]
    if n < 1:
        raise ConfigError("cannot select from an empty score vector")
    k = k_count_for(k_ratio, n)
    order = np.argsort(-values, kind="stable")  # stable: equal scores keep lower index first
    return np.sort(order[:k])


def inject_kv(current_keys: np.ndarray, current_values: np.ndarray, cache_entry: CacheEntry):
    """Prepend cached rows: cache first, current second. Queries are untouched."""
    if cache_entry.keys.shape[1] != current_keys.shape[1]:
        raise CacheError(
            f"cache width {cache_entry.keys.shape[1]} does not match current width {current_keys.shape[1]}"
        )
    if current_keys.shape != current_values.shape:
        raise CacheError("current keys and values must share a shape")
    aug_k = np.concatenate([cache_entry.keys, current_keys], axis=0)
    aug_v = np.concatenate([cache_entry.values, current_values], axis=0)
    return aug_k, aug_v


def build_cache(
    identity_prompt: FusedPrompt,
    weights: ToyDenoiserWeights,
    sched: NoiseSchedule,
    k_ratio: float,
    layer_mask=None,
    seed=0,
    guidance_scale: float = 5.5,
    selection: str = "per_layer",
    score_layers=None,
    w_active: float = DEFAULT_W_ACTIVE,
    w_inactive: float = DEFAULT_W_INACTIVE,
) -> IdentityTokenCache:
    """Run the identity-prompt denoising pass and cache top-k subject key/values.

    The pass is a vanilla guided denoise from Gaussian noise over the full
    schedule; attention is recorded on the conditional branch and entries are
    stored for every masked layer at every timestep. ``selection`` is either
    ``per_layer`` (each layer picks its own tokens) or ``averaged`` (scores
    from ``score_layers``, default the first half, are averaged and one index
    set is reused across layers at each timestep).
    """
    if identity_prompt.scene_segments:
        raise ConfigError("identity prompt must contain only subject tokens (no scenes)")
    if selection not in SELECTION_MODES:
        raise ConfigError(f"unknown selection mode {selection!r}, expected one of {SELECTION_MODES}")
    if sched.num_steps != weights.num_steps:
        raise ConfigError(
            f"schedule has {sched.num_steps} steps but model was trained for {weights.num_steps}"
        )
    num_layers = weights.num_layers
    mask = frozenset(range(num_layers)) if layer_mask is None else frozenset(int(l) for l in layer_mask)
    if not mask or not mask.issubset(range(num_layers)):
        raise ConfigError(f"layer mask {sorted(mask)} invalid for {num_layers} layers")
    if selection == "averaged":
        score_set = (
            frozenset(range(max(1, num_layers // 2))) if score_layers is None else frozenset(score_layers)
        )
        if not score_set.issubset(range(num_layers)):
            raise ConfigError(f"score layers {sorted(score_set)} invalid for {num_layers} layers")
    vocab = weights.vocabulary()
    id_emb = embed(identity_prompt, None, vocab, w_active, w_inactive)
    null_emb = null_prompt(vocab)
    denoiser = TransformerDenoiser(weights)

    entropy = _entropy_tuple(seed)
    state = initial_noise(1, weights.tokens, weights.channels, sched.num_steps, list(entropy), label="cache")
    kc = k_count_for(k_ratio, weights.tokens)
    entries: Dict[Tuple[int, int], CacheEntry] = {}

    for t in range(sched.num_steps, 0, -1):
        resp_cond = denoiser.predict(
            DenoiserRequest(latent=state, timestep=t, prompt_embedding=id_emb, record_attention=True)
        )
        by_layer = {r.layer_index: r for r in resp_cond.attention_records}

        if selection == "averaged":
            stacked = np.stack(
                [subject_scores(by_layer[l], id_emb.subject_token_indices).scores for l in sorted(score_set)]
            )
            shared = _top_k_indices(stacked.mean(axis=0), k_ratio)
        for layer in sorted(mask):
            rec = by_layer[layer]
            if selection == "per_layer":
                idx = top_k_select(subject_scores(rec, id_emb.subject_token_indices), k_ratio)
            else:
                idx = shared
            entries[(layer, t)] = CacheEntry(
                keys=rec.self_keys[idx].copy(),
                values=rec.self_values[idx].copy(),
                source_indices=idx.copy(),
            )

        if guidance_scale == 1.0:
            eps = resp_cond.eps
        else:
            eps_null = denoiser.predict(
                DenoiserRequest(latent=state, timestep=t, prompt_embedding=null_emb)
            ).eps
            eps = eps_null + guidance_scale * (resp_cond.eps - eps_null)
        state = denoise_step(state, eps, sched)

    cache = IdentityTokenCache(
        entries=entries,
        k_ratio=k_ratio,
        layer_mask=mask,
        num_steps=sched.num_steps,
        tokens=weights.tokens,
        width=weights.model_dim,
        identity_prompt_text=" ".join(identity_prompt.identity_segment),
        schedule=sched.to_dict(),
        guidance_scale=guidance_scale,
        seed_entropy=entropy,
        selection=selection,
    )
    cache.validate()
    assert cache.k_count == kc
    return cache


def _entropy_tuple(seed):
    if isinstance(seed, (list, tuple)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def save_cache(cache: IdentityTokenCache, path):
    cache.validate()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + b" v%d\n" % CACHE_VERSION)
        fh.write(json.dumps(cache.header(), sort_keys=True).encode("utf-8") + b"\n")
        for (_, _), entry in sorted(cache.entries.items()):
            fh.write(np.ascontiguousarray(entry.keys, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(entry.values, dtype="<f8").tobytes())


def load_cache(path) -> IdentityTokenCache:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if not magic.startswith(CACHE_MAGIC):
            raise ConfigError(f"{path}: not a cache file")
        header = json.loads(fh.readline().decode("utf-8"))
        if header["format_version"] != CACHE_VERSION:
            raise ConfigError(f"{path}: unsupported cache version {header['format_version']}")
        width = header["width"]
        entries = {}
        for l, m, kc, indices in header["entries"]:
            keys = np.frombuffer(fh.read(kc * width * 8), dtype="<f8").astype(np.float64).reshape(kc, width)
            values = np.frombuffer(fh.read(kc * width * 8), dtype="<f8").astype(np.float64).reshape(kc, width)
            entries[(l, m)] = CacheEntry(
                keys=keys, values=values, source_indices=np.asarray(indices, dtype=np.intp)
            )
        if fh.read(1):
            raise ConfigError(f"{path}: trailing bytes after declared entries")
    cache = IdentityTokenCache(
        entries=entries,
        k_ratio=header["k_ratio"],
        layer_mask=frozenset(header["layer_mask"]),
        num_steps=header["num_steps"],
        tokens=header["tokens"],
        width=width,
        identity_prompt_text=header["identity_prompt"],
        schedule=header["schedule"],
        guidance_scale=header["guidance_scale"],
        seed_entropy=tuple(header["seed_entropy"]),
        source_branch=header["source_branch"],
        selection=header["selection"],
    )
    cache.validate()
    return cache
