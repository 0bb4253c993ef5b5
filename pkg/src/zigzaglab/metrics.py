"""Story evaluation: subject consistency, prompt alignment, ablation reports.

Subject consistency is the mean pairwise cosine similarity of centered
subject-region features (the toy world supplies exact glyph footprints, so no
background removal is needed). Prompt alignment is the accuracy of a linear
scene probe fit on clean renders, deliberately independent of the denoiser.
The combined score is their unweighted sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .errors import ConfigError
from .world import GLYPH_VARIANTS, SceneSpec, canonical_placement, render_scene

PROBE_MIN_CLEAN_ACCURACY = 0.95
_PROBE_NOISE_LEVELS = (0.0, 0.05, 0.15, 0.3)
_PROBE_JITTER_REPS = 3


@dataclass
class StoryMetrics:
    subject_consistency: float  # mean pairwise cosine in [-1, 1]
    prompt_alignment: float  # probe accuracy in [0, 1]
    combined: float
    per_pair: np.ndarray  # symmetric cosine matrix, unit diagonal


def subject_region_features(x0: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    """Centered flattened channels of the masked subject region."""
    footprint = np.asarray(footprint, dtype=bool)
    if footprint.shape[0] != x0.shape[0]:
        raise ConfigError(f"footprint length {footprint.shape[0]} does not match {x0.shape[0]} tokens")
    if not footprint.any():
        raise ConfigError("empty subject footprint")
    feat = np.asarray(x0, dtype=np.float64)[footprint].reshape(-1)
    return feat - feat.mean()


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(u @ v / (nu * nv))


def pairwise_cosines(images: Sequence[np.ndarray], footprints) -> np.ndarray:
    feats = [subject_region_features(img, fp) for img, fp in zip(images, _per_image(footprints, len(images)))]
    m = len(feats)
    mat = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            mat[i, j] = mat[j, i] = _cosine(feats[i], feats[j])
    return mat


def _per_image(footprints, count):
    footprints = np.asarray(footprints)
    if footprints.ndim == 1:
        return [footprints] * count
    if len(footprints) != count:
        raise ConfigError(f"{len(footprints)} footprints for {count} images")
    return list(footprints)


def consistency_score(images: Sequence[np.ndarray], footprints) -> float:
    """Mean of the upper-triangle pairwise cosines; needs at least two images."""
    if len(images) < 2:
        raise ConfigError("consistency needs at least two images")
    mat = pairwise_cosines(images, footprints)
    iu = np.triu_indices(len(images), k=1)
    return float(mat[iu].mean())


@dataclass
class SceneProbe:
    """Least-squares linear classifier over flattened latents."""

    weight: np.ndarray  # [features + 1, scene_count]
    scene_count: int
    clean_accuracy: float

    def predict(self, images: Sequence[np.ndarray]) -> np.ndarray:
        x = np.stack([np.asarray(img, dtype=np.float64).reshape(-1) for img in images])
        x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
        return np.argmax(x @ self.weight, axis=1)


def train_scene_probe(identity_count: int, scene_count: int, grid=(8, 8), channels=4, seed=0) -> SceneProbe:
    """Fit the probe on clean renders plus noise-jittered copies of them."""
    place = canonical_placement(grid)
    rng = np.random.default_rng([int(seed), 1234])  # fixed jitter stream
    feats, labels, clean_rows = [], [], []
    for family in range(identity_count):
        for variant in range(GLYPH_VARIANTS):
            for scene in range(scene_count):
                img = render_scene(
                    SceneSpec(family * GLYPH_VARIANTS + variant, scene, place), grid, channels
                ).reshape(-1)
                for level in _PROBE_NOISE_LEVELS:
                    reps = 1 if level == 0.0 else _PROBE_JITTER_REPS
                    for _ in range(reps):
                        row = img if level == 0.0 else img + level * rng.standard_normal(img.shape)
                        if level == 0.0:
                            clean_rows.append(len(feats))
                        feats.append(row)
                        labels.append(scene)
    x = np.stack(feats)
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    y = np.eye(scene_count)[np.asarray(labels)]
    weight, *_ = np.linalg.lstsq(x, y, rcond=None)
    pred = np.argmax(x[clean_rows] @ weight, axis=1)
    clean_acc = float((pred == np.asarray(labels)[clean_rows]).mean())
    return SceneProbe(weight=weight, scene_count=scene_count, clean_accuracy=clean_acc)


def alignment_score(images: Sequence[np.ndarray], scene_ids: Sequence[int], probe: SceneProbe) -> float:
    """Fraction of images whose probe-predicted scene matches the prompt's scene."""
    if len(images) == 0:
        raise ConfigError("alignment needs at least one image")
    if len(images) != len(scene_ids):
        raise ConfigError(f"{len(images)} images but {len(scene_ids)} scene ids")
    if probe.clean_accuracy < PROBE_MIN_CLEAN_ACCURACY:
        raise ConfigError(
            f"probe clean accuracy {probe.clean_accuracy:.3f} below required {PROBE_MIN_CLEAN_ACCURACY}"
        )
    pred = probe.predict(images)
    return float((pred == np.asarray(scene_ids)).mean())


def story_metrics(images, scene_ids, footprints, probe: SceneProbe) -> StoryMetrics:
    mat = pairwise_cosines(images, footprints)
    iu = np.triu_indices(len(images), k=1)
    consistency = float(mat[iu].mean()) if len(images) > 1 else 1.0
    alignment = alignment_score(images, scene_ids, probe)
    return StoryMetrics(
        subject_consistency=consistency,
        prompt_alignment=alignment,
        combined=consistency + alignment,
        per_pair=mat,
    )


def ablation_report(results: Dict[str, Dict[int, StoryMetrics]]) -> str:
    """Per-variant mean and spread over seeds, ranked by combined score.

    ``results`` maps variant -> {seed -> StoryMetrics}; every variant must
    cover the same seed set. Output is a fixed-width table followed by a
    machine-readable JSON block; ties share a rank and are flagged.
    """
    if not results:
        raise ConfigError("no results to report")
    seed_sets = {v: tuple(sorted(r)) for v, r in results.items()}
    reference = next(iter(seed_sets.values()))
    for v, s in seed_sets.items():
        if s != reference:
            raise ConfigError(f"variant {v} ran seeds {s}, expected {reference}")

    rows = []
    for variant, by_seed in results.items():
        cons = np.array([by_seed[s].subject_consistency for s in reference])
        align = np.array([by_seed[s].prompt_alignment for s in reference])
        comb = np.array([by_seed[s].combined for s in reference])
        rows.append(
            {
                "variant": variant,
                "consistency_mean": float(cons.mean()),
                "consistency_std": float(cons.std()),
                "alignment_mean": float(align.mean()),
                "alignment_std": float(align.std()),
                "combined_mean": float(comb.mean()),
                "combined_std": float(comb.std()),
            }
        )
    rows.sort(key=lambda r: -r["combined_mean"])
    rank = 0
    prev = None
    for i, row in enumerate(rows):
        if prev is None or row["combined_mean"] != prev:
            rank = i + 1
        row["rank"] = rank
        row["tied"] = False
        prev = row["combined_mean"]
    for i, row in enumerate(rows):
        row["tied"] = any(
            other is not row and other["combined_mean"] == row["combined_mean"] for other in rows
        )

    head = f"{'variant':<20}{'consistency':>20}{'alignment':>20}{'combined':>20}{'rank':>8}"
    lines = [head, "-" * len(head)]
    for row in rows:
        rank_txt = f"{row['rank']}=" if row["tied"] else f"{row['rank']}"
        lines.append(
            f"{row['variant']:<20}"
            f"{row['consistency_mean']:>12.4f} ± {row['consistency_std']:<5.4f}"
            f"{row['alignment_mean']:>12.4f} ± {row['alignment_std']:<5.4f}"
            f"{row['combined_mean']:>12.4f} ± {row['combined_std']:<5.4f}"
            f"{rank_txt:>8}"
        )
    payload = {"seeds": list(reference), "rows": rows}
    lines.append("")
    lines.append("JSON: " + json.dumps(payload, sort_keys=True))
    return "\n".join(lines) + "\n"
