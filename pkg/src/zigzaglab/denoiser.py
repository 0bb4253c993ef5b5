"""Noise-prediction interface with two implementations.

``TransformerDenoiser`` wraps the toy transformer (attention records and
key/value injection available). ``GaussianDenoiser`` is an analytic oracle:
for a Gaussian prior over clean data it returns the posterior-mean noise
prediction in closed form, which makes sampler behavior checkable against
exact distributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Mapping, Optional

import numpy as np

from . import network
from .errors import ConfigError, NumericError
from .prompts import PromptEmbedding
from .schedule import LatentState, NoiseSchedule
from .weights import ToyDenoiserWeights


@dataclass
class DenoiserRequest:
    latent: LatentState
    timestep: int
    prompt_embedding: PromptEmbedding
    injection: Optional[Mapping] = None  # layer -> cache entry with .keys/.values
    record_attention: bool = False


@dataclass
class AttentionRecord:
    """Post-softmax text-image scores and current self-attention projections."""

    layer_index: int
    timestep: int
    text_image_scores: np.ndarray  # [visual_tokens, text_tokens]
    self_keys: np.ndarray  # [visual_tokens, head_dim]
    self_values: np.ndarray


@dataclass
class DenoiserResponse:
    eps: np.ndarray
    attention_records: Optional[List[AttentionRecord]] = None


def predict_eps_transformer(req: DenoiserRequest, weights: ToyDenoiserWeights) -> DenoiserResponse:
    """One transformer evaluation; injection and attention recording per request."""
    x = req.latent.data
    b = x.shape[0]
    emb = req.prompt_embedding.matrix
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise ConfigError(f"prompt embedding must be [tokens, dim] with >= 1 token, got {emb.shape}")
    injection = None
    if req.injection is not None:
        injection = {int(l): (entry.keys, entry.values) for l, entry in req.injection.items()}
    text = np.broadcast_to(emb, (b,) + emb.shape)
    eps, raw_records = network.forward(
        weights,
        x,
        np.full(b, req.timestep, dtype=np.intp),
        text,
        injection=injection,
        record_attention=req.record_attention,
    )
    records = None
    if req.record_attention:
        records = [
            AttentionRecord(l, req.timestep, scores, keys, values)
            for l, scores, keys, values in raw_records
        ]
    return DenoiserResponse(eps=eps, attention_records=records)


@dataclass(frozen=True)
class GaussianPrior:
    """Diagonal Gaussian over clean latents: mean and per-coordinate variance.

    Both broadcast against [tokens, channels]; variance must be positive.
    """

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "var", np.asarray(self.var, dtype=np.float64))
        if np.any(self.var <= 0.0) or not np.all(np.isfinite(self.var)):
            raise ConfigError("prior variance must be finite and positive definite (diagonal > 0)")
        if not np.all(np.isfinite(self.mean)):
            raise ConfigError("prior mean must be finite")


def predict_eps_gaussian(req: DenoiserRequest, prior: GaussianPrior, sched: NoiseSchedule) -> DenoiserResponse:
    """Posterior-mean noise prediction for x_t = sqrt(a_t) x_0 + sqrt(1-a_t) eps.

    With x_0 ~ N(mean, var) per coordinate:
        E[x_0 | x_t] = mean + sqrt(a_t) var (x_t - sqrt(a_t) mean) / (a_t var + 1 - a_t)
        eps* = (x_t - sqrt(a_t) E[x_0 | x_t]) / sqrt(1 - a_t)
    """
    t = req.timestep
    if not (0 <= t <= sched.num_steps):
        raise ValueError(f"timestep {t} outside schedule range [0, {sched.num_steps}]")
    a = sched.alphas[t]
    if a >= 1.0:
        raise ValueError("alpha_t = 1 leaves the noise prediction undefined")
    x = req.latent.data
    sqrt_a = math.sqrt(a)
    post_mean = prior.mean + sqrt_a * prior.var * (x - sqrt_a * prior.mean) / (a * prior.var + 1.0 - a)
    eps = (x - sqrt_a * post_mean) / math.sqrt(1.0 - a)
    if not np.all(np.isfinite(eps)):
        raise NumericError("gaussian oracle produced non-finite prediction")
    return DenoiserResponse(eps=eps)


class TransformerDenoiser:
    """Denoiser protocol adapter over a fixed set of transformer weights."""

    def __init__(self, weights: ToyDenoiserWeights):
        self.weights = weights

    def predict(self, req: DenoiserRequest) -> DenoiserResponse:
        return predict_eps_transformer(req, self.weights)


class GaussianDenoiser:
    """Analytic oracle; resolves the prior by the request's null flag."""

    def __init__(self, prior: GaussianPrior, sched: NoiseSchedule, null_prior: Optional[GaussianPrior] = None):
        self.prior = prior
        self.null_prior = null_prior if null_prior is not None else prior
        self.sched = sched

    def predict(self, req: DenoiserRequest) -> DenoiserResponse:
        prior = self.null_prior if req.prompt_embedding.is_null else self.prior
        return predict_eps_gaussian(req, prior, self.sched)


def guided_eps(denoiser, req_cond: DenoiserRequest, req_null: DenoiserRequest, scale: float) -> np.ndarray:
    """Classifier-free combination eps_null + scale * (eps_cond - eps_null).

    scale 0 and 1 short-circuit to a single branch, so those settings are
    bitwise equal to the plain prediction and cost one call instead of two.
    """
    if req_cond.latent.data is not req_null.latent.data and not np.array_equal(
        req_cond.latent.data, req_null.latent.data
    ):
        raise ValueError("guided_eps requires both requests to share the latent")
    if req_cond.timestep != req_null.timestep:
        raise ValueError("guided_eps requires matching timesteps")
    if not req_null.prompt_embedding.is_null:
        raise ValueError("req_null must carry the null prompt")
    if scale == 0.0:
        return denoiser.predict(req_null).eps
    if scale == 1.0:
        return denoiser.predict(req_cond).eps
    eps_cond = denoiser.predict(req_cond).eps
    eps_null = denoiser.predict(req_null).eps
    return eps_null + scale * (eps_cond - eps_null)
