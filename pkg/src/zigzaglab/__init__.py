"""Desk-scale diffusion sampling laboratory.

Zigzag sampling (zig / zag / generation sub-steps) with identity key/value
caching and asymmetric prompt guidance, exercised against an analytic
Gaussian oracle and a tiny trained transformer denoiser on a synthetic
story world.
"""

from .cache import IdentityTokenCache, build_cache, inject_kv, load_cache, save_cache, subject_scores, top_k_select
from .denoiser import (
    AttentionRecord,
    DenoiserRequest,
    DenoiserResponse,
    GaussianDenoiser,
    GaussianPrior,
    TransformerDenoiser,
    guided_eps,
    predict_eps_gaussian,
    predict_eps_transformer,
)
from .metrics import (
    SceneProbe,
    StoryMetrics,
    ablation_report,
    alignment_score,
    consistency_score,
    story_metrics,
    subject_region_features,
    train_scene_probe,
)
from .prompts import (
    FusedPrompt,
    GuidanceConfig,
    Phase,
    PromptEmbedding,
    PromptVocabulary,
    embed,
    fuse_prompts,
    identity_prompt,
    null_prompt,
    parse_story,
    phase_prompt,
)
from .sampler import (
    SamplerConfig,
    SamplerVariant,
    StoryResult,
    generate_long_story,
    generate_story,
    sample_vanilla,
    sample_zigzag,
)
from .schedule import LatentState, NoiseSchedule, build_schedule, denoise_step, initial_noise, inverse_step
from .training import Adam, SgdMomentum, ldm_loss, train
from .weights import ToyDenoiserWeights, init_weights, load_checkpoint, save_checkpoint
from .world import SceneSpec, TrainConfig, glyph_footprint, render_scene

__version__ = "0.1.0"
