"""Denoising objective with exact gradients, optimizers, and the training loop.

The loss matches the usual epsilon-prediction objective: per item draw a
timestep uniformly from [1, T] and Gaussian noise, noise the clean latent,
and penalize the squared L2 norm of the prediction error (batch-averaged, so
a zero predictor scores about tokens * channels). Gradients come from the
manual backward pass in ``network``; finite differences are the test oracle.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np

from . import network
from .errors import ConfigError, TrainingError
from .prompts import PromptEmbedding, embed, fuse_prompts, null_prompt
from .schedule import NoiseSchedule
from .weights import ToyDenoiserWeights, init_weights
from .world import TrainConfig, build_dataset, identity_tokens, render_scene, scene_tokens, vocab_tokens

P_UNCOND = 0.1  # fraction of training items that see the null prompt
TRAIN_W_INACTIVE = 0.3


def ldm_loss(weights: ToyDenoiserWeights, x0: np.ndarray, embeddings: Sequence[PromptEmbedding], sched: NoiseSchedule, rng):
    """Loss and exact gradients for one batch.

    x0: [batch, tokens, channels]; one prompt embedding per item. Items are
    grouped by prompt length so each group runs as one taped forward pass.
    Returns (loss, grads dict keyed like named_arrays); prompt gradients are
    scattered into the token-embedding entry via each row's provenance.
    """
    b = x0.shape[0]
    if b < 1:
        raise ConfigError("ldm_loss requires a nonempty batch")
    if len(embeddings) != b:
        raise ConfigError(f"{len(embeddings)} embeddings for batch of {b}")
    t = rng.integers(1, sched.num_steps + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    a = sched.alphas[t][:, None, None]
    x_t = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps

    grads = network.zero_grads(weights)
    loss = 0.0
    for idx in _groups_by_length(embeddings):
        text = np.stack([embeddings[i].matrix for i in idx])
        tape = {}
        pred, _ = network.forward(weights, x_t[idx], t[idx], text, tape=tape)
        diff = pred - eps[idx]
        loss += float((diff**2).sum())
        g, d_text = network.backward(weights, tape, 2.0 * diff / b)
        for name in g:
            grads[name] += g[name]
        for j, i in enumerate(idx):
            e = embeddings[i]
            np.add.at(grads["token_embedding"], e.token_ids, e.row_weights[:, None] * d_text[j])
    return loss / b, grads


def _groups_by_length(embeddings):
    by_len = {}
    for i, e in enumerate(embeddings):
        by_len.setdefault(e.matrix.shape[0], []).append(i)
    return [np.array(v, dtype=np.intp) for _, v in sorted(by_len.items())]


class SgdMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, weights: ToyDenoiserWeights, grads: dict):
        for name, arr in weights.named_arrays():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(arr)
                self.velocity[name] = v
            v *= self.momentum
            v -= self.lr * grads[name]
            arr += v


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = 0

    def step(self, weights: ToyDenoiserWeights, grads: dict):
        self.steps += 1
        b1c = 1.0 - self.beta1**self.steps
        b2c = 1.0 - self.beta2**self.steps
        for name, arr in weights.named_arrays():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(arr))
            v = self.v.setdefault(name, np.zeros_like(arr))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            arr -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SgdMomentum(lr)
    if kind == "adam":
        return Adam(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def build_batch_prompts(items, order, vocab, scene_names, identity_names, rng):
    """Per-item training prompts: fused identity + scene subset, 10% null.

    Each prompt concatenates the item's identity token with its true scene
    plus a random set of distractor scenes (shuffled), reweighted toward the
    true scene, mirroring how story prompts look at sampling time.
    """
    prompts = []
    n_scenes = len(scene_names)
    for i in order:
        item = items[i]
        if rng.random() < P_UNCOND:
            prompts.append(null_prompt(vocab))
            continue
        others = [s for s in range(n_scenes) if s != item.scene_id]
        n_extra = int(rng.integers(0, n_scenes))
        extras = list(rng.choice(others, size=min(n_extra, len(others)), replace=False)) if n_extra else []
        scene_list = [item.scene_id] + [int(s) for s in extras]
        rng.shuffle(scene_list)
        fp = fuse_prompts([identity_names[item.family]], [[scene_names[s]] for s in scene_list])
        prompts.append(embed(fp, scene_list.index(item.scene_id), vocab, 1.0, TRAIN_W_INACTIVE))
    return prompts


def train(config: TrainConfig, sched: NoiseSchedule, vocab_names: Optional[Sequence[str]] = None):
    """Fit the toy denoiser; returns (weights, per-epoch loss list).

    Deterministic given config.seed: data order, noise draws, and prompt
    subsets all come from seeds spawned off the config seed.
    """
    if vocab_names is None:
        vocab_names = vocab_tokens(config.identity_count, config.scene_count)
    root = np.random.SeedSequence(config.seed)
    init_seq, order_seq, noise_seq = root.spawn(3)
    weights = init_weights(
        vocab_names,
        sched,
        seed=init_seq,
        grid=config.grid,
        channels=config.channels,
    )
    items = build_dataset(config)
    x0_all = np.stack([render_scene(it.spec, config.grid, config.channels) for it in items])
    id_names = identity_tokens(config.identity_count)
    sc_names = scene_tokens(config.scene_count)

    rng_order = np.random.default_rng(order_seq)
    rng_noise = np.random.default_rng(noise_seq)
    opt = make_optimizer(config.optimizer, config.learning_rate)

    log: List[float] = []
    for epoch in range(config.epochs):
        perm = rng_order.permutation(len(items))
        total, seen = 0.0, 0
        for start in range(0, len(items), config.batch_size):
            idx = perm[start : start + config.batch_size]
            vocab = weights.vocabulary()
            prompts = build_batch_prompts(items, idx, vocab, sc_names, id_names, rng_order)
            loss, grads = ldm_loss(weights, x0_all[idx], prompts, sched, rng_noise)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            if config.learning_rate > 0.0:
                opt.step(weights, grads)
            total += loss * len(idx)
            seen += len(idx)
        log.append(total / seen)
    return weights, log
