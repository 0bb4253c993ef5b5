"""Toy denoiser parameters and checkpoint persistence.

Checkpoint layout: one magic line, one JSON header line (format version,
dimensions, step count, vocabulary, schedule, and the ordered matrix
manifest), then each matrix as raw little-endian float64 in manifest order.
The matrix order is exactly what ``ToyDenoiserWeights.named_arrays`` yields:
token_embedding, pos_embedding, time_embedding, w_in, b_in, then for each
layer the fields of ``LayerWeights`` in declaration order, then ln_out_g,
ln_out_b, w_out, b_out.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from typing import Iterator, Tuple

import numpy as np

from .errors import ConfigError
from .prompts import NULL_TOKEN, PromptVocabulary
from .schedule import NoiseSchedule

CHECKPOINT_MAGIC = b"zigzaglab-checkpoint"
CHECKPOINT_VERSION = 1
INIT_SCALE = 0.02


@dataclass
class LayerWeights:
    """One transformer block: cross-attention, self-attention, feed-forward."""

    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq_cross: np.ndarray
    wk_cross: np.ndarray
    wv_cross: np.ndarray
    wo_cross: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    wq_self: np.ndarray
    wk_self: np.ndarray
    wv_self: np.ndarray
    wo_self: np.ndarray
    ln3_g: np.ndarray
    ln3_b: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray


@dataclass
class ToyDenoiserWeights:
    token_embedding: np.ndarray  # [vocab, model_dim]; row 0 is the null token
    pos_embedding: np.ndarray  # [tokens, model_dim]
    time_embedding: np.ndarray  # [num_steps + 1, model_dim]
    w_in: np.ndarray  # [channels, model_dim]
    b_in: np.ndarray  # [model_dim]
    layers: list
    ln_out_g: np.ndarray
    ln_out_b: np.ndarray
    w_out: np.ndarray  # [model_dim, channels]
    b_out: np.ndarray  # [channels]
    num_heads: int
    grid: tuple  # (rows, cols), rows * cols == tokens
    vocab_tokens: tuple
    schedule: NoiseSchedule

    @property
    def model_dim(self) -> int:
        return self.w_in.shape[1]

    @property
    def channels(self) -> int:
        return self.w_in.shape[0]

    @property
    def tokens(self) -> int:
        return self.pos_embedding.shape[0]

    @property
    def ffn_dim(self) -> int:
        return self.layers[0].w_ff1.shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_steps(self) -> int:
        return self.time_embedding.shape[0] - 1

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def named_arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        """All parameters as (name, array) in the documented checkpoint order."""
        yield "token_embedding", self.token_embedding
        yield "pos_embedding", self.pos_embedding
        yield "time_embedding", self.time_embedding
        yield "w_in", self.w_in
        yield "b_in", self.b_in
        for i, layer in enumerate(self.layers):
            for f in fields(LayerWeights):
                yield f"layers.{i}.{f.name}", getattr(layer, f.name)
        yield "ln_out_g", self.ln_out_g
        yield "ln_out_b", self.ln_out_b
        yield "w_out", self.w_out
        yield "b_out", self.b_out

    def get_array(self, name: str) -> np.ndarray:
        if name.startswith("layers."):
            _, idx, fname = name.split(".")
            return getattr(self.layers[int(idx)], fname)
        return getattr(self, name)

    def vocabulary(self) -> PromptVocabulary:
        """Vocabulary view over the live embedding table (shared storage)."""
        return PromptVocabulary(tokens=self.vocab_tokens, embeddings=self.token_embedding)

    def copy(self) -> "ToyDenoiserWeights":
        layers = [
            LayerWeights(**{f.name: getattr(l, f.name).copy() for f in fields(LayerWeights)})
            for l in self.layers
        ]
        return dataclasses.replace(
            self,
            token_embedding=self.token_embedding.copy(),
            pos_embedding=self.pos_embedding.copy(),
            time_embedding=self.time_embedding.copy(),
            w_in=self.w_in.copy(),
            b_in=self.b_in.copy(),
            layers=layers,
            ln_out_g=self.ln_out_g.copy(),
            ln_out_b=self.ln_out_b.copy(),
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
        )

    def validate(self):
        d = self.model_dim
        if d % self.num_heads != 0:
            raise ConfigError(f"model_dim {d} not divisible by num_heads {self.num_heads}")
        if self.grid[0] * self.grid[1] != self.tokens:
            raise ConfigError(f"grid {self.grid} does not match token count {self.tokens}")
        if self.vocab_tokens[0] != NULL_TOKEN:
            raise ConfigError("vocabulary slot 0 must be the null token")
        if len(self.vocab_tokens) != self.token_embedding.shape[0]:
            raise ConfigError("vocab token list and embedding table sizes differ")
        if self.schedule.num_steps != self.num_steps:
            raise ConfigError(
                f"schedule has {self.schedule.num_steps} steps, time embedding expects {self.num_steps}"
            )
        expect = {
            "token_embedding": (len(self.vocab_tokens), d),
            "pos_embedding": (self.tokens, d),
            "time_embedding": (self.num_steps + 1, d),
            "w_in": (self.channels, d),
            "b_in": (d,),
            "ln_out_g": (d,),
            "ln_out_b": (d,),
            "w_out": (d, self.channels),
            "b_out": (self.channels,),
        }
        f = self.ffn_dim
        for i in range(self.num_layers):
            for nm in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "ln3_g", "ln3_b"):
                expect[f"layers.{i}.{nm}"] = (d,)
            for nm in ("wq_cross", "wk_cross", "wv_cross", "wo_cross", "wq_self", "wk_self", "wv_self", "wo_self"):
                expect[f"layers.{i}.{nm}"] = (d, d)
            expect[f"layers.{i}.w_ff1"] = (d, f)
            expect[f"layers.{i}.b_ff1"] = (f,)
            expect[f"layers.{i}.w_ff2"] = (f, d)
            expect[f"layers.{i}.b_ff2"] = (d,)
        for name, arr in self.named_arrays():
            if arr.shape != expect[name]:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {expect[name]}")
            if arr.dtype != np.float64:
                raise ConfigError(f"{name} must be float64, got {arr.dtype}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")


def init_weights(
    vocab_tokens,
    schedule: NoiseSchedule,
    seed,
    grid=(8, 8),
    channels=4,
    model_dim=32,
    ffn_dim=64,
    num_layers=4,
    num_heads=1,
) -> ToyDenoiserWeights:
    """Small-normal initialization; layer-norm gains start at 1."""
    rng = np.random.default_rng(seed)
    tokens = grid[0] * grid[1]

    def mat(*shape):
        return rng.normal(0.0, INIT_SCALE, size=shape)

    layers = []
    for _ in range(num_layers):
        layers.append(
            LayerWeights(
                ln1_g=np.ones(model_dim),
                ln1_b=np.zeros(model_dim),
                wq_cross=mat(model_dim, model_dim),
                wk_cross=mat(model_dim, model_dim),
                wv_cross=mat(model_dim, model_dim),
                wo_cross=mat(model_dim, model_dim),
                ln2_g=np.ones(model_dim),
                ln2_b=np.zeros(model_dim),
                wq_self=mat(model_dim, model_dim),
                wk_self=mat(model_dim, model_dim),
                wv_self=mat(model_dim, model_dim),
                wo_self=mat(model_dim, model_dim),
                ln3_g=np.ones(model_dim),
                ln3_b=np.zeros(model_dim),
                w_ff1=mat(model_dim, ffn_dim),
                b_ff1=np.zeros(ffn_dim),
                w_ff2=mat(ffn_dim, model_dim),
                b_ff2=np.zeros(model_dim),
            )
        )
    w = ToyDenoiserWeights(
        token_embedding=mat(len(vocab_tokens), model_dim),
        pos_embedding=mat(tokens, model_dim),
        time_embedding=mat(schedule.num_steps + 1, model_dim),
        w_in=mat(channels, model_dim),
        b_in=np.zeros(model_dim),
        layers=layers,
        ln_out_g=np.ones(model_dim),
        ln_out_b=np.zeros(model_dim),
        w_out=mat(model_dim, channels),
        b_out=np.zeros(channels),
        num_heads=num_heads,
        grid=tuple(grid),
        vocab_tokens=tuple(vocab_tokens),
        schedule=schedule,
    )
    w.validate()
    return w


def save_checkpoint(weights: ToyDenoiserWeights, path):
    weights.validate()
    manifest = [[name, list(arr.shape)] for name, arr in weights.named_arrays()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "num_layers": weights.num_layers,
        "model_dim": weights.model_dim,
        "ffn_dim": weights.ffn_dim,
        "num_heads": weights.num_heads,
        "channels": weights.channels,
        "grid": list(weights.grid),
        "num_steps": weights.num_steps,
        "vocab": list(weights.vocab_tokens),
        "schedule": weights.schedule.to_dict(),
        "matrices": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" v%d\n" % CHECKPOINT_VERSION)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, arr in weights.named_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ToyDenoiserWeights:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if not magic.startswith(CHECKPOINT_MAGIC):
            raise ConfigError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {header['format_version']}")
        arrays = {}
        for name, shape in header["matrices"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ConfigError(f"{path}: truncated payload for {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ConfigError(f"{path}: trailing bytes after declared matrices")

    num_layers = header["num_layers"]
    layers = []
    for i in range(num_layers):
        layers.append(
            LayerWeights(**{f.name: arrays[f"layers.{i}.{f.name}"] for f in fields(LayerWeights)})
        )
    weights = ToyDenoiserWeights(
        token_embedding=arrays["token_embedding"],
        pos_embedding=arrays["pos_embedding"],
        time_embedding=arrays["time_embedding"],
        w_in=arrays["w_in"],
        b_in=arrays["b_in"],
        layers=layers,
        ln_out_g=arrays["ln_out_g"],
        ln_out_b=arrays["ln_out_b"],
        w_out=arrays["w_out"],
        b_out=arrays["b_out"],
        num_heads=header["num_heads"],
        grid=tuple(header["grid"]),
        vocab_tokens=tuple(header["vocab"]),
        schedule=NoiseSchedule.from_dict(header["schedule"]),
    )
    weights.validate()
    return weights
