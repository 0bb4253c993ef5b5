"""File formats: latent grid dumps, run manifests, flat key=value configs."""

from __future__ import annotations

import hashlib
import json
from typing import Tuple

import numpy as np

from .errors import ConfigError

LATENT_MAGIC = b"zigzaglab-latent"
LATENT_VERSION = 1


def write_latent_grid(path, data: np.ndarray, grid: Tuple[int, int], meta: dict = None):
    """Portable raw-float dump: magic line, JSON header line, little-endian float64."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ConfigError(f"latent dump expects [tokens, channels], got shape {data.shape}")
    if grid[0] * grid[1] != data.shape[0]:
        raise ConfigError(f"grid {grid} does not match {data.shape[0]} tokens")
    header = {
        "format_version": LATENT_VERSION,
        "tokens": data.shape[0],
        "channels": data.shape[1],
        "rows": grid[0],
        "cols": grid[1],
    }
    if meta:
        header["meta"] = meta
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC + b" v%d\n" % LATENT_VERSION)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_latent_grid(path):
    with open(path, "rb") as fh:
        magic = fh.readline()
        if not magic.startswith(LATENT_MAGIC):
            raise ConfigError(f"{path}: not a latent grid file")
        header = json.loads(fh.readline().decode("utf-8"))
        count = header["tokens"] * header["channels"]
        buf = fh.read(count * 8)
        if len(buf) != count * 8:
            raise ConfigError(f"{path}: truncated latent payload")
        data = np.frombuffer(buf, dtype="<f8").astype(np.float64)
    return data.reshape(header["tokens"], header["channels"]), header


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, manifest: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def parse_kv_config(text: str) -> dict:
    """Flat ``key = value`` lines; blank lines and # comments ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out
