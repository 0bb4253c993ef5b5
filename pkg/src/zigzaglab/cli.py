"""Command-line entry point.

Subcommands: train, cache, sample, story (with --window for long stories),
ablate, verify, dump-scenes, replay. Exit codes: 0 success, 1 usage,
2 configuration, 3 numeric or training failure.

Every command writes a JSON run manifest next to its artifacts containing
the resolved configuration, the schedule (including the full alpha table),
per-scene seeds and call counts, and artifact hashes; ``replay`` reruns a
command from its manifest.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import io, metrics, verify, world
from .cache import build_cache, load_cache, save_cache
from .errors import CacheError, ConfigError, NumericError, TrainingError
from .prompts import GuidanceConfig, identity_prompt, parse_story
from .sampler import SamplerConfig, SamplerVariant, generate_long_story, generate_story
from .schedule import build_schedule
from .training import train
from .weights import load_checkpoint, save_checkpoint
from .world import IDENTITY_NAMES, SCENE_NAMES, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

VARIANT_CHOICES = [v.value for v in SamplerVariant]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    p = _Parser(prog="zigzaglab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[], help="train the toy denoiser from a config file")
    t.add_argument("--config", required=True, help="flat key=value training config")
    t.add_argument("--checkpoint", required=True, help="output checkpoint path")
    t.add_argument("--log-file", default=None, help="per-epoch loss log (csv), defaults next to checkpoint")

    c = sub.add_parser("cache", help="build the identity token cache from a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--identity", required=True, help="identity prompt tokens, whitespace separated")
    c.add_argument("--k-ratio", type=float, default=0.2)
    c.add_argument("--layers", default=None, help="comma-separated layer indices (default: all)")
    c.add_argument("--selection", choices=["per_layer", "averaged"], default="per_layer")
    c.add_argument("--guidance", type=float, default=5.5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True, help="output cache path")

    def sampling_flags(sp, batch=False):
        sp.add_argument("--cache", default=None, help="identity cache file (built on the fly if omitted)")
        sp.add_argument("--variant", choices=VARIANT_CHOICES, default=SamplerVariant.AZS_ASYMMETRIC.value)
        sp.add_argument("--steps", type=int, default=None, help="must match the checkpoint (default: from checkpoint)")
        sp.add_argument("--guidance", type=float, default=5.5)
        sp.add_argument("--zag-guidance", type=float, default=0.0)
        sp.add_argument("--k-ratio", type=float, default=0.2)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("sample", help="sample a single identity + scene prompt")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--identity", required=True)
    s.add_argument("--scene", required=True)
    sampling_flags(s)
    s.set_defaults(variant=SamplerVariant.VANILLA.value)

    st = sub.add_parser("story", help="generate a full story (use --window for long stories)")
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--story", required=True, help="story file: identity line then scene lines")
    sampling_flags(st)
    st.add_argument("--window", type=int, default=None, help="sliding-window size for long stories")
    st.add_argument("--stride", type=int, default=None, help="window stride (default: window size)")

    a = sub.add_parser("ablate", help="run a variant or k-ratio grid and write the comparison report")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--story", required=True)
    a.add_argument("--variants", default="azs_asymmetric,zig_gen_symmetric,zig_zag_symmetric,all_symmetric")
    a.add_argument("--k-ratios", default=None, help="comma list; sweeps k with the azs variant instead of variants")
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--guidance", type=float, default=5.5)
    a.add_argument("--zag-guidance", type=float, default=0.0)
    a.add_argument("--out", required=True, help="report path (a .json twin is written alongside)")

    v = sub.add_parser("verify", help="run the randomized algebraic invariant suite")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--cases", type=int, default=100)

    d = sub.add_parser("dump-scenes", help="write clean rendered scenes as latent grid files")
    d.add_argument("--out", required=True)
    d.add_argument("--identities", type=int, default=4)
    d.add_argument("--scenes", type=int, default=6)
    d.add_argument("--grid", default="8x8")
    d.add_argument("--channels", type=int, default=4)

    r = sub.add_parser("replay", help="rerun a command from its manifest")
    r.add_argument("--manifest", required=True)
    return p


def _require_file(path, what):
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _parse_grid(text):
    try:
        rows, cols = (int(x) for x in text.lower().split("x"))
        return (rows, cols)
    except Exception:
        raise ConfigError(f"grid must look like 8x8, got {text!r}") from None


def _schedule_from_kv(kv, default_steps=50):
    kind = kv.get("schedule", "linear_beta")
    steps = int(kv.get("num_steps", default_steps))
    params = {}
    for key in ("beta_start", "beta_end", "offset", "max_beta", "value"):
        if key in kv:
            params[key] = float(kv[key])
    return build_schedule(kind, steps, **params)


def _train_config_from_kv(kv) -> TrainConfig:
    known = {
        "epochs": int,
        "batch_size": int,
        "learning_rate": float,
        "channels": int,
        "identity_count": int,
        "scene_count": int,
        "optimizer": str,
        "seed": int,
    }
    args = {}
    for key, cast in known.items():
        if key in kv:
            args[key] = cast(kv[key])
    if "grid" in kv:
        args["grid"] = _parse_grid(kv["grid"])
    return TrainConfig(**args)


def cmd_train(args, argv):
    _require_file(args.config, "config file")
    with open(args.config, "r", encoding="utf-8") as fh:
        kv = io.parse_kv_config(fh.read())
    config = _train_config_from_kv(kv)
    sched = _schedule_from_kv(kv)
    t0 = time.perf_counter()
    weights, log = train(config, sched)
    elapsed = time.perf_counter() - t0
    save_checkpoint(weights, args.checkpoint)
    log_path = args.log_file or args.checkpoint + ".loss.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(log):
            writer.writerow([i, f"{loss!r}"])
    manifest = {
        "command": "train",
        "argv": argv,
        "config": {**kv, "resolved": {**config.__dict__, "grid": list(config.grid)}},
        "schedule": sched.to_dict(),
        "wall_clock_seconds": elapsed,
        "artifacts": {
            "checkpoint": io.sha256_file(args.checkpoint),
            "loss_log": io.sha256_file(log_path),
        },
    }
    io.write_manifest(args.checkpoint + ".manifest.json", manifest)
    print(f"trained {config.epochs} epochs in {elapsed:.1f}s, final loss {log[-1]:.4f}")
    print(f"checkpoint: {args.checkpoint}")
    return EXIT_OK


def cmd_cache(args, argv):
    weights = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    layer_mask = None
    if args.layers:
        layer_mask = frozenset(int(x) for x in args.layers.split(","))
    cache = build_cache(
        identity_prompt(args.identity.split()),
        weights,
        weights.schedule,
        args.k_ratio,
        layer_mask=layer_mask,
        seed=[args.seed, 0],
        guidance_scale=args.guidance,
        selection=args.selection,
    )
    save_cache(cache, args.out)
    manifest = {
        "command": "cache",
        "argv": argv,
        "config": {
            "identity": args.identity,
            "k_ratio": args.k_ratio,
            "layers": sorted(cache.layer_mask),
            "selection": args.selection,
            "guidance": args.guidance,
            "seed": args.seed,
        },
        "schedule": cache.schedule,
        "cache_header_hash": cache.header_hash(),
        "artifacts": {"cache": io.sha256_file(args.out)},
    }
    io.write_manifest(args.out + ".manifest.json", manifest)
    print(f"entries={len(cache.entries)} k_count={cache.k_count}")
    print(f"cache: {args.out}")
    return EXIT_OK


def _sampler_config(args, weights, window=None, stride=None) -> SamplerConfig:
    steps = args.steps if args.steps is not None else weights.num_steps
    if steps != weights.num_steps:
        raise ConfigError(
            f"--steps {steps} does not match the checkpoint's trained step count {weights.num_steps}"
        )
    return SamplerConfig(
        num_steps=steps,
        variant=SamplerVariant(args.variant),
        guidance=GuidanceConfig(s_main=args.guidance, s_zag=args.zag_guidance),
        k_ratio=args.k_ratio,
        seed=args.seed,
        window=window,
        stride=stride,
    )


def _load_cache_if_given(args, weights, config):
    if args.cache is None:
        return None
    cache = load_cache(_require_file(args.cache, "cache file"))
    if cache.num_steps != weights.num_steps:
        raise ConfigError(f"cache T={cache.num_steps} does not match checkpoint T={weights.num_steps}")
    return cache


def _story_scene_ids(scenes):
    """World scene ids when every scene's first token is a canonical scene name."""
    ids = []
    for toks in scenes:
        if toks and toks[0] in SCENE_NAMES:
            ids.append(SCENE_NAMES.index(toks[0]))
        else:
            return None
    return ids


def _write_story_outputs(args, argv, result, weights, sched, scenes, command):
    os.makedirs(args.out, exist_ok=True)
    artifact_hashes = {}
    for j, image in enumerate(result.images):
        path = os.path.join(args.out, f"scene_{j:02d}.lat")
        io.write_latent_grid(path, image, weights.grid, meta={"scene": j, "timestep": 0})
        artifact_hashes[os.path.basename(path)] = io.sha256_file(path)

    plot_path = os.path.join(args.out, "plot_data.csv")
    with open(plot_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "timestep", "phase", "injected", "calls", "latent_norm"])
        for log in result.per_scene_logs:
            for s in log.steps:
                writer.writerow([log.scene, s.timestep, s.phase, int(s.injected), s.calls, f"{s.latent_norm!r}"])

    scene_ids = _story_scene_ids(scenes)
    metrics_row = None
    if scene_ids is not None and len(result.images) >= 2:
        ident_count = sum(1 for t in weights.vocab_tokens if t in IDENTITY_NAMES)
        scene_count = sum(1 for t in weights.vocab_tokens if t in SCENE_NAMES)
        if ident_count >= 2 and scene_count >= max(scene_ids) + 1:
            probe = metrics.train_scene_probe(ident_count, scene_count, weights.grid, weights.channels)
            footprint = world.glyph_footprint(world.canonical_placement(weights.grid), weights.grid)
            sm = metrics.story_metrics(result.images, scene_ids, footprint, probe)
            metrics_row = {
                "subject_consistency": sm.subject_consistency,
                "prompt_alignment": sm.prompt_alignment,
                "combined": sm.combined,
            }
            with open(plot_path, "a", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow([])
                writer.writerow(["metric", "value"])
                for k, v in metrics_row.items():
                    writer.writerow([k, f"{v!r}"])

    manifest = {
        "command": command,
        "argv": argv,
        "config": result.config_snapshot.to_dict(),
        "schedule": sched.to_dict(),
        "cache_header_hash": result.cache_ref,
        "scenes": [
            {
                "scene": log.scene,
                "seed_entropy": list(log.seed_entropy),
                "total_calls": log.total_calls,
                "calls_by_phase": log.calls_by_phase(),
                "wall_clock_by_phase": log.wall_clock,
            }
            for log in result.per_scene_logs
        ],
        "scene_assignments": result.scene_assignments,
        "metrics": metrics_row,
        "artifacts": artifact_hashes,
    }
    io.write_manifest(os.path.join(args.out, "manifest.json"), manifest)
    calls = sum(l.total_calls for l in result.per_scene_logs)
    print(f"{len(result.images)} scene(s), {calls} denoiser calls, outputs in {args.out}")
    if metrics_row:
        print(
            "consistency={subject_consistency:.4f} alignment={prompt_alignment:.4f} "
            "combined={combined:.4f}".format(**metrics_row)
        )
    return EXIT_OK


def cmd_sample(args, argv):
    weights = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    config = _sampler_config(args, weights)
    cache = _load_cache_if_given(args, weights, config)
    scenes = [args.scene.split()]
    result = generate_story(
        args.identity.split(), scenes, config, weights, weights.schedule, weights.vocabulary(), cache=cache
    )
    return _write_story_outputs(args, argv, result, weights, weights.schedule, scenes, "sample")


def cmd_story(args, argv):
    weights = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    with open(_require_file(args.story, "story file"), "r", encoding="utf-8") as fh:
        identity, scenes = parse_story(fh.read())
    config = _sampler_config(args, weights, window=args.window, stride=args.stride)
    cache = _load_cache_if_given(args, weights, config)
    vocab = weights.vocabulary()
    if args.window is not None:
        result = generate_long_story(identity, scenes, config, weights, weights.schedule, vocab, cache=cache)
    else:
        result = generate_story(identity, scenes, config, weights, weights.schedule, vocab, cache=cache)
    return _write_story_outputs(args, argv, result, weights, weights.schedule, scenes, "story")


def cmd_ablate(args, argv):
    weights = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    with open(_require_file(args.story, "story file"), "r", encoding="utf-8") as fh:
        identity, scenes = parse_story(fh.read())
    scene_ids = _story_scene_ids(scenes)
    if scene_ids is None:
        raise ConfigError("ablation stories must use canonical scene tokens so alignment is measurable")
    seeds = [int(s) for s in args.seeds.split(",")]
    ident_count = sum(1 for t in weights.vocab_tokens if t in IDENTITY_NAMES)
    scene_count = sum(1 for t in weights.vocab_tokens if t in SCENE_NAMES)
    probe = metrics.train_scene_probe(ident_count, scene_count, weights.grid, weights.channels)
    footprint = world.glyph_footprint(world.canonical_placement(weights.grid), weights.grid)
    vocab = weights.vocabulary()
    sched = weights.schedule

    if args.k_ratios:
        runs = [(f"k={k}", SamplerVariant.AZS_ASYMMETRIC, float(k)) for k in args.k_ratios.split(",")]
    else:
        runs = [(v, SamplerVariant(v), 0.2) for v in args.variants.split(",")]

    results = {}
    for label, variant, k_ratio in runs:
        by_seed = {}
        for seed in seeds:
            config = SamplerConfig(
                num_steps=args.steps if args.steps is not None else weights.num_steps,
                variant=variant,
                guidance=GuidanceConfig(s_main=args.guidance, s_zag=args.zag_guidance),
                k_ratio=k_ratio,
                seed=seed,
            )
            if config.num_steps != weights.num_steps:
                raise ConfigError(
                    f"--steps {config.num_steps} does not match checkpoint step count {weights.num_steps}"
                )
            result = generate_story(identity, scenes, config, weights, sched, vocab)
            by_seed[seed] = metrics.story_metrics(result.images, scene_ids, footprint, probe)
        results[label] = by_seed

    report = metrics.ablation_report(results)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report)
    payload = {
        label: {
            str(seed): {
                "subject_consistency": m.subject_consistency,
                "prompt_alignment": m.prompt_alignment,
                "combined": m.combined,
            }
            for seed, m in by_seed.items()
        }
        for label, by_seed in results.items()
    }
    io.write_manifest(args.out + ".json", {"command": "ablate", "argv": argv, "results": payload})
    manifest = {
        "command": "ablate",
        "argv": argv,
        "config": {
            "variants": [label for label, _, _ in runs],
            "seeds": seeds,
            "guidance": args.guidance,
            "zag_guidance": args.zag_guidance,
            "steps": args.steps if args.steps is not None else weights.num_steps,
        },
        "schedule": sched.to_dict(),
        "artifacts": {"report": io.sha256_file(args.out)},
    }
    io.write_manifest(args.out + ".manifest.json", manifest)
    print(report, end="")
    return EXIT_OK


def cmd_verify(args, argv):
    ok = verify.run_all(seed=args.seed, cases=args.cases)
    print("verify: all checks passed" if ok else "verify: FAILURES above")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_dump_scenes(args, argv):
    grid = _parse_grid(args.grid)
    os.makedirs(args.out, exist_ok=True)
    place = world.canonical_placement(grid)
    count = 0
    for identity_id in range(args.identities * world.GLYPH_VARIANTS):
        for scene in range(args.scenes):
            spec = world.SceneSpec(identity_id=identity_id, scene_id=scene, placement=place)
            data = world.render_scene(spec, grid, args.channels)
            path = os.path.join(args.out, f"identity_{identity_id:02d}_scene_{scene:02d}.lat")
            io.write_latent_grid(path, data, grid, meta={"identity_id": identity_id, "scene_id": scene})
            count += 1
    print(f"wrote {count} rendered scenes to {args.out}")
    return EXIT_OK


def cmd_replay(args, argv):
    manifest = io.read_manifest(_require_file(args.manifest, "manifest"))
    stored = manifest.get("argv")
    if not stored:
        raise ConfigError(f"{args.manifest}: manifest has no argv record")
    print(f"replaying: zigzaglab {' '.join(stored)}")
    return _dispatch(stored)


_HANDLERS = {
    "train": cmd_train,
    "cache": cmd_cache,
    "sample": cmd_sample,
    "story": cmd_story,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
    "dump-scenes": cmd_dump_scenes,
    "replay": cmd_replay,
}


def _dispatch(argv):
    parser = _build_parser()
    args = parser.parse_args(argv)
    return _HANDLERS[args.command](args, list(argv))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _dispatch(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except (ConfigError, CacheError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
