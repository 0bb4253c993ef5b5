"""Randomized self-checks of the algebraic invariants, runnable from the CLI.

Each check prints one line; the runner returns False if any check fails.
These overlap the test suite on purpose: they make the invariants checkable
on an installed package without pytest.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .denoiser import DenoiserRequest, guided_eps, predict_eps_transformer
from .errors import ConfigError
from .prompts import embed, fuse_prompts, null_prompt
from .schedule import LatentState, NoiseSchedule, build_schedule, denoise_step, inverse_step
from .cache import CacheEntry, _top_k_indices, inject_kv
from .weights import init_weights


def _report(ok: bool, name: str, detail: str, out) -> bool:
    print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}", file=out)
    return ok


def check_schedule_fault(out) -> bool:
    broken = NoiseSchedule(
        kind="linear_beta",
        alphas=np.array([1.0, 0.5, 0.7, 0.6]),
        params={},
    )
    try:
        from .schedule import _validate

        _validate(broken)
    except ConfigError as exc:
        return _report(True, "schedule-monotonicity", f"increasing alphas rejected ({exc})", out)
    return _report(False, "schedule-monotonicity", "increasing alpha table was accepted", out)


def check_round_trip(seed: int, cases: int, out) -> bool:
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(cases):
        a_t, a_prev = rng.uniform(0.01, 1.0, size=2)
        sched = NoiseSchedule(kind="constant_test", alphas=np.array([1.0, a_prev, a_t]), params={})
        x = LatentState(rng.standard_normal((1, 6, 3)), timestep=2)
        c = rng.standard_normal((1, 6, 3))
        back = inverse_step(denoise_step(x, c, sched), c, sched)
        denom = max(float(np.abs(x.data).max()), 1e-12)
        worst = max(worst, float(np.abs(back.data - x.data).max()) / denom)
    ok = worst < 1e-6
    return _report(ok, "round-trip-identity", f"max relative error {worst:.3e} over {cases} cases", out)


def _tiny_model(seed: int):
    sched = build_schedule("constant_test", 4, value=0.5)
    vocab_names = ("<null>", "cat", "park")
    weights = init_weights(vocab_names, sched, seed=seed, grid=(3, 3), channels=2, model_dim=8, ffn_dim=12, num_layers=2)
    return weights, weights.vocabulary()


def check_cfg_collapse(seed: int, cases: int, out) -> bool:
    weights, vocab = _tiny_model(seed)
    fp = fuse_prompts(["cat"], [["park"]])
    emb = embed(fp, 0, vocab)
    nul = null_prompt(vocab)
    rng = np.random.default_rng([seed, 2])

    class _D:
        def predict(self, req):
            return predict_eps_transformer(req, weights)

    d = _D()
    for _ in range(cases):
        latent = LatentState(rng.standard_normal((1, 9, 2)), timestep=2)
        rc = DenoiserRequest(latent=latent, timestep=2, prompt_embedding=emb)
        rn = DenoiserRequest(latent=latent, timestep=2, prompt_embedding=nul)
        if not np.array_equal(guided_eps(d, rc, rn, 0.0), d.predict(rn).eps):
            return _report(False, "cfg-collapse", "scale 0 differs from null prediction", out)
        if not np.array_equal(guided_eps(d, rc, rn, 1.0), d.predict(rc).eps):
            return _report(False, "cfg-collapse", "scale 1 differs from conditional prediction", out)
    return _report(True, "cfg-collapse", f"scales 0 and 1 bitwise-collapse over {cases} cases", out)


def check_top_k(seed: int, cases: int, out) -> bool:
    rng = np.random.default_rng([seed, 3])
    for _ in range(cases):
        n = int(rng.integers(1, 257))
        scores = rng.random(n)
        if rng.random() < 0.3:  # force ties
            scores = np.round(scores, 1)
        k_ratio = float(rng.choice([0.2, 0.4, 0.6, 0.8]))
        got = _top_k_indices(scores, k_ratio)
        k = max(1, int(np.floor(k_ratio * n)))
        oracle = sorted(sorted(range(n), key=lambda i: (-scores[i], i))[:k])
        if list(got) != oracle:
            return _report(False, "top-k-oracle", f"mismatch at n={n}, k_ratio={k_ratio}", out)
    return _report(True, "top-k-oracle", f"matches full-sort oracle over {cases} cases", out)


def check_attention_normalization(seed: int, cases: int, out) -> bool:
    weights, vocab = _tiny_model(seed)
    fp = fuse_prompts(["cat"], [["park"]])
    emb = embed(fp, 0, vocab)
    rng = np.random.default_rng([seed, 4])
    worst = 0.0
    for _ in range(cases):
        latent = LatentState(rng.standard_normal((1, 9, 2)), timestep=1)
        inj = None
        if rng.random() < 0.5:
            kc = int(rng.integers(1, 4))
            inj = {
                0: CacheEntry(
                    keys=rng.standard_normal((kc, 8)),
                    values=rng.standard_normal((kc, 8)),
                    source_indices=np.arange(kc),
                )
            }
        resp = predict_eps_transformer(
            DenoiserRequest(latent=latent, timestep=1, prompt_embedding=emb, injection=inj, record_attention=True),
            weights,
        )
        for rec in resp.attention_records:
            worst = max(worst, float(np.abs(rec.text_image_scores.sum(axis=1) - 1.0).max()))
    ok = worst < 1e-6
    return _report(ok, "attention-normalization", f"max row-sum deviation {worst:.3e}", out)


def check_injection(seed: int, cases: int, out) -> bool:
    rng = np.random.default_rng([seed, 5])
    worst = 0.0
    for _ in range(cases):
        n, kc, d = int(rng.integers(2, 9)), int(rng.integers(0, 5)), 6
        cur_k = rng.standard_normal((n, d))
        cur_v = rng.standard_normal((n, d))
        entry = CacheEntry(
            keys=rng.standard_normal((kc, d)), values=rng.standard_normal((kc, d)), source_indices=np.arange(kc)
        )
        ak, av = inject_kv(cur_k, cur_v, entry)
        q = rng.standard_normal((n, d))
        out_pkg, w_pkg = _kernels.ACTIVE.attention(q, ak, av, 1.0 / np.sqrt(d))
        stacked_k = np.vstack([entry.keys, cur_k])
        stacked_v = np.vstack([entry.values, cur_v])
        logits = q @ stacked_k.T / np.sqrt(d)
        ref_w = np.exp(logits - logits.max(axis=1, keepdims=True))
        ref_w /= ref_w.sum(axis=1, keepdims=True)
        worst = max(worst, float(np.abs(out_pkg - ref_w @ stacked_v).max()))
        if ak.shape[0] != kc + n or out_pkg.shape[0] != n:
            return _report(False, "kv-injection", "augmented shapes wrong", out)
    ok = worst < 1e-9
    return _report(ok, "kv-injection", f"max deviation from stacked-matrix attention {worst:.3e}", out)


def run_all(seed: int = 0, cases: int = 100, out=None) -> bool:
    import sys

    out = out or sys.stdout
    results = [
        check_schedule_fault(out),
        check_round_trip(seed, cases, out),
        check_cfg_collapse(seed, max(10, cases // 10), out),
        check_top_k(seed, cases, out),
        check_attention_normalization(seed, max(10, cases // 5), out),
        check_injection(seed, cases, out),
    ]
    return all(results)
