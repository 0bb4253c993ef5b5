import numpy as np
import pytest

from zigzaglab.cache import (
    CacheEntry,
    IdentityTokenCache,
    build_cache,
    inject_kv,
    load_cache,
    save_cache,
    subject_scores,
    top_k_select,
)
from zigzaglab.denoiser import AttentionRecord
from zigzaglab.errors import CacheError, ConfigError
from zigzaglab.prompts import identity_prompt
from zigzaglab.schedule import build_schedule
from zigzaglab.weights import init_weights


def make_record(scores, layer=0, timestep=1, dim=4):
    n = scores.shape[0]
    rng = np.random.default_rng(0)
    return AttentionRecord(
        layer_index=layer,
        timestep=timestep,
        text_image_scores=scores,
        self_keys=rng.standard_normal((n, dim)),
        self_values=rng.standard_normal((n, dim)),
    )


class TestSubjectScores:
    def test_uniform_attention_single_subject_token(self):
        scores = np.full((6, 4), 0.25)
        v = subject_scores(make_record(scores), {1})
        np.testing.assert_allclose(v.scores, 0.25)

    def test_full_subject_set_gives_ones(self):
        rng = np.random.default_rng(1)
        raw = rng.random((5, 3))
        raw /= raw.sum(axis=1, keepdims=True)
        v = subject_scores(make_record(raw), {0, 1, 2})
        np.testing.assert_allclose(v.scores, 1.0, atol=1e-12)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        raw = rng.random((7, 5))
        raw /= raw.sum(axis=1, keepdims=True)
        subject = {1, 3}
        v = subject_scores(make_record(raw), subject)
        for i in range(7):
            total = 0.0
            for j in subject:
                total += raw[i, j]
            assert v.scores[i] == pytest.approx(total, rel=1e-12)

    def test_empty_subject_set_rejected(self):
        with pytest.raises(ConfigError):
            subject_scores(make_record(np.full((2, 2), 0.5)), set())
        with pytest.raises(ConfigError):
            subject_scores(make_record(np.full((2, 2), 0.5)), {5})


class TestTopK:
    def wrap(self, values):
        from zigzaglab.cache import SubjectScoreVector

        return SubjectScoreVector(scores=np.asarray(values, dtype=float), layer=0, timestep=1)

    def test_small_case(self):
        assert list(top_k_select(self.wrap([0.1, 0.5, 0.3, 0.2]), 0.5)) == [1, 2]

    def test_tie_break_by_lower_index(self):
        assert list(top_k_select(self.wrap([1.0] * 10), 0.2)) == [0, 1]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(3)
        scores = rng.random(64)
        got = list(top_k_select(self.wrap(scores), 0.2))
        oracle = sorted(sorted(range(64), key=lambda i: (-scores[i], i))[:12])
        assert got == oracle

    def test_minimum_one_selected(self):
        assert list(top_k_select(self.wrap([0.3, 0.9]), 0.01)) == [1]

    def test_nested_selections(self):
        rng = np.random.default_rng(4)
        scores = self.wrap(rng.random(40))
        small = set(top_k_select(scores, 0.2))
        big = set(top_k_select(scores, 0.6))
        assert small <= big

    def test_selected_dominate_unselected(self):
        rng = np.random.default_rng(5)
        vals = np.round(rng.random(30), 1)  # ties likely
        chosen = set(top_k_select(self.wrap(vals), 0.4))
        rest = set(range(30)) - chosen
        assert min(vals[i] for i in chosen) >= max(vals[j] for j in rest)

    def test_invalid_ratio(self):
        with pytest.raises(ConfigError):
            top_k_select(self.wrap([1.0]), 0.0)
        with pytest.raises(ConfigError):
            top_k_select(self.wrap([1.0]), 1.5)


class TestInjectKv:
    def test_empty_entry_is_identity(self):
        entry = CacheEntry(keys=np.zeros((0, 4)), values=np.zeros((0, 4)), source_indices=np.zeros(0, dtype=np.intp))
        k = np.random.default_rng(6).standard_normal((3, 4))
        v = np.random.default_rng(7).standard_normal((3, 4))
        ak, av = inject_kv(k, v, entry)
        np.testing.assert_array_equal(ak, k)
        np.testing.assert_array_equal(av, v)

    def test_concatenation_order(self):
        entry = CacheEntry(keys=np.ones((2, 4)), values=2 * np.ones((2, 4)), source_indices=np.array([0, 1]))
        k = np.zeros((3, 4))
        v = np.zeros((3, 4))
        ak, av = inject_kv(k, v, entry)
        assert ak.shape == (5, 4)
        np.testing.assert_array_equal(ak[:2], 1.0)
        np.testing.assert_array_equal(ak[2:], 0.0)
        np.testing.assert_array_equal(av[:2], 2.0)

    def test_dimension_mismatch(self):
        entry = CacheEntry(keys=np.ones((2, 5)), values=np.ones((2, 5)), source_indices=np.array([0, 1]))
        with pytest.raises(CacheError):
            inject_kv(np.zeros((3, 4)), np.zeros((3, 4)), entry)

    def test_attention_on_augmented_matches_stacked_brute_force(self):
        rng = np.random.default_rng(8)
        from zigzaglab import _kernels

        for _ in range(20):
            n, kc, d = 5, 3, 6
            entry = CacheEntry(
                keys=rng.standard_normal((kc, d)),
                values=rng.standard_normal((kc, d)),
                source_indices=np.arange(kc),
            )
            cur_k, cur_v = rng.standard_normal((2, n, d))
            q = rng.standard_normal((n, d))
            ak, av = inject_kv(cur_k, cur_v, entry)
            out, _ = _kernels.ACTIVE.attention(q, ak, av, 1.0)
            stacked_k = np.vstack([entry.keys, cur_k])
            stacked_v = np.vstack([entry.values, cur_v])
            logits = q @ stacked_k.T
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(out, w @ stacked_v, atol=1e-9)
            assert out.shape[0] == n  # query count unchanged


@pytest.fixture(scope="module")
def built():
    sched = build_schedule("constant_test", 2, value=0.5)
    weights = init_weights(
        ("<null>", "cat", "park"), sched, seed=4, grid=(2, 2), channels=2, model_dim=8, ffn_dim=8, num_layers=1
    )
    cache = build_cache(identity_prompt(["cat"]), weights, sched, k_ratio=0.5, seed=3)
    return weights, sched, cache


class TestBuildCache:
    def test_entry_counting(self, built):
        _, _, cache = built
        # T=2, 1 layer, n=4, k=0.5 -> 2 entries of 2 rows each
        assert set(cache.entries) == {(0, 1), (0, 2)}
        for e in cache.entries.values():
            assert e.keys.shape == (2, 8)
            assert e.values.shape == (2, 8)

    def test_full_ratio_keeps_everything_ascending(self):
        sched = build_schedule("constant_test", 2, value=0.5)
        weights = init_weights(
            ("<null>", "cat", "park"), sched, seed=4, grid=(2, 2), channels=2, model_dim=8, ffn_dim=8, num_layers=1
        )
        cache = build_cache(identity_prompt(["cat"]), weights, sched, k_ratio=1.0, seed=3)
        for e in cache.entries.values():
            np.testing.assert_array_equal(e.source_indices, np.arange(4))

    def test_bitwise_deterministic(self, built):
        weights, sched, cache = built
        again = build_cache(identity_prompt(["cat"]), weights, sched, k_ratio=0.5, seed=3)
        assert cache.header_hash() == again.header_hash()
        for key in cache.entries:
            assert np.array_equal(cache.entries[key].keys, again.entries[key].keys)
            assert np.array_equal(cache.entries[key].values, again.entries[key].values)

    def test_nested_top_k_across_ratios(self):
        sched = build_schedule("constant_test", 3, value=0.5)
        weights = init_weights(
            ("<null>", "cat", "park"), sched, seed=9, grid=(3, 3), channels=2, model_dim=8, ffn_dim=8, num_layers=2
        )
        small = build_cache(identity_prompt(["cat"]), weights, sched, k_ratio=0.25, seed=1)
        big = build_cache(identity_prompt(["cat"]), weights, sched, k_ratio=0.5, seed=1)
        for key in small.entries:
            assert set(small.entries[key].source_indices) <= set(big.entries[key].source_indices)

    def test_scene_prompt_rejected(self, built):
        weights, sched, _ = built
        from zigzaglab.prompts import fuse_prompts

        with pytest.raises(ConfigError):
            build_cache(fuse_prompts(["cat"], [["park"]]), weights, sched, k_ratio=0.5)

    def test_schedule_mismatch_rejected(self, built):
        weights, _, _ = built
        other = build_schedule("constant_test", 5, value=0.5)
        with pytest.raises(ConfigError):
            build_cache(identity_prompt(["cat"]), weights, other, k_ratio=0.5)

    def test_empty_layer_mask_rejected(self, built):
        weights, sched, _ = built
        with pytest.raises(ConfigError):
            build_cache(identity_prompt(["cat"]), weights, sched, k_ratio=0.5, layer_mask=frozenset())

    def test_averaged_selection_shares_indices(self):
        sched = build_schedule("constant_test", 2, value=0.5)
        weights = init_weights(
            ("<null>", "cat", "park"), sched, seed=11, grid=(3, 3), channels=2, model_dim=8, ffn_dim=8, num_layers=3
        )
        cache = build_cache(
            identity_prompt(["cat"]), weights, sched, k_ratio=0.3, seed=2, selection="averaged"
        )
        for t in (1, 2):
            sets = {tuple(cache.entries[(l, t)].source_indices) for l in range(3)}
            assert len(sets) == 1

    def test_slice_at_missing_entry(self, built):
        _, _, cache = built
        with pytest.raises(CacheError):
            cache.slice_at(99)
        assert set(cache.slice_at(1)) == {0}


class TestCachePersistence:
    def test_round_trip_bitwise(self, built, tmp_path):
        _, _, cache = built
        path = tmp_path / "id.cache"
        save_cache(cache, path)
        loaded = load_cache(path)
        assert loaded.header() == cache.header()
        for key in cache.entries:
            assert np.array_equal(loaded.entries[key].keys, cache.entries[key].keys)
            assert np.array_equal(loaded.entries[key].values, cache.entries[key].values)
            assert np.array_equal(loaded.entries[key].source_indices, cache.entries[key].source_indices)

    def test_not_a_cache_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"hello world\n")
        with pytest.raises(ConfigError):
            load_cache(path)
