"""Backend parity: every available kernel must match a brute-force oracle."""

import numpy as np
import pytest

from zigzaglab import _kernels


def brute_force_attention(q, k, v, scale):
    """Loop-and-math.exp reference, independent of both backends."""
    import math

    n, m = q.shape[0], k.shape[0]
    out = np.zeros((n, v.shape[1]))
    weights = np.zeros((n, m))
    for i in range(n):
        logits = [scale * float(q[i] @ k[j]) for j in range(m)]
        mx = max(logits)
        exps = [math.exp(l - mx) for l in logits]
        z = sum(exps)
        for j in range(m):
            weights[i, j] = exps[j] / z
            out[i] += weights[i, j] * v[j]
    return out, weights


@pytest.fixture(params=_kernels.available_backends())
def backend(request):
    return _kernels.get_backend(request.param)


def test_against_brute_force(backend):
    rng = np.random.default_rng(0)
    for _ in range(25):
        n, m, d = rng.integers(1, 12, size=3)
        q = rng.standard_normal((n, d))
        k = rng.standard_normal((m, d))
        v = rng.standard_normal((m, d + 1))
        out, w = backend.attention(q, k, v, 1.0 / np.sqrt(d))
        ref_out, ref_w = brute_force_attention(q, k, v, 1.0 / np.sqrt(d))
        np.testing.assert_allclose(out, ref_out, atol=1e-12)
        np.testing.assert_allclose(w, ref_w, atol=1e-12)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_backends_agree_closely():
    if len(_kernels.available_backends()) < 2:
        pytest.skip("compiled backend not built")
    py = _kernels.get_backend("python")
    cc = _kernels.get_backend("compiled")
    rng = np.random.default_rng(1)
    q, k, v = rng.standard_normal((3, 64, 32))
    o1, w1 = py.attention(q, k, v, 0.25)
    o2, w2 = cc.attention(q, k, v, 0.25)
    np.testing.assert_allclose(o1, o2, atol=1e-13)
    np.testing.assert_allclose(w1, w2, atol=1e-13)


def test_extreme_logits_stable(backend):
    q = np.array([[100.0, 0.0]])
    k = np.array([[100.0, 0.0], [-100.0, 0.0]])
    v = np.array([[1.0], [2.0]])
    out, w = backend.attention(q, k, v, 1.0)
    assert np.isfinite(out).all() and np.isfinite(w).all()
    assert w[0, 0] == pytest.approx(1.0)


def test_backend_selection_round_trip():
    orig = _kernels.backend_name()
    try:
        assert _kernels.use_backend("python") is _kernels.pyref
        assert _kernels.backend_name() == "python"
    finally:
        _kernels.use_backend(orig)
