import numpy as np
import pytest

from xmic import _kernels_py, kernels

BACKENDS = kernels.backends()


def test_fallback_always_available():
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
def test_attention_backends_agree(name, dtype, tol, rng):
    impl = BACKENDS[name]
    q, k, v, g = (rng.normal(size=(5, 3, 4)).astype(dtype) for _ in range(4))
    out, probs = impl.attention_forward(q, k, v, 0.5)
    ref_out, ref_probs = _kernels_py.attention_forward(q.astype(np.float64), k.astype(np.float64), v.astype(np.float64), 0.5)
    np.testing.assert_allclose(np.asarray(out), ref_out, atol=tol)
    np.testing.assert_allclose(np.asarray(probs).sum(-1), 1.0, atol=tol)
    grads = impl.attention_backward(q, k, v, np.asarray(probs), g, 0.5)
    ref = _kernels_py.attention_backward(*(a.astype(np.float64) for a in (q, k, v)), ref_probs, g.astype(np.float64), 0.5)
    for a, b in zip(grads, ref):
        assert np.asarray(a).dtype == dtype
        np.testing.assert_allclose(np.asarray(a), b, atol=10 * tol)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_layer_norm_backends_agree(name, rng):
    impl = BACKENDS[name]
    x = rng.normal(size=(6, 16))
    g = rng.normal(size=(6, 16))
    xhat, rstd = impl.layer_norm_forward(x, 1e-5)
    ref_xhat, ref_rstd = _kernels_py.layer_norm_forward(x, 1e-5)
    np.testing.assert_allclose(np.asarray(xhat), ref_xhat, atol=1e-12)
    np.testing.assert_allclose(np.asarray(rstd), ref_rstd, atol=1e-12)
    np.testing.assert_allclose(np.asarray(impl.layer_norm_backward(np.asarray(xhat), np.asarray(rstd), g)),
                               _kernels_py.layer_norm_backward(ref_xhat, ref_rstd, g), atol=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_adamw_backends_agree(name, rng):
    impl = BACKENDS[name]
    w0, g = rng.normal(size=7), rng.normal(size=7)
    ws, ms, vs = [w0.copy(), w0.copy()], [np.zeros(7), np.zeros(7)], [np.zeros(7), np.zeros(7)]
    for step in (1, 2, 3):
        impl.adamw_update(ws[0], g, ms[0], vs[0], 1e-2, 0.9, 0.999, 1e-8, 0.01, step)
        _kernels_py.adamw_update(ws[1], g, ms[1], vs[1], 1e-2, 0.9, 0.999, 1e-8, 0.01, step)
    np.testing.assert_allclose(ws[0], ws[1], atol=1e-14)
    np.testing.assert_allclose(ms[0], ms[1], atol=1e-14)


def test_routing_sends_only_small_attention_groups_to_the_compiled_loop():
    small, wide = np.zeros((3, 2, 4)), np.zeros((3, 16, 4))
    assert kernels._attention_impl(wide) is BACKENDS["python"]
    expected = BACKENDS.get("cython", BACKENDS["python"]) if kernels.BACKEND == "cython" else BACKENDS["python"]
    assert kernels._attention_impl(small) is expected
    assert kernels.adamw_update is BACKENDS["python"].adamw_update
