"""Backend parity: the numba kernels must agree with the pure-numpy ones.

STTM_BACKEND only picks the default at import time; set_backend switches at
runtime, which is what these tests use so both paths run in a single process.
"""

import math
import os
import subprocess
import sys

import numpy as np
import pytest

from sttm import kernels

BACKENDS = kernels.available_backends()


@pytest.fixture()
def restore_backend():
    before = kernels.active_backend()
    yield
    kernels.set_backend(before)


def _inputs(gen, rows=37, cols=19):
    x = gen.standard_normal((rows, cols)).astype(np.float32)
    g = gen.standard_normal((rows, cols)).astype(np.float32)
    gamma = gen.standard_normal(cols).astype(np.float32)
    beta = gen.standard_normal(cols).astype(np.float32)
    return x, g, gamma, beta


def test_both_backends_registered():
    assert set(BACKENDS) == {"numba", "numpy"}


def test_set_backend_rejects_unknown(restore_backend):
    with pytest.raises(ValueError, match="unknown kernel backend"):
        kernels.set_backend("cuda")


def test_gelu_matches_reference(gen, restore_backend):
    x, g, _, _ = _inputs(gen)
    ref = 0.5 * x.astype(np.float64) * (1.0 + np.vectorize(math.erf)(x.astype(np.float64) / math.sqrt(2.0)))
    for name in BACKENDS:
        kernels.set_backend(name)
        np.testing.assert_allclose(kernels.gelu_fwd(x), ref, rtol=2e-5, atol=2e-6)


def test_backend_parity_elementwise(gen, restore_backend):
    x, g, gamma, beta = _inputs(gen)
    results = {}
    for name in BACKENDS:
        kernels.set_backend(name)
        y, xhat, rstd = kernels.layernorm_fwd(x, gamma, beta, 1e-5)
        dx, dgamma, dbeta = kernels.layernorm_bwd(xhat, gamma, rstd, g)
        sm = kernels.softmax_fwd(x)
        results[name] = {
            "gelu": kernels.gelu_fwd(x),
            "gelu_bwd": kernels.gelu_bwd(x, g),
            "ln": y,
            "ln_dx": dx,
            "ln_dgamma": dgamma,
            "ln_dbeta": dbeta,
            "sm": sm,
            "sm_bwd": kernels.softmax_bwd(sm, g),
        }
    a, b = results["numba"], results["numpy"]
    for key in a:
        np.testing.assert_allclose(a[key], b[key], rtol=2e-5, atol=2e-6, err_msg=key)


def test_softmax_rows_sum_to_one(gen, restore_backend):
    x, _, _, _ = _inputs(gen)
    for name in BACKENDS:
        kernels.set_backend(name)
        np.testing.assert_allclose(kernels.softmax_fwd(x).sum(axis=-1), 1.0, atol=1e-6)


def test_layernorm_output_is_normalized(gen, restore_backend):
    x, _, _, _ = _inputs(gen)
    ones = np.ones(x.shape[1], dtype=np.float32)
    zeros = np.zeros(x.shape[1], dtype=np.float32)
    for name in BACKENDS:
        kernels.set_backend(name)
        y, _, _ = kernels.layernorm_fwd(x, ones, zeros, 1e-5)
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)


def test_adamw_parity_and_reference(gen, restore_backend):
    # one step from zero moments has closed form: m_hat = g, v_hat = g^2
    shape = (64,)
    p0 = gen.standard_normal(shape).astype(np.float32)
    g = gen.standard_normal(shape).astype(np.float32)
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    expected = p0 - lr * (g / (np.abs(g) + eps) + wd * p0)
    states = {}
    for name in BACKENDS:
        kernels.set_backend(name)
        p = p0.copy()
        m = np.zeros(shape, dtype=np.float32)
        v = np.zeros(shape, dtype=np.float32)
        kernels.adamw_update(p, g, m, v, 1, lr, b1, b2, eps, wd)
        states[name] = (p, m, v)
        np.testing.assert_allclose(p, expected, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(m, (1 - b1) * g, rtol=1e-6)
        np.testing.assert_allclose(v, (1 - b2) * g * g, rtol=1e-6)
    for a, b in zip(states["numba"], states["numpy"]):
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-7)


def test_env_flag_selects_default_backend():
    code = "import sttm.kernels as k; print(k.active_backend())"
    out = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True,
        text=True,
        env={**os.environ, "STTM_BACKEND": "numpy"},
        check=True,
    )
    assert out.stdout.strip() == "numpy"
