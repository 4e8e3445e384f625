from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridcast import kernels

BACKENDS = kernels.available_backends()


def rand_sym(rng, n, scale=1.0):
    a = rng.normal(scale=scale, size=(n, 3, 3))
    return 0.5 * (a + np.swapaxes(a, 1, 2))


def test_compiled_backend_is_built():
    # the package is installed with its extension; the fallback stays importable
    assert "python" in BACKENDS
    assert "cython" in BACKENDS
    assert kernels.BACKEND == "cython"


@pytest.mark.parametrize("name", BACKENDS)
def test_eigh_reconstructs(name):
    k = kernels.get_backend(name)
    A = rand_sym(np.random.default_rng(0), 200, 3.0)
    w, V = k.sym3_eigh(A)
    np.testing.assert_allclose(np.einsum("nik,nk,njk->nij", V, w, V), A, atol=1e-12)
    np.testing.assert_allclose(np.swapaxes(V, 1, 2) @ V, np.broadcast_to(np.eye(3), A.shape), atol=1e-12)
    np.testing.assert_allclose(np.sort(w, axis=1), np.linalg.eigvalsh(A), atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_eigh_degenerate_inputs(name):
    k = kernels.get_backend(name)
    A = np.stack([np.zeros((3, 3)), np.eye(3) * 2.0, np.diag([1.0, 1.0, 3.0])])
    w, V = k.sym3_eigh(A)
    np.testing.assert_allclose(np.einsum("nik,nk,njk->nij", V, w, V), A, atol=1e-14)


@pytest.mark.skipif("cython" not in BACKENDS, reason="extension not built")
@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_backends_agree(seed, scale):
    rng = np.random.default_rng(seed)
    A = rand_sym(rng, 16, scale)
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
    wp, Vp = py.sym3_eigh(A)
    wc, Vc = cy.sym3_eigh(A)
    fp, fc = np.exp(np.clip(wp / scale, -30, 30)), np.exp(np.clip(wc / scale, -30, 30))
    Mp, Mc = py.sym3_funm(Vp, fp), cy.sym3_funm(Vc, fc)
    np.testing.assert_allclose(Mc, Mp, rtol=1e-10, atol=1e-12 * np.abs(Mp).max())
    G = rng.normal(size=A.shape)
    Gp = py.sym3_funm_vjp(wp, Vp, fp, fp / scale, G)
    Gc = cy.sym3_funm_vjp(wc, Vc, fc, fc / scale, G)
    np.testing.assert_allclose(Gc, Gp, rtol=1e-8, atol=1e-10 * np.abs(Gp).max())


@pytest.mark.parametrize("name", BACKENDS)
def test_loewner_diagonal_and_limit(name):
    k = kernels.get_backend(name)
    w = np.array([[0.5, 0.5 + 1e-12, 2.0]])
    D = k.loewner(w, np.exp(w), np.exp(w))
    np.testing.assert_allclose(np.diag(D[0]), np.exp(w[0]))
    assert abs(D[0, 0, 1] - np.exp(0.5)) < 1e-9
    assert abs(D[0, 0, 2] - (np.exp(2.0) - np.exp(0.5)) / 1.5) < 1e-12


def test_env_var_forces_fallback():
    env = {**os.environ, "HYBRIDCAST_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "from hybridcast import kernels; print(kernels.BACKEND)"], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_model_results_identical_across_backends():
    code = (
        "import numpy as np\n"
        "from hybridcast import checks, flow\n"
        "m, b = checks.small_setup(0)\n"
        "z = np.random.default_rng(1).standard_normal((len(b), 10, 3))\n"
        "x = flow.simulate(m.store, m.flow_cfg, b.past, z).data\n"
        "print(repr(float(flow.invert(m.store, m.flow_cfg, b.past, x).log_density.data.sum())))\n"
    )
    vals = []
    for flag in ("0", "1"):
        env = {**os.environ, "HYBRIDCAST_PURE_PYTHON": flag}
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        vals.append(float(out.stdout))
    assert abs(vals[0] - vals[1]) < 1e-8 * max(1.0, abs(vals[0]))
