import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_instance
from gcp import _backend, kernels
from gcp.counterfactual import parent_set
from gcp.data import annotations_to_arrays

pytestmark = pytest.mark.skipif(not _backend.HAVE_NUMBA, reason="numba not installed")


def both(fn):
    with _backend.use_backend("numba"):
        a = fn()
    with _backend.use_backend("numpy"):
        b = fn()
    return a, b


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_counterfactual_losses_agree(seed, activation):
    m, data = random_instance(seed, n=9, activation=activation)
    g = m.graph
    X, truth = annotations_to_arrays(g, data)
    nodes = list(g.non_root_ids)
    pa = [parent_set(g, v) for v in nodes]
    pai = [s | {v} for s, v in zip(pa, nodes)]
    (a1, a2), (b1, b2) = both(lambda: kernels.counterfactual_losses(m, X, truth, nodes, pa, pai))
    assert np.allclose(a1, b1, rtol=0, atol=1e-13) and np.allclose(a2, b2, rtol=0, atol=1e-13)


def test_kmedoids_and_farthest_first_agree(rng):
    for _ in range(10):
        n = int(rng.integers(5, 60))
        pts = rng.standard_normal((n, 3))
        D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        k = int(rng.integers(1, min(8, n) + 1))
        a, b = both(lambda: kernels.kmedoids(D, k, 20))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        a, b = both(lambda: kernels.farthest_first_matrix(D, None, k, 0))
        assert np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1], rtol=0, atol=1e-14, equal_nan=True)
        P = rng.dirichlet(np.ones(3), size=(n, 2)).reshape(n, 6)
        Q = rng.dirichlet(np.ones(3), size=(3, 2)).reshape(3, 6)
        for QQ in (Q, np.zeros((0, 6))):
            a, b = both(lambda: kernels.farthest_first_kl(P, QQ, [0, 3, 6], [0.4, 0.6], k))
            assert np.array_equal(a[0], b[0])
            fin = np.isfinite(a[1])
            assert np.array_equal(fin, np.isfinite(b[1])) and np.allclose(a[1][fin], b[1][fin], atol=1e-12)


def test_backend_switching():
    old = _backend.backend()
    with _backend.use_backend("numpy"):
        assert _backend.backend() == "numpy"
    assert _backend.backend() == old
    with pytest.raises(ValueError):
        _backend.set_backend("cuda")


@pytest.mark.parametrize("value,expected", [("1", "numpy"), ("0", "numba"), ("", "numba")])
def test_env_flag_selects_backend(value, expected):
    env = {**os.environ, "GCP_DISABLE_NUMBA": value}
    out = subprocess.run(
        [sys.executable, "-c", "from gcp._backend import backend; print(backend())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
