"""Compiled and numpy kernels must agree."""
import numpy as np
import pytest

from vcfes import _kernels_py, kernels

compiled = pytest.importorskip("vcfes._kernels")


def unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_space_distances_agree(dtype):
    rng = np.random.default_rng(0)
    q = unit(rng, 4, 8)
    g = unit(rng, 50, 4, 8).astype(dtype)
    g[3, 2] = 0.0
    q_dead = q.copy()
    q_dead[1] = 0.0
    for query in (q, q_dead):
        a = compiled.space_distances(query, g)
        b = _kernels_py.space_distances(query, g)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    assert compiled.space_distances(q, g)[3, 2] == 2.0
    assert np.all(compiled.space_distances(q_dead, g)[:, 1] == 2.0)


def test_fuse_agrees():
    rng = np.random.default_rng(1)
    d = rng.uniform(0, 2, (30, 4))
    w = rng.uniform(0, 1, (30, 3))
    np.testing.assert_array_equal(compiled.fuse(d, w), _kernels_py.fuse(d, w))


def test_pairwise_agrees():
    rng = np.random.default_rng(2)
    v = unit(rng, 12, 6)
    np.testing.assert_allclose(compiled.pairwise_distances(v),
                               _kernels_py.pairwise_distances(v), rtol=0, atol=1e-13)
    assert np.all(np.diag(compiled.pairwise_distances(v)) == 0)


def test_batch_hard_agrees():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = 8
        d = rng.uniform(0, 2, (n, n))
        d = (d + d.T) / 2
        np.fill_diagonal(d, 0)
        labels = np.repeat(np.arange(4), 2)
        valid = rng.integers(0, 2, n).astype(np.uint8)
        for v in (None, valid):
            a = compiled.batch_hard(d, labels, v)
            b = _kernels_py.batch_hard(d, labels, v)
            np.testing.assert_array_equal(a[0], b[0])
            np.testing.assert_array_equal(a[1], b[1])


def test_batch_hard_ties_take_lowest_index():
    d = np.ones((4, 4))
    np.fill_diagonal(d, 0)
    labels = np.array([0, 0, 1, 1])
    for impl in (compiled, _kernels_py):
        pos, neg = impl.batch_hard(d, labels)
        assert pos.tolist() == [1, 0, 3, 2]
        assert neg.tolist() == [2, 2, 0, 0]


def test_env_forces_fallback():
    import os
    import subprocess
    import sys
    env = dict(os.environ, VCFES_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from vcfes import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True).stdout.strip()
    assert out == "python"


def test_pipeline_identical_across_backends(tmp_path):
    # the benchmark report must not depend on which backend ran
    import os
    import subprocess
    import sys
    script = ("import sys; sys.path.insert(0, 'tests'); from conftest import run_benchmark_pipeline;"
              "run_benchmark_pipeline(sys.argv[1])")
    repo = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    for name, flag in (("py", "1"), ("cy", "")):
        env = dict(os.environ, VCFES_PURE_PYTHON=flag)
        subprocess.run([sys.executable, "-c", script, str(tmp_path / name)], cwd=repo, env=env,
                       check=True, capture_output=True)
    a = (tmp_path / "py" / "report.json").read_text()
    b = (tmp_path / "cy" / "report.json").read_text()
    assert a == b
