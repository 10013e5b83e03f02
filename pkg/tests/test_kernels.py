"""The compiled kernels must be drop-in bit-identical with the
pure-Python reference."""

import numpy as np
import pytest

from shmnet import _kernels
from shmnet._kernels import _fallback

native = pytest.importorskip("shmnet._kernels._native",
                             reason="compiled kernels not built")


def _dcdc_args(n, seed=0):
    rng = np.random.default_rng(seed)
    harvest = np.abs(rng.normal(5e-3, 2e-3, n))
    i_load = np.abs(rng.normal(2e-3, 0.8e-3, n))
    return (2, 2.0, 3.3, harvest, i_load, 2e-5, 0.72, 0.8, 22e-6, 11e-3,
            2.1, 1.9, 1.8, 1.6, 0.02, 2.5)


def _run(mod, args, n):
    rs = np.empty(n, dtype=np.int8)
    rv = np.empty(n)
    rw = np.empty(n)
    out = mod.dcdc_run(*args, rs, rv, rw)
    return out, rs, rv, rw


class TestBackendEquivalence:
    def test_selected_backend_reported(self):
        assert _kernels.BACKEND in ("native", "python")

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_dcdc_bit_identical(self, seed):
        n = 20000
        args = _dcdc_args(n, seed)
        out_n, s_n, v_n, w_n = _run(native, args, n)
        out_f, s_f, v_f, w_f = _run(_fallback, args, n)
        assert out_n == out_f
        assert np.array_equal(s_n, s_f)
        assert np.array_equal(v_n, v_f)
        assert np.array_equal(w_n, w_f)

    def test_dcdc_brownout_paths_match(self):
        n = 5000
        rng = np.random.default_rng(9)
        harvest = np.zeros(n)
        i_load = np.abs(rng.normal(20e-3, 5e-3, n))
        args = (2, 2.0, 2.6, harvest, i_load, 2e-5, 0.72, 0.8, 22e-6, 11e-3,
                2.1, 1.9, 1.8, 1.6, 0.02, 2.5)
        out_n, s_n, v_n, w_n = _run(native, args, n)
        out_f, s_f, v_f, w_f = _run(_fallback, args, n)
        assert out_n == out_f
        assert np.array_equal(v_n, v_f)
        assert out_n[5] > 0  # brownouts exercised

    @pytest.mark.parametrize("seed", [0, 3])
    def test_das_bit_identical(self, seed):
        rng = np.random.default_rng(seed)
        env = np.abs(rng.normal(size=(30, 2000)))
        tau = rng.uniform(-10.0, 2010.0, size=(30, 900))
        out_n = np.zeros(900)
        out_f = np.zeros(900)
        c_n = native.das_accumulate(env, tau, out_n)
        c_f = _fallback.das_accumulate(env, tau, out_f)
        assert c_n == c_f
        assert np.array_equal(out_n, out_f)

    def test_das_clipping_count(self):
        env = np.ones((1, 100))
        tau = np.array([[-1.0, 0.0, 50.5, 98.9, 99.0, 200.0]])
        out = np.zeros(6)
        clipped = native.das_accumulate(env, tau, out)
        assert clipped == 3  # -1, 99 (== n_t - 1), 200 are out of range
        assert out[1] == 1.0 and out[2] == 1.0
