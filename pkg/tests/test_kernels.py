"""Parity between the compiled kernels and the pure-Python fallback.

Probabilities, sampled indices, and enumerations must agree exactly (the two
implementations execute the same per-profile arithmetic in the same order);
log-domain and utility values may differ by an ulp across libm versions.
"""

import itertools

import numpy as np
import pytest

from purple import _kernels
from purple._kernels import _pl_py

try:
    from purple._kernels import _plc
except ImportError:
    _plc = None

needs_compiled = pytest.mark.skipif(_plc is None, reason="compiled kernels not built")


def test_selected_implementation_reported():
    assert _kernels.IMPLEMENTATION in ("cython", "python")
    assert "python" in _kernels.available_implementations()


class TestPurePython:
    def test_perm_count(self):
        assert _pl_py.perm_count(20, 5) == 1_860_480
        assert _pl_py.perm_count(3, 3) == 6
        assert _pl_py.perm_count(5, 0) == 1

    def test_enumerate_matches_itertools(self):
        for n, k in [(1, 1), (4, 2), (5, 5), (6, 3)]:
            expected = np.array(list(itertools.permutations(range(n), k)), dtype=np.int32)
            got = _pl_py.enumerate_perms(n, k)
            assert np.array_equal(got, expected.reshape(-1, k))

    def test_profile_probs_sequential_formula(self):
        scores = np.array([0.2, 0.3, 0.5])
        profiles = np.array([[2, 0]], dtype=np.int32)
        got = _pl_py.profile_probs(scores, 1.0, profiles)
        assert got[0] == pytest.approx(0.2, abs=1e-15)

    def test_sampler_consumes_given_uniforms(self):
        scores = np.array([0.25, 0.75])
        # u < 0.25 picks index 0 first; u just above picks index 1
        draws = _pl_py.sample_profiles(scores, 1.0, 2, np.array([[0.1, 0.5], [0.3, 0.5]]))
        assert draws.tolist() == [[0, 1], [1, 0]]

    def test_utilities_match_scalar_reference(self, rng):
        from purple.reward import SyntheticWorld, synthetic_utility

        n, dims = 6, 3
        conflict = np.zeros((n, n), dtype=np.int8)
        conflict[0, 1] = conflict[1, 0] = 1
        world = SyntheticWorld(
            weights=rng.uniform(0, 1, dims),
            coverage=rng.uniform(0, 1, (n, dims)),
            conflict=conflict,
            gamma=0.6,
            lam=0.4,
        )
        profiles = _pl_py.enumerate_perms(n, 3)
        batch = _pl_py.synthetic_utilities(
            world.weights, world.coverage, world.conflict, world.gamma, world.lam, profiles
        )
        for row, util in zip(profiles[::17], batch[::17]):
            assert util == pytest.approx(synthetic_utility(world, tuple(row)), rel=1e-12)


@needs_compiled
class TestImplementationParity:
    def test_enumerate(self):
        for n, k in [(1, 1), (4, 2), (5, 5), (7, 3)]:
            assert np.array_equal(_plc.enumerate_perms(n, k), _pl_py.enumerate_perms(n, k))

    def test_probs_bitwise(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 8))
            k = int(rng.integers(1, n + 1))
            scores = rng.uniform(0.01, 1.0, size=n)
            s = float(np.sum(scores))
            profiles = _pl_py.enumerate_perms(n, k)
            assert np.array_equal(
                _plc.profile_probs(scores, s, profiles),
                _pl_py.profile_probs(scores, s, profiles),
            )

    def test_logprobs_close_to_ulp(self, rng):
        scores = rng.uniform(0.01, 1.0, size=6)
        s = float(np.sum(scores))
        profiles = _pl_py.enumerate_perms(6, 3)
        np.testing.assert_allclose(
            _plc.profile_logprobs(scores, s, profiles),
            _pl_py.profile_logprobs(scores, s, profiles),
            rtol=1e-14,
        )

    def test_sampling_bitwise(self, rng):
        for _ in range(5):
            n = int(rng.integers(2, 9))
            k = int(rng.integers(1, n + 1))
            scores = rng.uniform(0.01, 1.0, size=n)
            s = float(np.sum(scores))
            uniforms = rng.random((500, k))
            assert np.array_equal(
                _plc.sample_profiles(scores, s, k, uniforms),
                _pl_py.sample_profiles(scores, s, k, uniforms),
            )

    def test_utilities_close(self, rng):
        n, dims, k = 7, 4, 3
        conflict = np.zeros((n, n), dtype=np.int8)
        conflict[2, 5] = conflict[5, 2] = 1
        weights = rng.uniform(0, 1, dims)
        coverage = rng.uniform(0, 1, (n, dims))
        profiles = _pl_py.enumerate_perms(n, k)
        np.testing.assert_allclose(
            _plc.synthetic_utilities(weights, coverage, conflict, 0.5, 0.3, profiles),
            _pl_py.synthetic_utilities(weights, coverage, conflict, 0.5, 0.3, profiles),
            rtol=1e-12,
        )

    def test_read_only_inputs_accepted(self):
        scores = np.array([0.2, 0.8])
        scores.flags.writeable = False
        profiles = _pl_py.enumerate_perms(2, 1)
        assert _plc.profile_probs(scores, 1.0, profiles).shape == (2,)
