import numpy as np
import pytest
from scipy.stats import chi2

from rankforge.features import (PAD_ID, SceneId, bucketize, exponential_boundaries,
                                hash_token, signal_index)


class TestBucketize:
    def test_below_first_boundary(self):
        assert bucketize(0.5, [1.0, 2.0, 3.0]) == 0

    def test_tie_goes_right(self):
        assert bucketize(2.0, [1.0, 2.0, 3.0]) == 2

    def test_direct_count(self):
        assert bucketize(2.5, [1.0, 2.0, 3.0]) == 2

    def test_above_last(self):
        assert bucketize(99.0, [1.0, 2.0, 3.0]) == 3

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            bucketize(1.0, [2.0, 1.0])

    @pytest.mark.parametrize("seed", range(20))
    def test_counts_boundaries_leq_value(self, seed):
        rng = np.random.default_rng(seed)
        b = np.unique(rng.normal(size=8))
        v = float(rng.normal())
        assert bucketize(v, b) == int(np.sum(b <= v))

    def test_exponential_boundaries(self):
        b = exponential_boundaries(5)
        assert list(b) == [1.0, 2.0, 4.0, 8.0]


class TestHashToken:
    def test_deterministic(self):
        assert hash_token(b"abc", 2, 1024) == hash_token(b"abc", 2, 1024)

    def test_empty_string_valid(self):
        h = hash_token(b"", 0, 1024)
        assert 1 <= h < 1024

    def test_pad_id_never_produced(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            raw = bytes(rng.integers(0, 256, size=rng.integers(0, 12)).tolist())
            assert hash_token(raw, int(rng.integers(0, 5)), 113) != PAD_ID

    def test_slots_use_independent_salts(self):
        ids = {hash_token(b"same", k, 10 ** 6) for k in range(8)}
        assert len(ids) == 8

    def test_chi_square_uniformity(self):
        # 1e5 random strings into 1024 buckets (vocab 1025 -> ids 1..1024)
        rng = np.random.default_rng(42)
        buckets = 1024
        counts = np.zeros(buckets)
        for i in range(100_000):
            raw = b"tok-%d" % int(rng.integers(0, 2 ** 48))
            counts[hash_token(raw, 0, buckets + 1) - 1] += 1
        expected = 100_000 / buckets
        stat = float(((counts - expected) ** 2 / expected).sum())
        assert stat < chi2.ppf(0.99, df=buckets - 1)

    def test_tiny_vocab_rejected(self):
        with pytest.raises(ValueError):
            hash_token(b"x", 0, 1)


def test_signal_index_layout():
    assert signal_index("click", SceneId.POINT_OF_INTEREST) == 0
    assert signal_index("conversion", SceneId.POINT_OF_INTEREST) == 1
    assert signal_index("grouped_conversion", SceneId.POINT_OF_INTEREST) == 2
    assert signal_index("click", SceneId.POPULARITY_BASED) == 3
    assert signal_index("grouped_conversion", SceneId.POPULARITY_BASED) == 5
    with pytest.raises(ValueError):
        signal_index("dwell", SceneId.POINT_OF_INTEREST)
