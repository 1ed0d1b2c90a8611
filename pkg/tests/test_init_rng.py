import numpy as np
import pytest

from frozen_slt.init_rng import (InitKind, Purpose, StreamKey, init_scores, init_weights, skc_magnitude,
                                 stream)
from frozen_slt.nn_core import conv, dense


def key(purpose=Purpose.WEIGHTS, layer=0, seed=7):
    return StreamKey(seed, layer, purpose)


class TestStream:
    def test_same_key_same_draws(self):
        a = stream(key()).raw(1000)
        b = stream(key()).raw(1000)
        np.testing.assert_array_equal(a, b)

    def test_purpose_changes_stream(self):
        assert not np.array_equal(stream(key(Purpose.WEIGHTS)).raw(100), stream(key(Purpose.SCORES)).raw(100))

    def test_layer_changes_stream(self):
        assert not np.array_equal(stream(key(layer=0)).raw(100), stream(key(layer=1)).raw(100))

    def test_counter_based_prefix(self):
        # the n-th word does not depend on how the earlier words were requested
        s = stream(key())
        parts = np.concatenate([s.raw(3), s.raw(10), s.raw(7)])
        np.testing.assert_array_equal(parts, stream(key()).raw(20))

    def test_uniform_mean(self):
        u = stream(key()).uniform(100_000)
        assert abs(u.mean() - 0.5) < 0.01
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_permutation_is_permutation(self):
        p = stream(key(Purpose.PRUNE_MASK)).permutation(1000)
        np.testing.assert_array_equal(np.sort(p), np.arange(1000))

    def test_seed_out_of_range(self):
        with pytest.raises(ValueError):
            StreamKey(-1, 0, Purpose.WEIGHTS).words()


class TestInitWeights:
    def test_skc_magnitude_dense(self):
        w = init_weights(dense(8, 5), InitKind("signed_kaiming_constant", 0.0), key())
        np.testing.assert_array_equal(np.abs(w), np.float32(0.5))
        assert 0 < (w > 0).sum() < w.size

    def test_skc_scaled_by_sparsity(self):
        w = init_weights(dense(8, 5), InitKind("signed_kaiming_constant", 0.75), key())
        np.testing.assert_array_equal(np.abs(w), np.float32(1.0))

    def test_skc_conv_fan_in(self):
        spec = conv(2, 3, 3)
        w = init_weights(spec, InitKind("signed_kaiming_constant", 0.5), key())
        assert w.shape == (3, 2, 3, 3)
        np.testing.assert_array_equal(np.abs(w), np.float32(skc_magnitude(18, 0.5)))

    def test_kaiming_uniform_moments(self):
        w = init_weights(dense(6, 100_000 // 6 + 1), InitKind("kaiming_uniform"), key())
        assert w.min() >= -1.0 and w.max() <= 1.0
        assert w.var() == pytest.approx(1 / 3, rel=0.05)

    def test_kaiming_normal_moments(self):
        w = init_weights(dense(2, 50_000), InitKind("kaiming_normal"), key())
        assert w.std() == pytest.approx(1.0, rel=0.05)

    def test_rejects_parameterless(self):
        from frozen_slt.nn_core import RELU
        with pytest.raises(ValueError):
            init_weights(RELU, InitKind(), key())

    def test_sparsity_bound(self):
        with pytest.raises(ValueError):
            InitKind("signed_kaiming_constant", 1.0)


class TestInitScores:
    def test_deterministic(self):
        a = init_scores(dense(4, 4), key(Purpose.SCORES))
        b = init_scores(dense(4, 4), key(Purpose.SCORES))
        np.testing.assert_array_equal(a, b)

    def test_std(self):
        s = init_scores(dense(2, 50_000), key(Purpose.SCORES))
        assert s.std() == pytest.approx(1.0, rel=0.05)

    def test_uncorrelated_with_weights(self):
        spec = dense(2, 50_000)
        s = init_scores(spec, key(Purpose.SCORES)).ravel()
        w = init_weights(spec, InitKind("kaiming_normal"), key(Purpose.WEIGHTS)).ravel()
        assert abs(np.corrcoef(s, w)[0, 1]) < 0.02


class TestFrozenVectors:
    """Bit patterns pinned for RNG scheme 1; a change here breaks every stored ticket."""

    KEY = StreamKey(42, 3, Purpose.WEIGHTS)

    def test_key_words(self):
        assert self.KEY.words().tolist() == [42, (3 << 8) | 1]

    def test_raw_words(self):
        assert [hex(int(w)) for w in stream(self.KEY).raw(4)] == [
            "0xfc47561b49d484cf", "0x4d5c417390cb8b31", "0xdafa87d7daf287ff", "0xdbe7aa4d6cdd917d"]

    def test_variates(self):
        assert stream(self.KEY).uniform(2).tolist() == [0.9854635063764636, 0.30218895980287475]
        assert stream(self.KEY).normal(2).tolist() == [-0.05511630803085809, 0.16201407306952384]
        w = init_weights(dense(8, 2), InitKind("kaiming_uniform"), self.KEY).ravel()[:4]
        assert w.tolist() == [0.8408474326133728, -0.34261876344680786, 0.615545392036438, 0.621812641620636]
        perm = stream(StreamKey(42, 3, Purpose.PRUNE_MASK)).permutation(8)
        assert perm.tolist() == [4, 7, 2, 5, 1, 3, 0, 6]
