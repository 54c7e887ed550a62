import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcrec.bias import (PopularityEmbeddings, bias_angle, bias_cosines,
                        bias_report_rows, bias_score,
                        init_popularity_embeddings, load_extractor, margin,
                        nearest_key_rows, save_extractor)

from conftest import make_dataset


def two_key_embeddings(user_vec, item_vecs):
    return PopularityEmbeddings(
        user_keys=np.array([3]), user_vecs=np.array([user_vec], dtype=float),
        item_keys=np.array([1, 10]), item_vecs=np.array(item_vecs, dtype=float),
    )


class TestBiasScore:
    def test_identical_vectors(self):
        pe = two_key_embeddings([0.5, 0.5], [[0.5, 0.5], [1.0, 0.0]])
        assert bias_score(pe, 3, 1) == pytest.approx(1.0)
        assert bias_angle(pe, 3, 1) == pytest.approx(0.0, abs=1e-7)

    def test_orthogonal_vectors(self):
        pe = two_key_embeddings([1.0, 0.0], [[0.0, 1.0], [1.0, 0.0]])
        assert bias_score(pe, 3, 1) == pytest.approx(0.0, abs=1e-15)
        assert bias_angle(pe, 3, 1) == pytest.approx(math.pi / 2, abs=1e-12)

    def test_opposite_vectors(self):
        pe = two_key_embeddings([1.0, 0.0], [[-1.0, 0.0], [1.0, 0.0]])
        assert bias_angle(pe, 3, 1) == pytest.approx(math.pi, abs=1e-12)

    def test_matches_cosine_oracle(self, rng):
        pe = PopularityEmbeddings(
            user_keys=np.array([1, 5, 9]), user_vecs=rng.normal(size=(3, 6)),
            item_keys=np.array([2, 4]), item_vecs=rng.normal(size=(2, 6)),
        )
        for pu, krow in ((1, 0), (5, 1), (9, 2)):
            for pi, irow in ((2, 0), (4, 1)):
                uv, iv = pe.user_vecs[krow], pe.item_vecs[irow]
                expect = float(uv @ iv) / (np.linalg.norm(uv) * np.linalg.norm(iv))
                assert bias_score(pe, pu, pi) == pytest.approx(expect, abs=1e-12)
                assert bias_angle(pe, pu, pi) == pytest.approx(
                    math.acos(np.clip(expect, -1, 1)), abs=1e-12)

    def test_zero_norm_rejected(self):
        pe = two_key_embeddings([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError, match="zero-norm"):
            bias_score(pe, 3, 1)

    def test_vectorized_matches_scalar(self, rng):
        pe = PopularityEmbeddings(
            user_keys=np.array([1, 4]), user_vecs=rng.normal(size=(2, 5)),
            item_keys=np.array([2, 8]), item_vecs=rng.normal(size=(2, 5)),
        )
        pu = np.array([1, 4, 4])
        pi = np.array([2, 2, 8])
        vec = bias_cosines(pe, pu, pi)
        for k in range(3):
            assert vec[k] == pytest.approx(bias_score(pe, int(pu[k]), int(pi[k])), abs=1e-15)


class TestNearestKeyLookup:
    def test_exact_and_nearest_and_ties(self):
        keys = np.array([2, 5, 10])
        assert nearest_key_rows(keys, np.array([5]))[0] == 1
        assert nearest_key_rows(keys, np.array([1]))[0] == 0     # below range
        assert nearest_key_rows(keys, np.array([100]))[0] == 2   # above range
        assert nearest_key_rows(keys, np.array([4]))[0] == 1     # closer to 5
        assert nearest_key_rows(keys, np.array([3]))[0] == 0     # closer to 2
        keys2 = np.array([2, 6])
        assert nearest_key_rows(keys2, np.array([4]))[0] == 0    # tie -> smaller key

    def test_training_counts_all_present(self, rng):
        ds = make_dataset([(0, 0), (0, 1), (1, 0), (2, 2), (2, 3), (2, 1)], 3, 4)
        pe = init_popularity_embeddings(ds, 4, rng)
        assert set(pe.user_keys.tolist()) == {1, 2, 3}
        assert set(pe.item_keys.tolist()) == {1, 2}


class TestMargin:
    def test_min_arm(self):
        assert margin(0.5, 1.0) == pytest.approx(0.5)

    def test_cap_arm(self):
        assert margin(3.0, 1.0) == pytest.approx(math.pi - 1.0)
        assert margin(3.0, 1.0) == pytest.approx(2.1415927, abs=1e-7)

    def test_zero_bias_angle(self):
        for theta in (0.0, 0.7, math.pi):
            assert margin(0.0, theta) == 0.0

    def test_strength_scales_first_arm(self):
        assert margin(0.5, 1.0, strength=2.0) == pytest.approx(1.0)
        assert margin(2.0, 1.0, strength=2.0) == pytest.approx(math.pi - 1.0)

    def test_vectorized(self):
        out = margin(np.array([0.5, 3.0]), np.array([1.0, 1.0]))
        np.testing.assert_allclose(out, [0.5, math.pi - 1.0])

    @settings(deadline=None, max_examples=100)
    @given(xi=st.floats(0.0, math.pi), theta=st.floats(0.0, math.pi),
           bump=st.floats(0.0, 0.5))
    def test_bounds_and_monotonicity(self, xi, theta, bump):
        m = margin(xi, theta)
        assert 0.0 <= m <= math.pi - theta + 1e-12
        # non-decreasing in xi (harder-to-predict interactions get larger margins)
        assert margin(min(xi + bump, math.pi), theta) >= m - 1e-12
        # non-increasing in theta
        assert margin(xi, min(theta + bump, math.pi)) <= m + 1e-12


class TestExtractorPersistence:
    def test_round_trip(self, tmp_path, rng):
        pe = PopularityEmbeddings(
            user_keys=np.array([1, 2]), user_vecs=rng.normal(size=(2, 3)),
            item_keys=np.array([4]), item_vecs=rng.normal(size=(1, 3)),
        )
        save_extractor(tmp_path / "ex.bin", pe, {"tau2": 0.1})
        loaded, meta = load_extractor(tmp_path / "ex.bin")
        assert meta == {"tau2": 0.1}
        assert np.array_equal(loaded.user_keys, pe.user_keys)
        assert np.array_equal(loaded.user_vecs, pe.user_vecs)
        assert np.array_equal(loaded.item_vecs, pe.item_vecs)


class TestBiasReport:
    def test_rows_cover_training_interactions(self, rng):
        ds = make_dataset([(0, 0), (0, 1), (1, 0)], 2, 2)
        pe = init_popularity_embeddings(ds, 3, rng)
        rows = list(bias_report_rows(pe, ds))
        assert len(rows) == 3
        pu, pi, cos_xi, m = rows[0]
        assert pu == ds.user_pop[0] and pi == ds.item_pop[0]
        assert -1.0 <= cos_xi <= 1.0
        assert m == pytest.approx(math.acos(cos_xi), abs=1e-12)
