import math

import numpy as np
import pytest

from alquery.records import make_object, make_record
from alquery.similarity import (
    SimilarityMatrix,
    ccms,
    ccms_directed,
    global_similarity,
    image_global_feature,
    kl_pair_affinity,
    kl_similarity,
    similarity_matrix,
)

from conftest import random_pool, random_record


def _rec(image_id, triples):
    """triples: (feature, class_id, score) with probs defaulting to uniform."""
    objs = [make_object(f, c, s, [0.5, 0.5]) for f, c, s in triples]
    return make_record(image_id, objs)


class TestCcmsScalar:
    def test_no_shared_classes(self):
        a = _rec("a", [([1.0, 0.0], 0, 1.0)])
        b = _rec("b", [([1.0, 0.0], 1, 1.0)])
        assert ccms_directed(a, b) == 0.0
        assert ccms(a, b) == 0.0

    def test_self_match_is_two(self, rng):
        rec = random_record(rng, "a", min_objects=1)
        assert ccms(rec, rec) == pytest.approx(2.0, abs=1e-12)

    def test_best_counterpart_wins(self):
        a = _rec("a", [([1.0, 0.0], 0, 1.0)])
        b = _rec("b", [([1.0, 0.0], 0, 0.5), ([0.0, 1.0], 0, 0.5)])
        # candidates give cos+1 of 2 and 1; the max wins
        assert ccms_directed(a, b) == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_pair(self):
        a = _rec("a", [([1.0, 0.0], 0, 1.0)])
        b = _rec("b", [([0.0, 1.0], 0, 1.0)])
        assert ccms(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_both_empty(self):
        a = make_record("a", [])
        b = make_record("b", [])
        assert ccms(a, b) == 0.0

    def test_empty_vs_nonempty(self, rng):
        a = make_record("a", [])
        b = random_record(rng, "b", min_objects=1)
        assert ccms(a, b) == 0.0

    def test_score_weighting(self):
        # object with score 0 contributes nothing to its own directed value
        a = _rec("a", [([1.0, 0.0], 0, 1.0), ([0.0, 1.0], 1, 0.0)])
        b = _rec("b", [([1.0, 0.0], 0, 1.0)])
        assert ccms_directed(a, b) == pytest.approx(2.0, abs=1e-12)

    def test_all_zero_scores(self):
        a = _rec("a", [([1.0, 0.0], 0, 0.0)])
        b = _rec("b", [([1.0, 0.0], 0, 1.0)])
        assert ccms_directed(a, b) == 0.0

    def test_symmetry_on_random_pairs(self, rng):
        for _ in range(30):
            a = random_record(rng, "a")
            b = random_record(rng, "b")
            assert ccms(a, b) == ccms(b, a)
            assert 0.0 <= ccms(a, b) <= 2.0 + 1e-12


class TestSimilarityMatrix:
    def test_singleton_pool(self, rng):
        rec = random_record(rng, "a", min_objects=1)
        mat = similarity_matrix([rec], "ccms")
        assert mat.values.shape == (1, 1)
        assert mat.values[0, 0] == 2.0
        assert mat.ids == ["a"]

    def test_identical_records_all_two(self, rng):
        rec = random_record(rng, "a", min_objects=2)
        pool = [make_record(f"r{i}", rec.objects) for i in range(4)]
        mat = similarity_matrix(pool, "ccms")
        assert np.allclose(mat.values, 2.0, atol=1e-12)

    def test_matrix_matches_scalar_ops(self, rng):
        pool = random_pool(rng, 8)
        mat = similarity_matrix(pool, "ccms")
        for i, a in enumerate(pool):
            for j, b in enumerate(pool):
                if i == j:
                    expected = 2.0 if a.objects else 0.0
                    assert mat.values[i, j] == expected
                else:
                    assert mat.values[i, j] == pytest.approx(ccms(a, b), abs=1e-12)

    def test_bit_exact_symmetry(self, rng):
        pool = random_pool(rng, 10)
        mat = similarity_matrix(pool, "ccms")
        assert np.array_equal(mat.values, mat.values.T)

    def test_permutation_invariance(self, rng):
        pool = random_pool(rng, 6, min_objects=2)
        shuffled = []
        for rec in pool:
            objects = list(rec.objects)
            rng.shuffle(objects)
            shuffled.append(make_record(rec.image_id, objects))
        a = similarity_matrix(pool, "ccms")
        b = similarity_matrix(shuffled, "ccms")
        assert np.allclose(a.values, b.values, atol=1e-12)

    def test_unrelated_class_perturbation_is_neutral(self, rng):
        a = _rec("a", [([1.0, 0.0, 0.0], 0, 1.0)])
        b = _rec("b", [([0.8, 0.6, 0.0], 0, 1.0), ([0.0, 1.0, 0.0], 2, 0.7)])
        base = ccms(a, b)
        # class 2 appears in neither image's counterpart set; move its feature
        b2 = _rec("b", [([0.8, 0.6, 0.0], 0, 1.0), ([0.3, 0.1, 0.9], 2, 0.7)])
        assert ccms(a, b2) == pytest.approx(base, abs=1e-15)

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            similarity_matrix([], "ccms")

    def test_unknown_kind_rejected(self, rng):
        with pytest.raises(ValueError, match="unknown similarity kind"):
            similarity_matrix(random_pool(rng, 2), "cosine")


class TestGlobalSimilarity:
    def test_identical(self):
        assert global_similarity([1.0, 0.0], [2.0, 0.0]) == pytest.approx(2.0)

    def test_orthogonal(self):
        assert global_similarity([1.0, 0.0], [0.0, 3.0]) == pytest.approx(1.0)

    def test_antiparallel(self):
        assert global_similarity([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(0.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            global_similarity([0.0, 0.0], [1.0, 0.0])

    def test_matrix_uses_mean_object_proxy(self, rng):
        pool = random_pool(rng, 5, min_objects=1)
        mat = similarity_matrix(pool, "global")
        feats = [image_global_feature(r) for r in pool]
        for i in range(5):
            for j in range(5):
                if i != j:
                    assert mat.values[i, j] == pytest.approx(
                        global_similarity(feats[i], feats[j]), abs=1e-12
                    )
        assert np.all(np.diag(mat.values) == 2.0)

    def test_global_requires_objects_or_feature(self, rng):
        pool = [make_record("empty", [])] + random_pool(rng, 2, min_objects=1)
        with pytest.raises(ValueError, match="no objects and no global feature"):
            similarity_matrix(pool, "global")

    def test_explicit_global_feature_wins(self, rng):
        rec = random_record(rng, "a", min_objects=1)
        override = make_record("a", rec.objects, global_feature=[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        assert np.allclose(image_global_feature(override), [0, 1, 0, 0, 0, 0, 0, 0])


class TestFpnSimilarity:
    def test_fpn_averages_levels(self, rng):
        def with_levels(image_id, levels):
            rec = random_record(rng, image_id, min_objects=1)
            return make_record(image_id, rec.objects, fpn_features=levels)

        a = with_levels("a", [[1.0, 0.0], [0.0, 1.0]])
        b = with_levels("b", [[1.0, 0.0], [1.0, 0.0]])
        mat = similarity_matrix([a, b], "fpn")
        # level 0: cos+1 = 2; level 1: cos+1 = 1 -> mean 1.5
        assert mat.values[0, 1] == pytest.approx(1.5, abs=1e-12)

    def test_fpn_missing_levels_rejected(self, rng):
        pool = random_pool(rng, 3, min_objects=1)
        with pytest.raises(ValueError, match="fpn_features"):
            similarity_matrix(pool, "fpn")


class TestKlSimilarity:
    def test_identical_probs_affinity_one(self):
        assert kl_pair_affinity([0.3, 0.7], [0.3, 0.7]) == pytest.approx(1.0, rel=1e-12)

    def test_no_shared_classes(self):
        a = make_record("a", [make_object([1.0, 0.0], 0, 1.0, [0.9, 0.1])])
        b = make_record("b", [make_object([1.0, 0.0], 1, 1.0, [0.9, 0.1])])
        assert kl_similarity(a, b) == 0.0

    def test_flipped_pair_value(self):
        # frozen: exp(-0.8*ln 9)
        assert kl_pair_affinity([0.9, 0.1], [0.1, 0.9]) == pytest.approx(
            0.17242728599059545, rel=1e-9
        )

    def test_affinity_in_unit_interval(self, rng):
        for _ in range(50):
            pa = rng.dirichlet(np.ones(4))
            pb = rng.dirichlet(np.ones(4))
            aff = kl_pair_affinity(pa, pb)
            assert 0.0 < aff <= 1.0

    def test_matrix_matches_scalar(self, rng):
        pool = random_pool(rng, 6)
        mat = similarity_matrix(pool, "kl")
        for i, a in enumerate(pool):
            for j, b in enumerate(pool):
                if i != j:
                    assert mat.values[i, j] == pytest.approx(kl_similarity(a, b), abs=1e-12)
        for i, rec in enumerate(pool):
            assert mat.values[i, i] == (1.0 if rec.objects else 0.0)

    def test_flooring_handles_zero_probs(self):
        a = make_record("a", [make_object([1.0, 0.0], 0, 1.0, [1.0, 0.0])])
        b = make_record("b", [make_object([1.0, 0.0], 0, 1.0, [0.0, 1.0])])
        value = kl_similarity(a, b)
        assert np.isfinite(value)
        assert 0.0 < value < 1e-6  # hugely dissimilar but finite


class TestMatrixDump:
    def test_roundtrip(self, rng, tmp_path):
        pool = random_pool(rng, 7)
        mat = similarity_matrix(pool, "ccms")
        path = tmp_path / "sim.bin"
        mat.save(path)
        back = SimilarityMatrix.load(path)
        assert back.ids == mat.ids
        assert back.values.shape == mat.values.shape
        assert np.allclose(back.values, mat.values, atol=1e-6)  # float32 storage

    def test_header_layout(self, rng, tmp_path):
        pool = random_pool(rng, 3)
        mat = similarity_matrix(pool, "ccms")
        path = tmp_path / "sim.bin"
        mat.save(path)
        blob = path.read_bytes()
        assert len(blob) == 8 + 4 * 9
        assert int.from_bytes(blob[:4], "little") == 3
        assert int.from_bytes(blob[4:8], "little") == 0

    def test_truncated_dump_rejected(self, tmp_path):
        path = tmp_path / "sim.bin"
        path.write_bytes(b"\x02\x00\x00\x00\x00\x00\x00\x00" + b"\x00" * 7)
        with pytest.raises(ValueError, match="expected"):
            SimilarityMatrix.load(path)
