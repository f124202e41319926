import unittest

import numpy as np
import pandas as pd
from model_core import (
    Cluster,
    ClusteredDataset,
    duplication_maps,
    effective_counts,
    evi,
    MemParams,
    Observation,
    pooled_hill,
    PreconditionError,
    unvech,
    vech,
)


def make_cluster(cluster_id: str, y: list, p_b: int = 0) -> Cluster:
    n = len(y)
    return Cluster(cluster_id, np.array(y, dtype=float), np.ones((n, 1)), np.zeros((n, p_b)))


class TestEvi(unittest.TestCase):

    def test_zero_coefficients_give_unit_evi(self) -> None:
        params = MemParams.from_sigma([0.0], [0.0], [[1.0]])
        self.assertEqual(evi(params, np.array([0.0]), np.array([1.0]), np.array([0.0])), 1.0)

    def test_intercept_only(self) -> None:
        params = MemParams.from_sigma([-0.5], [], [[1.0]])
        self.assertAlmostEqual(evi(params, np.array([0.0]), np.array([1.0]), np.array([])), np.exp(-0.5), places=14)

    def test_rainfall_like_coefficients(self) -> None:
        params = MemParams.from_sigma([-1.5337], [0.1569, 0.0664], [[0.1]])
        value = evi(params, np.array([0.1]), np.array([1.0]), np.array([1.0, 1.0]))
        self.assertAlmostEqual(value, 0.2981, places=3)

    def test_dimension_mismatch(self) -> None:
        params = MemParams.from_sigma([0.0], [0.0], [[1.0]])
        with self.assertRaises(PreconditionError):
            evi(params, np.array([0.0, 0.0]), np.array([1.0]), np.array([0.0]))
        with self.assertRaises(PreconditionError):
            evi(params, np.array([0.0]), np.array([1.0]), np.array([0.0, 1.0]))

    def test_shift_between_random_effect_and_fixed_effect(self) -> None:
        rng = np.random.default_rng(3)
        beta_a, beta_b = rng.normal(size=2), rng.normal(size=1)
        u, delta = rng.normal(size=2), rng.normal(size=2)
        x_a, x_b = np.array([1.0, rng.normal()]), rng.normal(size=1)
        first = evi(MemParams.from_sigma(beta_a, beta_b, np.eye(2)), u + delta, x_a, x_b)
        second = evi(MemParams.from_sigma(beta_a + delta, beta_b, np.eye(2)), u, x_a, x_b)
        self.assertAlmostEqual(first / second, 1.0, places=12)


class TestHalfVectorization(unittest.TestCase):

    def test_vech_is_column_major_lower_triangle(self) -> None:
        a = np.array([[1.0, 2.0, 4.0], [2.0, 3.0, 5.0], [4.0, 5.0, 6.0]])
        np.testing.assert_array_equal(vech(a), [1.0, 2.0, 4.0, 3.0, 5.0, 6.0])
        np.testing.assert_array_equal(unvech(vech(a), 3), a)

    def test_vech_rejects_asymmetric(self) -> None:
        with self.assertRaises(PreconditionError):
            vech(np.array([[1.0, 2.0], [3.0, 4.0]]))

    def test_unvech_rejects_wrong_length(self) -> None:
        with self.assertRaises(PreconditionError):
            unvech(np.arange(4.0), 2)

    def test_duplication_matrix_of_dimension_two(self) -> None:
        maps = duplication_maps(2)
        np.testing.assert_array_equal(maps.m @ np.array([1.0, 2.0, 3.0]), [1.0, 2.0, 2.0, 3.0])
        np.testing.assert_array_equal(duplication_maps(1).m, [[1.0]])

    def test_duplication_maps_invert_each_other(self) -> None:
        rng = np.random.default_rng(11)
        b = rng.normal(size=(3, 3))
        a = b + b.T
        maps = duplication_maps(3)
        np.testing.assert_allclose(maps.m @ vech(a), a.flatten(order="F"), atol=1e-14)
        np.testing.assert_allclose(maps.m_star @ a.flatten(order="F"), vech(a), atol=1e-14)
        np.testing.assert_allclose(maps.m_star @ maps.m, np.eye(6), atol=1e-14)


class TestMemParams(unittest.TestCase):

    def test_sigma_round_trip(self) -> None:
        sigma = np.array([[2.0, 0.3], [0.3, 0.5]])
        params = MemParams.from_sigma([0.1, 0.2], [0.3], sigma)
        np.testing.assert_allclose(params.sigma, sigma, rtol=1e-12)
        again = MemParams.from_vector(params.to_vector(), 2, 1)
        np.testing.assert_allclose(again.sigma, sigma, rtol=1e-12)
        np.testing.assert_array_equal(again.beta_b, [0.3])

    def test_zero_sigma_is_representable(self) -> None:
        params = MemParams.from_sigma([0.1], [], [[0.0]])
        self.assertTrue(params.sigma_is_zero)
        self.assertEqual(params.sigma[0, 0], 0.0)
        self.assertTrue(np.isneginf(params.chol_log[0]))

    def test_singular_sigma(self) -> None:
        sigma = np.array([[1.0, 2.0], [2.0, 4.0]])
        params = MemParams.from_sigma([0.0, 0.0], [], sigma)
        np.testing.assert_allclose(params.sigma, sigma, atol=1e-12)
        self.assertFalse(params.sigma_is_zero)

    def test_rejects_indefinite_sigma(self) -> None:
        with self.assertRaises(PreconditionError):
            MemParams.from_sigma([0.0, 0.0], [], np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rejects_wrong_vector_length(self) -> None:
        with self.assertRaises(PreconditionError):
            MemParams.from_vector(np.zeros(3), 2, 0)


class TestClusteredDataset(unittest.TestCase):

    def test_empty_cluster(self) -> None:
        with self.assertRaises(PreconditionError):
            ClusteredDataset.from_observations([("a", [])])

    def test_dimension_mismatch(self) -> None:
        with self.assertRaises(PreconditionError):
            ClusteredDataset([make_cluster("a", [1.0, 2.0], p_b=1), make_cluster("b", [1.0, 2.0], p_b=2)])

    def test_duplicated_ids(self) -> None:
        with self.assertRaises(PreconditionError):
            ClusteredDataset([make_cluster("a", [1.0]), make_cluster("a", [2.0])])

    def test_nonpositive_response(self) -> None:
        with self.assertRaises(PreconditionError):
            Observation(0.0, np.array([1.0]), np.array([]))
        with self.assertRaises(PreconditionError):
            make_cluster("a", [1.0, -1.0])

    def test_from_observations(self) -> None:
        obs = [Observation(2.0, np.array([1.0]), np.array([0.5])), Observation(3.0, np.array([1.0]), np.array([1.5]))]
        data = ClusteredDataset.from_observations([("s1", obs)])
        self.assertEqual((data.p_a, data.p_b, data.n_total), (1, 1, 2))
        np.testing.assert_array_equal(data.cluster("s1").x_b[:, 0], [0.5, 1.5])

    def test_from_frame_keeps_first_appearance_order(self) -> None:
        df = pd.DataFrame(
            {"cluster": ["b", "a", "b", "a"], "y": [1.0, 2.0, 3.0, 4.0], "t": [0.1, 0.2, 0.3, 0.4]}
        )
        data = ClusteredDataset.from_frame(df, "cluster", "y", [], ["t"])
        self.assertEqual(data.cluster_ids, ["b", "a"])
        np.testing.assert_array_equal(data.cluster("b").y, [1.0, 3.0])
        np.testing.assert_array_equal(data.cluster("a").x_a, np.ones((2, 1)))

    def test_subset_and_split(self) -> None:
        data = ClusteredDataset([make_cluster("a", [1.0, 2.0, 3.0]), make_cluster("b", [4.0, 5.0, 6.0])])
        small = data.subset(1, 2)
        self.assertEqual(small.cluster_ids, ["a"])
        np.testing.assert_array_equal(small.cluster("a").y, [1.0, 2.0])
        first, second = data.split({"a": np.array([True, False, True]), "b": np.array([False, False, False])})
        self.assertEqual(first.cluster_ids, ["a"])
        self.assertEqual(second.n_total, 4)
        with self.assertRaises(PreconditionError):
            data.subset(3)


class TestEffectiveCounts(unittest.TestCase):

    def setUp(self) -> None:
        self.data = ClusteredDataset([make_cluster("a", [1.0, 2.0, 3.0, 4.0]), make_cluster("b", [5.0, 6.0])])

    def test_strict_exceedances(self) -> None:
        plan = effective_counts(self.data, {"a": 2.0, "b": 10.0})
        self.assertEqual(plan.n_j0, {"a": 2, "b": 0})
        self.assertEqual(plan.n_0, 1.0)

    def test_threshold_at_minimum(self) -> None:
        plan = effective_counts(self.data, {"a": 1.0, "b": 5.0})
        self.assertEqual(plan.n_j0, {"a": 3, "b": 1})

    def test_missing_or_invalid_threshold(self) -> None:
        with self.assertRaises(PreconditionError):
            effective_counts(self.data, {"a": 1.0})
        with self.assertRaises(PreconditionError):
            effective_counts(self.data, {"a": 1.0, "b": 0.0})

    def test_pooled_hill(self) -> None:
        data = ClusteredDataset([make_cluster("a", [np.e, 0.5]), make_cluster("b", [np.e**3])])
        plan = effective_counts(data, {"a": 1.0, "b": 1.0})
        self.assertAlmostEqual(pooled_hill(data, plan), 2.0, places=12)


if __name__ == "__main__":
    unittest.main()
