import unittest

import numpy as np
from scipy import stats

from src.exceptions import DomainError, ParameterError
from src.kac_core import (CHUNK_SIZE, KacParams, Schedule, SeedSpec, sample_mean_reverting,
                          sample_mean_reverting_batch, sample_path, sample_path_conditioned, sample_state,
                          sample_state_with_counts, sample_states_at_times)


class TestKacParams(unittest.TestCase):

    def test_rejects_invalid_parameters(self):
        for kwargs in ({'a': 0.0, 'c': 1.0}, {'a': 1.0, 'c': -1.0}, {'a': np.inf, 'c': 1.0},
                       {'a': 1.0, 'c': 1.0, 'd': 0}):
            with self.subTest(kwargs=kwargs):
                with self.assertRaises(ParameterError):
                    KacParams(**kwargs)

    def test_damping_coefficient(self):
        self.assertEqual(KacParams(a=3.0, c=2.0).xi, 6.0)

    def test_with_dimension(self):
        params = KacParams(2.0, 1.0).with_dimension(3)
        self.assertEqual(params.d, 3)
        self.assertEqual(params.describe(), {'a': 2.0, 'c': 1.0, 'd': 3})


class TestSeedSpec(unittest.TestCase):

    def test_same_address_same_stream(self):
        a = SeedSpec(7, 1, (2, 3)).generator().uniform(size=5)
        b = SeedSpec(7, 1).spawn(2, 3).generator().uniform(size=5)
        np.testing.assert_array_equal(a, b)

    def test_distinct_addresses_differ(self):
        a = SeedSpec(7, 1).generator().uniform(size=5)
        b = SeedSpec(7, 2).generator().uniform(size=5)
        self.assertFalse(np.array_equal(a, b))

    def test_rejects_negative_seed(self):
        with self.assertRaises(ParameterError):
            SeedSpec(-1)


class TestSchedule(unittest.TestCase):

    def test_linear_and_quadratic(self):
        linear, quadratic = Schedule.linear(), Schedule.quadratic()
        self.assertEqual(linear.f(0.25), 0.75)
        self.assertEqual(linear.g(0.25), 0.25)
        self.assertEqual(quadratic.g(0.5), 0.25)
        self.assertEqual(quadratic.dg(0.5), 1.0)
        self.assertIsInstance(linear.f(0.5), float)
        np.testing.assert_allclose(linear.df(np.array([0.1, 0.9])), [-1.0, -1.0])

    def test_tabulated_is_pinned_at_the_boundaries(self):
        sched = Schedule.tabulated([0.0, 0.5, 1.0], [1.0, 0.4, 0.0], [0.0, 0.3, 1.0])
        self.assertEqual(sched.f(0.0), 1.0)
        self.assertEqual(sched.g(1.0), 1.0)
        self.assertAlmostEqual(sched.g(0.5), 0.3)
        self.assertEqual(sched.describe()['kind'], 'tabulated')

    def test_invalid_schedules(self):
        with self.assertRaises(ParameterError):
            Schedule.tabulated([0.0, 1.0], [0.9, 0.0], [0.0, 1.0])
        with self.assertRaises(ParameterError):
            Schedule.tabulated([0.0, 0.5, 1.0], [1.0, 0.5, 0.0], [0.0, 0.8, 1.0 - 1e-3])
        with self.assertRaises(ParameterError):
            Schedule.from_name('cubic')
        with self.assertRaises(ParameterError):
            Schedule.from_name('tabulated')


class TestPaths(unittest.TestCase):

    def setUp(self):
        self.params = KacParams(a=2.0, c=1.0, d=2)

    def test_path_stays_in_cone_and_is_lipschitz(self):
        path = sample_path(self.params, 3.0, SeedSpec(1))
        times = np.linspace(0.0, 3.0, 301)
        x = path.positions(times)
        self.assertTrue(np.all(np.abs(x) <= self.params.c * times[:, None] + 1e-12))
        self.assertTrue(np.all(np.abs(np.diff(x, axis=0)) <= self.params.c * 0.01 + 1e-12))
        self.assertTrue(set(np.unique(path.directions(0))) <= {-1, 1})

    def test_path_outside_horizon(self):
        path = sample_path(self.params, 1.0, SeedSpec(1))
        with self.assertRaises(DomainError):
            path.position(1.5)

    def test_conditioned_on_zero_jumps_moves_ballistically(self):
        path = sample_path_conditioned(KacParams(1.0, 2.0), 0.5, SeedSpec(3), n_jumps=0)
        self.assertEqual(path.jump_count, 0)
        self.assertAlmostEqual(abs(path.position(0.5)[0]), 1.0)


class TestStateSampling(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.params = KacParams(a=2.0, c=1.0)
        cls.n = 200_000
        cls.states, cls.counts = sample_state_with_counts(cls.params, 1.0, cls.n, SeedSpec(11))

    def test_zero_time_is_the_origin(self):
        np.testing.assert_array_equal(sample_state(self.params, 0.0, 4, SeedSpec(0)), np.zeros((4, 1)))

    def test_states_in_cone(self):
        self.assertLessEqual(np.max(np.abs(self.states)), self.params.c * 1.0)

    def test_jump_count_moments(self):
        self.assertAlmostEqual(self.counts.mean(), 2.0, delta=0.02)
        self.assertAlmostEqual(self.counts.var(), 2.0, delta=0.05)

    def test_atom_mass(self):
        on_edge = np.mean(np.abs(self.states[:, 0]) == 1.0)
        self.assertAlmostEqual(on_edge, np.exp(-2.0), delta=0.005)

    def test_second_moment(self):
        a, c = self.params.a, self.params.c
        expected = (c ** 2 / a) * (1.0 - (1.0 - np.exp(-2.0 * a)) / (2.0 * a))
        self.assertAlmostEqual(np.mean(self.states ** 2), expected, delta=0.01)

    def test_reproducible_and_independent_of_jobs(self):
        n = CHUNK_SIZE + 100
        one = sample_state(self.params, 0.7, n, SeedSpec(5), jobs=1)
        two = sample_state(self.params, 0.7, n, SeedSpec(5), jobs=2)
        np.testing.assert_array_equal(one, two)

    def test_multidimensional_shape(self):
        x = sample_state(KacParams(2.0, 1.0, d=3), 0.5, 100, SeedSpec(2))
        self.assertEqual(x.shape, (100, 3))
        self.assertLessEqual(np.max(np.abs(x)), 0.5)

    def test_reversal_gaps_are_exponential(self):
        a = 5.0
        path = sample_path(KacParams(a, 1.0), 4000.0, SeedSpec(21))
        gaps = np.diff(np.concatenate(([0.0], path.jump_times[0])))
        self.assertGreater(gaps.size, 18_000)
        self.assertGreater(stats.kstest(gaps, 'expon', args=(0.0, 1.0 / a)).pvalue, 1e-3)

    def test_coordinates_are_uncorrelated(self):
        x = sample_state(KacParams(2.0, 1.0, d=3), 1.0, 10_000, SeedSpec(22))
        corr = np.corrcoef(x, rowvar=False)
        self.assertLessEqual(np.max(np.abs(corr[np.triu_indices(3, k=1)])), 0.04)

    def test_invalid_requests(self):
        with self.assertRaises(DomainError):
            sample_state(self.params, -1.0, 10, SeedSpec(0))
        with self.assertRaises(DomainError):
            sample_state(self.params, 1.0, 0, SeedSpec(0))

    def test_states_at_times_are_coupled(self):
        times = np.array([0.0, 0.25, 0.5, 1.0])
        states, counts = sample_states_at_times(self.params, times, 1000, SeedSpec(4), return_counts=True)
        self.assertEqual(states.shape, (4, 1000, 1))
        self.assertEqual(counts.shape, (1000, 1))
        np.testing.assert_array_equal(states[0], 0.0)
        steps = np.abs(np.diff(states, axis=0))
        self.assertTrue(np.all(steps <= self.params.c * np.diff(times)[:, None, None] + 1e-12))


class TestMeanReverting(unittest.TestCase):

    def setUp(self):
        self.params = KacParams(a=2.0, c=1.0)
        self.sched = Schedule.linear()

    def test_endpoints(self):
        x = sample_mean_reverting(self.params, self.sched, [0.7], 0.0, SeedSpec(1))
        np.testing.assert_array_equal(x, [0.7])

    def test_support(self):
        x0 = np.full((500, 1), 0.7)
        x = sample_mean_reverting_batch(self.params, self.sched, x0, 0.4, SeedSpec(2))
        self.assertTrue(np.all(np.abs(x - 0.6 * 0.7) <= 0.4 + 1e-12))

    def test_per_row_times(self):
        t = np.linspace(0.0, 1.0, 50)
        x = sample_mean_reverting_batch(self.params, self.sched, np.ones((50, 1)), t, SeedSpec(3))
        self.assertTrue(np.all(np.abs(x[:, 0] - (1.0 - t)) <= t + 1e-12))

    def test_terminal_law_forgets_the_start(self):
        n = 5_000
        left = sample_mean_reverting_batch(self.params, self.sched, np.full((n, 1), -1.0), 1.0, SeedSpec(23))
        right = sample_mean_reverting_batch(self.params, self.sched, np.full((n, 1), 1.0), 1.0, SeedSpec(24))
        self.assertGreater(stats.ks_2samp(left[:, 0], right[:, 0]).pvalue, 1e-3)
        self.assertLessEqual(np.max(np.abs(left)), self.params.c)

    def test_time_outside_unit_interval(self):
        with self.assertRaises(DomainError):
            sample_mean_reverting(self.params, self.sched, [0.0], 1.5, SeedSpec(1))


if __name__ == '__main__':
    unittest.main()
