import unittest

import numpy as np

from src.exceptions import DomainError, IntegrationError, ParameterError
from src.integrate import (ROW_CHUNK, IntegratorSpec, draw_noise, flow_map, integrate_nodes, sample_reverse)
from src.kac_core import KacParams, Schedule, SeedSpec
from src.velocity import AffineField, ConditionalOracleField, ConstantField


class TestIntegratorSpec(unittest.TestCase):

    def test_nodes_and_accounting(self):
        spec = IntegratorSpec('euler', 4)
        np.testing.assert_allclose(spec.nodes, [1.0, 0.75, 0.5, 0.25, 0.0])
        self.assertEqual(spec.step_size, 0.25)
        self.assertEqual(IntegratorSpec('euler', 10).nfe, 10)
        self.assertEqual(IntegratorSpec('midpoint', 10).nfe, 20)
        self.assertEqual(IntegratorSpec('ab2', 10).nfe, 10)
        self.assertEqual(IntegratorSpec('ab2', 10).evaluations, 11)
        np.testing.assert_allclose(IntegratorSpec('midpoint', 2, 'forward').nodes, [0.0, 0.5, 1.0])

    def test_invalid_specs(self):
        for kwargs in ({'method': 'rk4'}, {'steps': 0}, {'steps': 2.5}, {'direction': 'sideways'}):
            with self.subTest(kwargs=kwargs):
                with self.assertRaises(ParameterError):
                    IntegratorSpec(**kwargs)


class TestSteppers(unittest.TestCase):

    def test_constant_field_is_exact(self):
        x1 = np.array([[-0.4], [0.1], [0.9]])
        for method in ('euler', 'midpoint', 'ab2'):
            with self.subTest(method=method):
                traj = sample_reverse(ConstantField(0.7), IntegratorSpec(method, 7), x1)
                np.testing.assert_allclose(traj.endpoint, x1 - 0.7, atol=1e-12)

    def test_orders_on_linear_field(self):
        x1 = np.array([[1.0]])
        steps = np.array([10, 20, 40, 80])
        for method, order in (('euler', 1.0), ('midpoint', 2.0), ('ab2', 2.0)):
            with self.subTest(method=method):
                errors = [abs(sample_reverse(AffineField(1.0), IntegratorSpec(method, int(m)), x1).endpoint[0, 0]
                              - np.exp(-1.0)) for m in steps]
                slope = np.polyfit(np.log(1.0 / steps), np.log(errors), 1)[0]
                self.assertAlmostEqual(slope, order, delta=0.3)

    def test_evaluation_count(self):
        for method in ('euler', 'midpoint', 'ab2'):
            with self.subTest(method=method):
                spec = IntegratorSpec(method, 6)
                traj = sample_reverse(AffineField(0.5), spec, np.ones((2, 1)))
                self.assertEqual(traj.nfe, spec.nfe)
                self.assertEqual(traj.evaluations, spec.evaluations)
                self.assertEqual(traj.states.shape, (7, 2, 1))
                self.assertEqual(traj.metadata['method'], method)

    def test_blow_up_raises(self):
        with np.errstate(over='ignore'):
            with self.assertRaises(IntegrationError) as ctx:
                integrate_nodes(AffineField(1e300), [0.0, 0.5, 1.0], np.array([[1e10]]))
        self.assertEqual(ctx.exception.last_node, 0)

    def test_invalid_nodes(self):
        with self.assertRaises(ParameterError):
            integrate_nodes(ConstantField(1.0), [0.0, 0.5, 0.2], np.zeros((1, 1)))
        with self.assertRaises(DomainError):
            integrate_nodes(ConstantField(1.0), [0.0, 1.0], np.array([[np.nan]]))

    def test_threaded_blocks_match(self):
        x = np.linspace(-1.0, 1.0, ROW_CHUNK + 10)[:, None]
        one = integrate_nodes(AffineField(0.3), np.linspace(1.0, 0.0, 5), x, method='midpoint', jobs=1)
        two = integrate_nodes(AffineField(0.3), np.linspace(1.0, 0.0, 5), x, method='midpoint', jobs=2)
        np.testing.assert_array_equal(one.states, two.states)


class TestFlowMap(unittest.TestCase):

    def test_identity_and_domain(self):
        x = np.array([[0.2], [0.5]])
        np.testing.assert_array_equal(flow_map(AffineField(1.0), 0.4, 0.4, x), x)
        with self.assertRaises(DomainError):
            flow_map(AffineField(1.0), 0.4, 1.2, x)

    def test_reversibility(self):
        x = np.linspace(-1.0, 1.0, 5)[:, None]
        forward = flow_map(AffineField(-0.7), 0.2, 0.8, x)
        np.testing.assert_allclose(forward, x * np.exp(-0.7 * 0.6), rtol=1e-7)
        np.testing.assert_allclose(flow_map(AffineField(-0.7), 0.8, 0.2, forward), x, atol=1e-8)


class TestSampling(unittest.TestCase):

    def test_noise_lies_in_the_cone(self):
        params, sched = KacParams(2.0, 1.5), Schedule.linear()
        x1 = draw_noise(params, sched, 1000, SeedSpec(1))
        self.assertLessEqual(np.max(np.abs(x1)), 1.5)

    def test_one_point_oracle_recovers_the_point(self):
        params, sched = KacParams(2.0, 1.0), Schedule.linear()
        field = ConditionalOracleField(params, sched, [0.5])
        x1 = draw_noise(params, sched, 300, SeedSpec(2))
        traj = sample_reverse(field, IntegratorSpec('midpoint', 100), x1)
        error = np.abs(traj.endpoint[:, 0] - 0.5)
        self.assertGreaterEqual(np.mean(error <= 0.02), 0.9)
        self.assertLess(np.max(error), 0.1)

    def test_requires_reverse_direction(self):
        with self.assertRaises(ParameterError):
            sample_reverse(ConstantField(0.0), IntegratorSpec('euler', 2, 'forward'), np.zeros((1, 1)))

    def test_draws_its_own_noise_from_a_seed(self):
        params, sched = KacParams(2.0, 1.0), Schedule.linear()
        field = ConditionalOracleField(params, sched, [0.5])
        spec = IntegratorSpec('euler', 10)
        seeded = sample_reverse(field, spec, seed=SeedSpec(3), n=50)
        given = sample_reverse(field, spec, draw_noise(params, sched, 50, SeedSpec(3)))
        np.testing.assert_array_equal(seeded.states, given.states)
        self.assertEqual(seeded.nfe, 10)

    def test_noise_arguments_are_exclusive(self):
        field = ConditionalOracleField(KacParams(2.0, 1.0), Schedule.linear(), [0.5])
        spec = IntegratorSpec('euler', 4)
        with self.assertRaises(ParameterError):
            sample_reverse(field, spec)
        with self.assertRaises(ParameterError):
            sample_reverse(field, spec, seed=SeedSpec(0))
        with self.assertRaises(ParameterError):
            sample_reverse(field, spec, np.zeros((2, 1)), seed=SeedSpec(0), n=2)
        with self.assertRaises(ParameterError):
            sample_reverse(ConstantField(0.0), spec, seed=SeedSpec(0), n=2)


if __name__ == '__main__':
    unittest.main()
