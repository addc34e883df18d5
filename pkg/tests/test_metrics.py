import unittest

import numpy as np

from src.datasets import Dataset
from src.exceptions import DomainError, ParameterError
from src.integrate import Trajectory
from src.kac_core import KacParams, Schedule, SeedSpec
from src.metrics import (SampleCloud, check_w2_lipschitz_in_time, cone_audit, effective_speed, estimate_lipschitz,
                         lemma_pushforward_check, rms_with_stderr, w2, w2_1d, w2_assignment, w2_sliced)
from src.velocity import AffineField


class TestW2(unittest.TestCase):

    def setUp(self):
        self.rng = SeedSpec(3).generator()

    def test_translation_in_one_dimension(self):
        a = self.rng.normal(size=(500, 1))
        report = w2_1d(a, a + 0.25)
        self.assertAlmostEqual(report.value, 0.25, places=12)
        self.assertAlmostEqual(report.stderr, 0.0, places=12)
        self.assertEqual(report.method, 'exact-1d')

    def test_sort_equals_assignment(self):
        for k in range(20):
            rng = SeedSpec(7, k).generator()
            n = int(rng.integers(2, 9))
            a, b = rng.normal(size=(n, 1)), rng.normal(size=(n, 1))
            self.assertAlmostEqual(w2_1d(a, b).value, w2_assignment(a, b).value, places=12)

    def test_unequal_sizes_are_subsampled(self):
        report = w2_1d(np.zeros((100, 1)), np.ones((60, 1)), SeedSpec(1))
        self.assertEqual(report.n, 60)
        self.assertAlmostEqual(report.value, 1.0)

    def test_sliced_translation(self):
        a = self.rng.normal(size=(400, 2))
        shift = np.array([0.3, -0.4])
        report = w2(a, a + shift, SeedSpec(2))
        self.assertEqual(report.method, 'sliced')
        self.assertEqual(report.n_projections, 256)
        self.assertLessEqual(report.value, 0.5 + 1e-12)
        self.assertAlmostEqual(report.value, 0.5 / np.sqrt(2.0), delta=0.05)
        np.testing.assert_allclose(w2_sliced(a, a + shift, 64, SeedSpec(2), jobs=2).value,
                                   w2_sliced(a, a + shift, 64, SeedSpec(2), jobs=1).value)

    def test_invalid_inputs(self):
        with self.assertRaises(ParameterError):
            w2_1d(np.zeros((5, 1)), np.zeros((5, 2)))
        with self.assertRaises(ParameterError):
            w2_assignment(np.zeros((9, 1)), np.zeros((9, 1)))
        with self.assertRaises(DomainError):
            SampleCloud(np.array([[np.inf]]))
        with self.assertRaises(ParameterError):
            SampleCloud(np.zeros((3, 1)), provenance='guess')

    def test_rms_with_stderr(self):
        value, stderr = rms_with_stderr(np.full(10, 4.0))
        self.assertEqual(value, 2.0)
        self.assertEqual(stderr, 0.0)


class TestTimeLipschitz(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.params = KacParams(a=2.0, c=1.0)
        cls.sched = Schedule.linear()
        cls.origin = Dataset(np.zeros((1, 1)))

    def test_base_flow_passes(self):
        report = check_w2_lipschitz_in_time(self.params, self.sched, self.origin, [0.0, 0.25, 0.5, 1.0], 20_000,
                                            SeedSpec(1))
        self.assertTrue(report.gating)
        self.assertTrue(report.passed, report.as_dict())
        self.assertEqual(len(report.pairs), 10)

    def test_shrunken_bound_is_detected(self):
        report = check_w2_lipschitz_in_time(self.params, self.sched, self.origin, [0.0, 0.5, 1.0], 20_000,
                                            SeedSpec(1), bound_scale=0.25)
        self.assertFalse(report.passed)

    def test_non_origin_data_is_diagnostic(self):
        data = Dataset(np.array([[-1.0], [1.0]]))
        report = check_w2_lipschitz_in_time(self.params, self.sched, data, [0.0, 1.0], 2_000, SeedSpec(1))
        self.assertFalse(report.gating)

    def test_effective_speed(self):
        data = Dataset(np.array([[-2.0], [1.0]]))
        self.assertAlmostEqual(effective_speed(self.params, self.sched, data, 0.0, 1.0), 3.0)


class TestConeAudit(unittest.TestCase):

    def test_counts_violations(self):
        params, sched = KacParams(2.0, 1.0), Schedule.linear()
        data = Dataset(np.zeros((1, 1)))
        states = np.array([[[0.5], [2.0]], [[0.1], [0.0]]])
        traj = Trajectory(nodes=np.array([1.0, 0.5]), states=states, nfe=1, evaluations=1, clamp_events=0)
        audit = cone_audit(traj, data, params, sched)
        self.assertEqual(audit.violations, 1)
        self.assertEqual(audit.checked, 4)
        self.assertAlmostEqual(audit.max_excess, 1.0)


class TestLipschitzEstimate(unittest.TestCase):

    def test_affine_field(self):
        tube = np.linspace(-1.0, 1.0, 20)[:, None]
        estimate = estimate_lipschitz(AffineField(3.0), tube, 0.5, seed=SeedSpec(1))
        self.assertAlmostEqual(estimate.value, 3.0, places=6)
        self.assertTrue(estimate.finite)

    def test_invalid_step(self):
        with self.assertRaises(ParameterError):
            estimate_lipschitz(AffineField(1.0), np.zeros((2, 1)), 0.5, h=0.0)


class TestPushforwardLemma(unittest.TestCase):

    def test_brute_force_instances(self):
        report = lemma_pushforward_check(n_instances=40, max_atoms=6, seed=SeedSpec(5))
        self.assertTrue(report.passed, report.as_dict())
        self.assertLessEqual(report.worst_contraction_ratio, 1.0 + 1e-12)
        self.assertLessEqual(report.worst_coupling_ratio, 1.0 + 1e-12)


if __name__ == '__main__':
    unittest.main()
