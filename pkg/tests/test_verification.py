import os
import unittest
from dataclasses import replace

import numpy as np

from src.datasets import make_dataset
from src.exceptions import ConfigError
from src.kac_core import KacParams, Schedule, SeedSpec
from src.velocity import MarginalOracleField, MarginalSampler
from src.verification import (SCALES, CheckResult, SuiteReport, check_constant_field, check_energy_bound,
                              check_guided_energy_finite, check_integrator_orders, check_path_derivative,
                              check_trained_distillation_benefit, check_trained_student_rate, run_suite)

SLOW = os.getenv('KACFLOW_SLOW') == '1'


class TestCheckResult(unittest.TestCase):

    def test_failure_semantics(self):
        self.assertTrue(CheckResult('x', passed=False).failed)
        self.assertFalse(CheckResult('x', passed=False, gating=False).failed)
        self.assertFalse(CheckResult('x', passed=False, inconclusive=True).failed)

    def test_report_frame_and_checksum(self):
        report = SuiteReport('lemmas', 'quick', 0, [CheckResult('a', True, {'v': 1.5}), CheckResult('b', False)])
        self.assertFalse(report.passed)
        self.assertEqual(list(report.to_frame().columns), ['check', 'passed', 'gating', 'inconclusive'])
        self.assertEqual(len(report.checksum()), 64)


class TestSuites(unittest.TestCase):

    def test_unknown_suite_and_scale(self):
        with self.assertRaises(ConfigError):
            run_suite('everything')
        with self.assertRaises(ConfigError):
            run_suite('lemmas', scale='huge')

    def test_integrator_checks(self):
        checks = check_integrator_orders() + [check_constant_field()]
        self.assertTrue(all(check.passed for check in checks), [c.as_dict() for c in checks if not c.passed])

    def test_lemmas_are_reproducible(self):
        first = run_suite('lemmas', 'quick', master_seed=3)
        second = run_suite('lemmas', 'quick', master_seed=3)
        self.assertEqual(first.checksum(), second.checksum())
        names = {check.name: check for check in first.checks}
        self.assertTrue(names['lemmas.pushforward_coupling'].passed)
        self.assertTrue(names['lemmas.sort_equals_assignment'].passed)
        self.assertTrue(names['lemmas.triangle_inequality'].passed)

    def test_scales(self):
        self.assertLess(SCALES['quick'].mc_paths, SCALES['full'].mc_paths)
        self.assertEqual(SCALES['full'].mc_paths, 1_000_000)

    @unittest.skipUnless(SLOW, 'set KACFLOW_SLOW=1 to run the quick-scale suites')
    def test_all_suites_pass_at_quick_scale(self):
        report = run_suite('all', 'quick', master_seed=0, jobs=2)
        self.assertTrue(report.passed, [c.as_dict() for c in report.checks if c.failed])

    @unittest.skipUnless(SLOW, 'set KACFLOW_SLOW=1 to run the quick-scale suites')
    def test_density_suite(self):
        report = run_suite('density', 'quick')
        self.assertTrue(report.passed, [c.as_dict() for c in report.checks if c.failed])


class TestVelocityChecks(unittest.TestCase):

    def test_path_derivative_matches_conditional_velocity(self):
        check = check_path_derivative(KacParams(2.0, 1.0), Schedule.linear(), 0.5, 0.8, 200_000, SeedSpec(3))
        self.assertTrue(check.passed, check.details)
        self.assertGreaterEqual(check.details['bins_used'], 15)

    def test_path_derivative_at_high_rate(self):
        check = check_path_derivative(KacParams(25.0, 2.0), Schedule.linear(), -0.4, 0.6, 200_000, SeedSpec(4))
        self.assertTrue(check.passed, check.details)

    def test_base_flow_energy_bound(self):
        for d in (1, 2):
            with self.subTest(d=d):
                check = check_energy_bound(KacParams(2.0, 1.0, d), 2_000, SeedSpec(5, d))
                self.assertTrue(check.passed, check.details)
                self.assertAlmostEqual(check.details['bound'], np.sqrt(d))

    def test_guided_energy_is_finite_at_twenty_times(self):
        data = make_dataset('two-class-1d')
        params, sched = KacParams(2.0, 1.0), Schedule.linear()
        field_ = MarginalOracleField(params, sched, data)
        check = check_guided_energy_finite(field_, MarginalSampler(params, sched, data, exact=True), 3.0, 300,
                                           SeedSpec(6))
        self.assertTrue(check.passed)
        self.assertEqual(len(check.details['energy']), 20)


class TestTrainedStudentChecks(unittest.TestCase):

    def setUp(self):
        self.tiny = replace(SCALES['quick'], student_iter=5, stability_samples=200)

    def test_trained_benefit_reports_both_distances(self):
        check = check_trained_distillation_benefit(self.tiny, SeedSpec(7))
        self.assertFalse(check.gating)
        self.assertTrue(np.isfinite(check.details['student_w2']))
        self.assertTrue(np.isfinite(check.details['teacher_w2']))
        self.assertEqual(check.name, 'stability.trained_distillation_benefit[M=4]')

    def test_trained_rate_checks_gate_only_at_full_scale(self):
        params, sched = KacParams(2.0, 1.0), Schedule.linear()
        data = make_dataset('two-mode-1d')
        teacher = MarginalOracleField(params, sched, data)
        sampler = MarginalSampler(params, sched, data, exact=True)
        checks = check_trained_student_rate(teacher, sampler, self.tiny, SeedSpec(8))
        self.assertEqual([c.name for c in checks],
                         ['stability.trained_euler_student_rate', 'stability.trained_gap_integral_rate'])
        self.assertFalse(any(c.gating for c in checks))
        self.assertTrue(np.all(np.isfinite(checks[1].details['gap_integrals'])))

    @unittest.skipUnless(SLOW, 'set KACFLOW_SLOW=1 to run the quick-scale suites')
    def test_trained_student_learns_the_endpoints(self):
        check = check_trained_distillation_benefit(SCALES['quick'], SeedSpec(9))
        self.assertLess(check.details['final_loss'], check.details['initial_loss'])



if __name__ == '__main__':
    unittest.main()
