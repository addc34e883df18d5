import unittest

import numpy as np

from src.datasets import make_dataset
from src.distill import (DistillConfig, EndpointOracleStudent, FrozenTeacher, PiecewiseStudentField, StudentModel,
                         distill_multistage, distill_stage, segment_node, smoothed_trace, teacher_endpoint,
                         validate_stage_schedule, verify_stability_bound)
from src.exceptions import ConfigError, ParameterError
from src.integrate import IntegratorSpec, integrate_nodes
from src.kac_core import KacParams, Schedule, SeedSpec
from src.mlp import MLPModel
from src.velocity import AffineField, BiasedField, ConstantField, MarginalOracleField, MarginalSampler


class TestStageSchedule(unittest.TestCase):

    def test_valid_schedules(self):
        self.assertEqual(validate_stage_schedule([20, 4, 2, 1]), (20, 4, 2, 1))
        self.assertEqual(validate_stage_schedule([20, 1]), (20, 1))

    def test_invalid_schedules(self):
        for schedule in ([], [20, 3], [4, 4], [2, 4], [0]):
            with self.subTest(schedule=schedule):
                with self.assertRaises(ConfigError):
                    validate_stage_schedule(schedule)

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            DistillConfig(substeps=1)
        with self.assertRaises(ConfigError):
            DistillConfig(state_mode='replay')
        with self.assertRaises(ConfigError):
            DistillConfig(stage_schedule=(20, 3))
        self.assertEqual(DistillConfig(steps=4).delta_t, 0.25)


class TestSegments(unittest.TestCase):

    def test_segment_node(self):
        self.assertEqual(segment_node(0.3, 4), 0.5)
        self.assertEqual(segment_node(0.25, 4), 0.25)
        self.assertEqual(segment_node(0.0, 4), 0.25)
        self.assertEqual(segment_node(1.0, 4), 1.0)

    def test_piecewise_student_freezes_time(self):
        field = PiecewiseStudentField(AffineField(1.0), 4)
        x = np.array([[2.0]])
        np.testing.assert_array_equal(field.evaluate(0.3, x), field.evaluate(0.5, x))

    def test_teacher_endpoint_of_constant_field(self):
        x = np.array([[0.2], [0.7]])
        np.testing.assert_allclose(teacher_endpoint(ConstantField(0.5), 1.0, x, None, 4, 0.25), x - 0.125,
                                   atol=1e-14)
        with self.assertRaises(ParameterError):
            teacher_endpoint(ConstantField(0.5), 0.1, x, None, 4, 0.25)

    def test_endpoint_oracle_student_reproduces_the_teacher(self):
        teacher = AffineField(0.8)
        student = EndpointOracleStudent(teacher, steps=4, substeps=5)
        x1 = np.linspace(-1.0, 1.0, 7)[:, None]
        fast = integrate_nodes(student, IntegratorSpec('euler', 4).nodes, x1, method='euler').endpoint
        slow = integrate_nodes(teacher, np.linspace(1.0, 0.0, 21), x1, method='euler').endpoint
        np.testing.assert_allclose(fast, slow, atol=1e-12)


class TestDistillation(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.params, cls.sched = KacParams(2.0, 1.0), Schedule.linear()
        cls.data = make_dataset('two-mode-1d')
        cls.teacher = MarginalOracleField(cls.params, cls.sched, cls.data)
        cls.sampler = MarginalSampler(cls.params, cls.sched, cls.data, exact=True)
        cls.model = MLPModel(1, hidden=(16, 16), seed=SeedSpec(8))

    def config(self, **overrides):
        options = dict(steps=2, substeps=2, max_iter=20, batch_size=64, learning_rate=3e-3, optimizer='adamw')
        options.update(overrides)
        return DistillConfig(**options)

    def test_zero_iterations_keep_the_student(self):
        student = StudentModel(self.model, 2, self.params, self.sched)
        trained, trace = distill_stage(self.teacher, student, self.config(max_iter=0), self.sampler, SeedSpec(1))
        self.assertEqual(trace, [])
        self.assertEqual(trained.fingerprint(), student.fingerprint())

    def test_stage_leaves_teacher_and_student_untouched(self):
        student = StudentModel(self.model, 2, self.params, self.sched)
        before_teacher, before_student = self.teacher.fingerprint(), student.fingerprint()
        trained, trace = distill_stage(self.teacher, student, self.config(), self.sampler, SeedSpec(1))
        self.assertEqual(len(trace), 20)
        self.assertTrue(np.all(np.isfinite(trace)))
        self.assertEqual(self.teacher.fingerprint(), before_teacher)
        self.assertEqual(student.fingerprint(), before_student)
        self.assertNotEqual(trained.fingerprint(), before_student)

    def test_rollout_states(self):
        student = StudentModel(self.model, 2, self.params, self.sched)
        _, trace = distill_stage(self.teacher, student, self.config(max_iter=3, state_mode='rollout'), self.sampler,
                                 SeedSpec(2))
        self.assertEqual(len(trace), 3)

    def test_grid_mismatch(self):
        student = StudentModel(self.model, 2, self.params, self.sched)
        with self.assertRaises(ConfigError):
            distill_stage(FrozenTeacher(self.teacher, 5), student, self.config(), self.sampler, SeedSpec(1))
        with self.assertRaises(ConfigError):
            distill_stage(self.teacher, StudentModel(self.model, 3), self.config(), self.sampler, SeedSpec(1))

    def test_student_needs_a_parametric_teacher(self):
        with self.assertRaises(ConfigError):
            StudentModel.from_teacher(self.teacher, 2)

    def test_single_entry_schedule_is_a_passthrough(self):
        field, reports = distill_multistage(self.teacher, self.config(stage_schedule=(4,)), self.sampler, SeedSpec(1))
        self.assertIsInstance(field, FrozenTeacher)
        self.assertEqual(field.steps, 4)
        self.assertEqual(reports, [])

    def test_multistage(self):
        seen = []
        cfg = self.config(stage_schedule=(4, 2, 1), max_iter=5)
        student = StudentModel(self.model, 2, self.params, self.sched)
        field, reports = distill_multistage(self.teacher, cfg, self.sampler, SeedSpec(3), student,
                                            evaluate=lambda s: {'steps': s.steps},
                                            on_stage=lambda report, s: seen.append((report.stage, s.steps)))
        self.assertEqual([(r.from_steps, r.to_steps) for r in reports], [(4, 2), (2, 1)])
        self.assertEqual([r.teacher_method for r in reports], ['euler', 'euler'])
        self.assertEqual(seen, [(1, 2), (2, 1)])
        self.assertEqual(reports[1].metrics, {'steps': 1})
        self.assertEqual(field.steps, 1)

    def test_smoothed_trace(self):
        smoothed = smoothed_trace([4.0, 2.0, 0.0], window=2)
        np.testing.assert_allclose(smoothed, [4.0, 3.0, 1.0])


class TestStabilityBound(unittest.TestCase):

    def test_biased_affine_student(self):
        teacher = AffineField(0.5)
        student = BiasedField(teacher, 0.1)

        def sampler(t, n, seed):
            return seed.generator().normal(size=(n, 1))

        report = verify_stability_bound(teacher, student, sampler, np.linspace(1.0, 0.0, 6), SeedSpec(1), n=500,
                                        substeps=10)
        self.assertTrue(report.passed, report.as_dict())
        self.assertFalse(report.inconclusive)
        self.assertEqual(report.epsilon, 0.0)
        np.testing.assert_allclose(report.lipschitz, 0.5, rtol=1e-6)
        np.testing.assert_allclose(report.gap, 0.1, rtol=1e-9)

    def test_grid_must_decrease(self):
        with self.assertRaises(ParameterError):
            verify_stability_bound(AffineField(0.5), AffineField(0.5), None, [0.0, 1.0], SeedSpec(1))


if __name__ == '__main__':
    unittest.main()
