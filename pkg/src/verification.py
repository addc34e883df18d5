"""Verification suites: every analytic identity, inequality and rate the library promises.

Each suite returns a ``SuiteReport`` of named ``CheckResult`` records. Suites run at
``quick`` scale (unit-test sized) or ``full`` scale (acceptance sized). Reports carry no
wall-clock data in their checksum, so reruns with the same master seed hash identically.
"""
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import integrate, stats

from config.logging_config import get_logger
from src.datasets import Dataset, make_dataset
from src.distill import (DistillConfig, EndpointOracleStudent, PiecewiseStudentField, StudentModel, distill_multistage,
                         distill_stage, segment_node, verify_stability_bound)
from src.exceptions import ConfigError
from src.integrate import IntegratorSpec, Trajectory, draw_noise, flow_map, integrate_nodes, sample_reverse
from src.kac_core import KacParams, Schedule, SeedSpec, sample_mean_reverting_batch, sample_state, \
    sample_states_at_times
from src.metrics import (SIGMA_SLACK, check_w2_lipschitz_in_time, cone_audit, estimate_lipschitz,
                         lemma_pushforward_check, rms_with_stderr, w2, w2_1d, w2_assignment)
from src.mlp import MLPModel
from src.telegraph_analytics import continuity_residual, state_law, telegraph_velocity
from src.velocity import (AffineField, ConditionalOracleField, ConstantField, GuidanceSpec, GuidedField,
                          MarginalOracleField, MarginalSampler, ParametricField, VelocityField, conditional_velocity,
                          guided_velocity, kinetic_energy)

logger = get_logger(__name__)

SUITES = ('density', 'velocity', 'guidance', 'integrators', 'stability', 'lemmas')
HISTOGRAM_BINS = 50
FAMILY_ALPHA = 0.0027


@dataclass(frozen=True)
class SuiteScale:
    name: str
    mc_paths: int
    continuity_grid: int
    speed_points: int
    w2_samples: int
    w2_times: int
    energy_samples: int
    oracle_samples: int
    stability_samples: int
    stability_grid: int
    lemma_instances: int
    distill_iter: int
    student_iter: int


SCALES = {
    'quick': SuiteScale('quick', mc_paths=100_000, continuity_grid=20, speed_points=2_000, w2_samples=10_000,
                        w2_times=4, energy_samples=2_000, oracle_samples=400, stability_samples=800,
                        stability_grid=9, lemma_instances=50, distill_iter=40,
                        student_iter=300),
    'full': SuiteScale('full', mc_paths=1_000_000, continuity_grid=100, speed_points=10_000, w2_samples=100_000,
                       w2_times=10, energy_samples=20_000, oracle_samples=2_000, stability_samples=4_000,
                       stability_grid=21, lemma_instances=200, distill_iter=400,
                       student_iter=3000),
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    gating: bool = True
    inconclusive: bool = False

    @property
    def failed(self) -> bool:
        return self.gating and not self.passed and not self.inconclusive

    def as_dict(self) -> dict:
        return {'name': self.name, 'passed': bool(self.passed), 'gating': self.gating,
                'inconclusive': self.inconclusive, 'details': _plain(self.details)}


@dataclass
class SuiteReport:
    suite: str
    scale: str
    master_seed: int
    checks: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not any(check.failed for check in self.checks)

    def as_dict(self) -> dict:
        return {'suite': self.suite, 'scale': self.scale, 'master_seed': self.master_seed, 'passed': self.passed,
                'checks': [check.as_dict() for check in self.checks]}

    def checksum(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{'check': c.name, 'passed': bool(c.passed), 'gating': c.gating,
                              'inconclusive': c.inconclusive} for c in self.checks],
                            columns=['check', 'passed', 'gating', 'inconclusive'])


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value)
    return value


def _reference_setup(name: str = 'two-mode-1d'):
    data = make_dataset(name)
    params = KacParams(a=2.0, c=1.0, d=data.dim)
    return params, Schedule.linear(), data


# density


def check_density_normalisation(params: KacParams, times=(0.1, 0.25, 0.5, 1.0, 2.0)) -> CheckResult:
    masses = [state_law(params, t).total_mass() for t in times]
    error = float(np.max(np.abs(np.array(masses) - 1.0)))
    return CheckResult(f'density.normalisation[a={params.a},c={params.c}]', error <= 1e-6,
                       {'times': list(times), 'max_error': error})


def check_density_histogram(params: KacParams, t: float, n: int, seed: SeedSpec, jobs: int = 1) -> CheckResult:
    """Monte Carlo histogram of the interior against bin integrals of the analytic density."""
    law = state_law(params, t)
    x = sample_state(params, t, n, seed, jobs)[:, 0]
    atoms = law.on_atom(x)
    edges = np.linspace(-law.edge, law.edge, HISTOGRAM_BINS + 1)
    counts, _ = np.histogram(x[~atoms], bins=edges)
    probs = np.array([integrate.quad(law.ac_density, lo, hi, epsabs=1e-13)[0] for lo, hi in zip(edges[:-1], edges[1:])])
    z = np.abs(counts - n * probs) / np.sqrt(n * probs * (1.0 - probs))
    threshold = float(stats.norm.isf(FAMILY_ALPHA / 2.0 / HISTOGRAM_BINS))
    atom_p = 2.0 * law.atom_weight
    atom_z = abs(atoms.sum() - n * atom_p) / np.sqrt(n * atom_p * (1.0 - atom_p))
    exact_atom = law.atom_weight == 0.5 * np.exp(-params.a * t)
    passed = bool(np.max(z) <= threshold and atom_z <= SIGMA_SLACK and exact_atom)
    return CheckResult('density.histogram', passed, {
        't': t, 'n': n, 'max_bin_z': float(np.max(z)), 'bin_threshold': threshold, 'atom_z': float(atom_z),
        'atom_weight': law.atom_weight, 'atom_weight_exact': bool(exact_atom)})


def check_continuity(params: KacParams, grid: int) -> CheckResult:
    report = continuity_residual(params, np.linspace(0.2, 1.5, grid), np.linspace(-0.95, 0.95, grid))
    return CheckResult('density.continuity', report['ratio'] <= 1e-3, dict(report, grid=grid))


def suite_density(scale: SuiteScale, seed: SeedSpec, jobs: int = 1) -> list:
    params = KacParams(2.0, 1.0)
    return [check_density_normalisation(params),
            check_density_normalisation(KacParams(25.0, 2.0), times=(0.05, 0.1, 0.2, 0.5, 1.0)),
            check_density_histogram(params, 0.5, scale.mc_paths, seed.spawn(0), jobs),
            check_continuity(params, scale.continuity_grid)]


# velocity


def check_speed_bound(params: KacParams, n: int, seed: SeedSpec) -> CheckResult:
    rng = seed.generator()
    s = rng.uniform(0.05, 2.0, size=n)
    z = rng.uniform(-1.0, 1.0, size=n) * params.c * s
    v = telegraph_velocity(params.a, params.c, s, z)
    edge_v = telegraph_velocity(params.a, params.c, s, np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0) * params.c * s)
    excess = float(np.max(np.abs(v)) - params.c)
    edge_error = float(np.max(np.abs(np.abs(edge_v) - params.c)))
    return CheckResult(f'velocity.speed_bound[a={params.a},c={params.c}]',
                       excess <= 1e-12 * params.c and edge_error <= 1e-9,
                       {'max_speed_excess': excess, 'edge_error': edge_error, 'n': n})


def check_forward_cone(params: KacParams, n: int, seed: SeedSpec, jobs: int = 1) -> CheckResult:
    times = np.linspace(0.0, 1.0, 21)
    states = sample_states_at_times(params, times, n, seed, jobs)
    paths = Trajectory(nodes=times, states=states, nfe=0, evaluations=0, clamp_events=0)
    audit = cone_audit(paths, Dataset(np.zeros((1, params.d))), params, Schedule.linear())
    return CheckResult(f'velocity.forward_cone[d={params.d}]', audit.violations == 0, audit.as_dict())


def check_path_derivative(params: KacParams, sched: Schedule, x0: float, t: float, n: int, seed: SeedSpec,
                          jobs: int = 1, bins: int = 20, delta: float = 1e-4) -> CheckResult:
    """Binned finite-difference slopes of simulated mean-reverting paths against ``conditional_velocity``.

    Paths are sampled jointly at g(t) and g(t + delta); atom rows are dropped and the
    residual mean in every bin with at least 30 paths is z-scored.
    """
    clocks = np.asarray(sched.g(np.array([t, t + delta])), dtype=float)
    states = sample_states_at_times(params.with_dimension(1), clocks, n, seed, jobs)[:, :, 0]
    here = float(sched.f(t)) * x0 + states[0]
    slope = (float(sched.f(t + delta)) * x0 + states[1] - here) / delta
    edge = params.c * clocks[0]
    inside = np.abs(states[0]) < edge * (1.0 - 1e-9)
    residual = slope[inside] - conditional_velocity(params, sched, t, here[inside], x0)
    index = np.clip(np.digitize(states[0][inside], np.linspace(-edge, edge, bins + 1)) - 1, 0, bins - 1)
    z = []
    for b in range(bins):
        values = residual[index == b]
        if values.size >= 30 and np.std(values) > 0:
            z.append(float(np.mean(values) / (np.std(values, ddof=1) / np.sqrt(values.size))))
    threshold = float(stats.norm.isf(FAMILY_ALPHA / 2.0 / max(len(z), 1)))
    worst = float(np.max(np.abs(z))) if z else 0.0
    return CheckResult(f'velocity.path_derivative[a={params.a},c={params.c}]', bool(z) and worst <= threshold,
                       {'t': t, 'x0': x0, 'delta': delta, 'bins_used': len(z), 'max_abs_z': worst,
                        'threshold': threshold}, inconclusive=not z)


def check_w2_time_lipschitz(params: KacParams, scale: SuiteScale, seed: SeedSpec, jobs: int = 1) -> list:
    times = np.linspace(0.1, 1.0, scale.w2_times)
    base = Dataset(np.zeros((1, params.d)))
    report = check_w2_lipschitz_in_time(params, Schedule.linear(), base, times, scale.w2_samples, seed, jobs=jobs)
    control = check_w2_lipschitz_in_time(params, Schedule.linear(), base, times, scale.w2_samples, seed,
                                         bound_scale=0.25, jobs=jobs)
    tag = f'a={params.a},c={params.c},d={params.d}'
    return [CheckResult(f'velocity.w2_time_lipschitz[{tag}]', report.passed, {'max_slack': report.max_slack}),
            CheckResult(f'velocity.w2_negative_control[{tag}]', not control.passed,
                        {'max_slack': control.max_slack})]


def check_energy_bound(params: KacParams, n: int, seed: SeedSpec, times=(0.25, 0.5, 0.75)) -> CheckResult:
    """Kinetic energy of the base flow (all data at the origin) stays below c sqrt(d)."""
    sched = Schedule.linear()
    origin = Dataset(np.zeros((1, params.d)))
    field_ = MarginalOracleField(params, sched, origin)
    sampler = MarginalSampler(params, sched, origin, exact=True)
    bound = params.c * np.sqrt(params.d)
    rows = []
    for k, t in enumerate(times):
        energy = kinetic_energy(field_, sampler, t, n, seed.spawn(k))
        rows.append({'t': t, 'energy': energy.value, 'stderr': energy.stderr,
                     'passed': energy.value <= bound + SIGMA_SLACK * energy.stderr + 1e-12})
    return CheckResult(f'velocity.energy_bound[d={params.d}]', all(r['passed'] for r in rows),
                       {'bound': bound, 'times': rows})


def suite_velocity(scale: SuiteScale, seed: SeedSpec, jobs: int = 1) -> list:
    checks = [check_speed_bound(KacParams(2.0, 1.0), scale.speed_points, seed.spawn(0)),
              check_speed_bound(KacParams(25.0, 2.0), scale.speed_points, seed.spawn(1))]
    for d in (1, 3):
        checks.append(check_forward_cone(KacParams(2.0, 1.0, d), scale.oracle_samples, seed.spawn(2, d), jobs))
    for k, (a, c) in enumerate(((2.0, 1.0), (25.0, 2.0))):
        for d in (1, 3):
            checks.extend(check_w2_time_lipschitz(KacParams(a, c, d), scale, seed.spawn(3, k, d), jobs))
        checks.append(check_path_derivative(KacParams(a, c), Schedule.linear(), 0.5, 0.8, scale.mc_paths,
                                            seed.spawn(5, k), jobs))
    for d in (1, 2):
        checks.append(check_energy_bound(KacParams(2.0, 1.0, d), scale.energy_samples, seed.spawn(6, d)))
    params, sched, data = _reference_setup()
    informative = check_w2_lipschitz_in_time(params, sched, data, np.linspace(0.1, 1.0, scale.w2_times),
                                             scale.oracle_samples, seed.spawn(4), jobs=jobs)
    checks.append(CheckResult('velocity.w2_time_lipschitz[mean-reverting]', informative.passed,
                              {'max_slack': informative.max_slack}, gating=False))
    return checks


# guidance


def _class_sampler(sampler: MarginalSampler, label: int):
    return lambda t, n, seed: sampler.sample(t, n, seed, label=label)[0]


def check_guided_energy_finite(field_: VelocityField, sampler: MarginalSampler, w: float, n: int,
                               seed: SeedSpec) -> CheckResult:
    guided = GuidedField(GuidanceSpec(w, field_, field_))
    times = np.linspace(0.05, 1.0, 20)
    values = [kinetic_energy(guided, _class_sampler(sampler, 1), float(t), n, seed.spawn(k), label=1).value
              for k, t in enumerate(times)]
    return CheckResult(f'guidance.energy_finite[w={w}]', bool(np.all(np.isfinite(values))),
                       {'times': times, 'energy': values})


def suite_guidance(scale: SuiteScale, seed: SeedSpec, jobs: int = 1) -> list:
    params, sched, data = _reference_setup('two-class-1d')
    field_ = MarginalOracleField(params, sched, data)
    sampler = MarginalSampler(params, sched, data, exact=True)
    x, y = sampler.sample(0.5, scale.energy_samples, seed.spawn(0))
    unconditional = field_.evaluate(0.5, x, None)
    conditional = field_.evaluate(0.5, x, y)
    checks = [
        CheckResult('guidance.w0_identity',
                    np.array_equal(guided_velocity(GuidanceSpec(0.0, field_, field_), 0.5, x, y), unconditional)),
        CheckResult('guidance.w1_identity',
                    np.array_equal(guided_velocity(GuidanceSpec(1.0, field_, field_), 0.5, x, y), conditional)),
    ]
    for w in (0.5, 1.2, 3.0):
        guided_field = GuidedField(GuidanceSpec(w, field_, field_))
        rows = []
        for k, t in enumerate((0.25, 0.5, 0.75)):
            for label in (0, 1):
                mu = _class_sampler(sampler, label)
                energy_seed = seed.spawn(1, k, label)
                guided = kinetic_energy(guided_field, mu, t, scale.energy_samples, energy_seed, label=label)
                unguided = kinetic_energy(field_, mu, t, scale.energy_samples, energy_seed)
                x = mu(t, scale.energy_samples, energy_seed)
                norm_gap, _ = rms_with_stderr(np.sum(guided_field.gap(t, x, label) ** 2, axis=1))
                bound = unguided.value + abs(w) * norm_gap + SIGMA_SLACK * guided.stderr
                rows.append({'t': t, 'label': label, 'guided': guided.value, 'bound': bound,
                             'passed': guided.value <= bound})
        checks.append(CheckResult(f'guidance.energy[w={w}]', all(r['passed'] for r in rows), {'times': rows}))
    checks.append(check_guided_energy_finite(field_, sampler, 3.0, scale.oracle_samples, seed.spawn(2)))
    return checks


# integrators


def check_integrator_orders(steps=(10, 20, 40, 80)) -> list:
    x1 = np.linspace(0.5, 1.5, 5)[:, None]
    exact = x1 * np.exp(-1.0)
    field_ = AffineField(1.0)
    checks = []
    for method, order in (('euler', 1.0), ('midpoint', 2.0), ('ab2', 2.0)):
        errors, nfe_ok = [], True
        for m in steps:
            spec = IntegratorSpec(method, m)
            traj = sample_reverse(field_, spec, x1)
            errors.append(float(np.max(np.abs(traj.endpoint - exact))))
            nfe_ok &= traj.nfe == spec.nfe and traj.evaluations == spec.evaluations
        slope = float(np.polyfit(np.log(1.0 / np.array(steps)), np.log(errors), 1)[0])
        checks.append(CheckResult(f'integrators.order[{method}]', abs(slope - order) <= 0.3,
                                  {'slope': slope, 'errors': errors}))
        checks.append(CheckResult(f'integrators.nfe[{method}]', bool(nfe_ok)))
    return checks


def check_constant_field() -> CheckResult:
    x1 = np.array([[-0.4], [0.1], [0.9]])
    errors = {method: float(np.max(np.abs(sample_reverse(ConstantField(0.7), IntegratorSpec(method, 7), x1).endpoint
                                          - (x1 - 0.7))))
              for method in ('euler', 'midpoint', 'ab2')}
    return CheckResult('integrators.constant_field', max(errors.values()) <= 1e-12, errors)


def check_one_point_oracle(scale: SuiteScale, seed: SeedSpec, jobs: int = 1) -> list:
    params, sched = KacParams(2.0, 1.0), Schedule.linear()
    x0 = 0.3
    field_ = ConditionalOracleField(params, sched, [x0])
    x1 = draw_noise(params, sched, scale.oracle_samples, seed, jobs)
    errors, clamp_rate = [], 0.0
    for m in (10, 20, 40, 80, 100):
        traj = sample_reverse(field_, IntegratorSpec('midpoint', m), x1, jobs=jobs)
        errors.append(np.abs(traj.endpoint[:, 0] - x0))
        if m == 100:
            clamp_rate = traj.clamp_rate
    means = [float(np.mean(e)) for e in errors[:4]]
    hit_rate = float(np.mean(errors[-1] <= 1e-2 * params.c))
    return [CheckResult('integrators.one_point_oracle', hit_rate >= 0.95, {'hit_rate': hit_rate}),
            CheckResult('integrators.monotone_in_steps', all(b < a for a, b in zip(means, means[1:])),
                        {'mean_errors': means}),
            CheckResult('integrators.clamp_rate', clamp_rate < 0.01, {'clamp_rate': clamp_rate})]


def suite_integrators(scale: SuiteScale, seed: SeedSpec, jobs: int = 1) -> list:
    return check_integrator_orders() + [check_constant_field()] + check_one_point_oracle(scale, seed.spawn(0), jobs)


# stability and distillation


def _stability_grid(scale: SuiteScale) -> np.ndarray:
    return np.linspace(1.0, 0.05, scale.stability_grid)


def _stability_check(name, teacher, student, sampler, scale, seed) -> CheckResult:
    report = verify_stability_bound(teacher, student, sampler, _stability_grid(scale), seed, n=scale.stability_samples)
    return CheckResult(name, report.passed, report.as_dict(), inconclusive=report.inconclusive)


def _student_from_scratch(params, steps: int, seed: SeedSpec) -> StudentModel:
    return StudentModel(MLPModel(params.d, hidden=(32, 32), seed=seed), steps)


def _distill_config(scale: SuiteScale, steps: int, substeps: int, **overrides) -> DistillConfig:
    options = dict(substeps=substeps, steps=steps, max_iter=scale.distill_iter, batch_size=128, learning_rate=3e-3,
                   optimizer='adamw', weight_decay=0.0)
    options.update(overrides)
    return DistillConfig(**options)


def _gap_integral(teacher, student, reference: Trajectory, steps: int) -> float:
    """Trapezoid integral over time of the rms gap teacher(t, x) - student(t_k, x) along the reference path."""
    fine = reference.nodes[::2]
    gaps = [rms_with_stderr(np.sum((teacher.evaluate(t, x) - student.evaluate(segment_node(t, steps), x)) ** 2,
                                   axis=1))[0] for t, x in zip(fine, reference.states[::2])]
    return float(integrate.trapezoid(gaps, 1.0 - fine))


def _rate_checks(prefix: str, errors: list, gap_integrals: list, gating: bool = True) -> list:
    factors = [errors[0] / errors[1], errors[1] / errors[2]]
    slope = float(np.polyfit(np.log([1 / 10, 1 / 20, 1 / 40]), np.log(gap_integrals), 1)[0])
    return [CheckResult(f'{prefix}euler_student_rate', all(1.5 <= f <= 2.8 for f in factors),
                        {'w2_to_teacher': errors, 'factors': factors}, gating=gating),
            CheckResult(f'{prefix}gap_integral_rate', abs(slope - 1.0) <= 0.3,
                        {'gap_integrals': gap_integrals, 'slope': slope}, gating=gating)]


def check_euler_student_rate(teacher, params, sched, scale: SuiteScale, seed: SeedSpec) -> list:
    x1 = draw_noise(params, sched, scale.stability_samples, seed)
    reference = sample_reverse(teacher, IntegratorSpec('midpoint', 400), x1)
    errors, gap_integrals = [], []
    for m in (10, 20, 40):
        errors.append(w2_1d(sample_reverse(teacher, IntegratorSpec('euler', m), x1).endpoint,
                            reference.endpoint).value)
        gap_integrals.append(_gap_integral(teacher, teacher, reference, m))
    return _rate_checks('stability.', errors, gap_integrals)


def check_trained_student_rate(teacher, sampler: MarginalSampler, scale: SuiteScale, seed: SeedSpec) -> list:
    """Euler rate and gap-integral slope for students trained by ``distill_stage`` at M = 10, 20, 40.

    Gating at full scale only: quick-scale training leaves an error floor that masks the rate.
    """
    params, sched = sampler.params, sampler.sched
    x1 = draw_noise(params, sched, scale.stability_samples, seed.spawn(0))
    reference = sample_reverse(teacher, IntegratorSpec('midpoint', 400), x1)
    errors, gap_integrals = [], []
    for m in (10, 20, 40):
        cfg = _distill_config(scale, m, 2, max_iter=scale.student_iter)
        trained, _ = distill_stage(teacher, _student_from_scratch(params, m, seed.spawn(1, m)), cfg, sampler,
                                   seed.spawn(2, m))
        errors.append(w2_1d(sample_reverse(trained, IntegratorSpec('euler', m), x1).endpoint,
                            reference.endpoint).value)
        gap_integrals.append(_gap_integral(teacher, trained, reference, m))
    return _rate_checks('stability.trained_', errors, gap_integrals, gating=scale.name == 'full')


def check_distillation_benefit(name: str, scale: SuiteScale, seed: SeedSpec) -> list:
    params, sched, data = _reference_setup(name)
    teacher = MarginalOracleField(params, sched, data)
    x1 = draw_noise(params, sched, scale.stability_samples, seed.spawn(0))
    target = data.resample(scale.stability_samples, seed.spawn(1))
    checks = []
    for m in (1, 2, 4):
        student = EndpointOracleStudent(teacher, m, substeps=20 // m)
        distilled = w2(sample_reverse(student, IntegratorSpec('euler', m), x1).endpoint, target, seed.spawn(2, m))
        truncated = w2(sample_reverse(teacher, IntegratorSpec('euler', m), x1).endpoint, target, seed.spawn(2, m))
        margin = SIGMA_SLACK * np.hypot(distilled.stderr, truncated.stderr)
        checks.append(CheckResult(f'stability.distillation_benefit[{name},M={m}]',
                                  distilled.value + margin < truncated.value,
                                  {'student_w2': distilled.value, 'teacher_w2': truncated.value, 'margin': margin}))
    return checks


def check_trained_distillation_benefit(scale: SuiteScale, seed: SeedSpec, steps: int = 4) -> CheckResult:
    """A student distilled 20 -> ``steps`` against the teacher truncated to ``steps`` Euler steps."""
    params, sched, data = _reference_setup()
    teacher = MarginalOracleField(params, sched, data)
    sampler = MarginalSampler(params, sched, data, exact=True)
    cfg = _distill_config(scale, steps, 20 // steps, max_iter=scale.student_iter)
    trained, trace = distill_stage(teacher, _student_from_scratch(params, steps, seed.spawn(0)), cfg, sampler,
                                   seed.spawn(1))
    x1 = draw_noise(params, sched, scale.stability_samples, seed.spawn(2))
    target = data.resample(scale.stability_samples, seed.spawn(3))
    distilled = w2_1d(sample_reverse(trained, IntegratorSpec('euler', steps), x1).endpoint, target)
    truncated = w2_1d(sample_reverse(teacher, IntegratorSpec('euler', steps), x1).endpoint, target)
    margin = SIGMA_SLACK * np.hypot(distilled.stderr, truncated.stderr)
    return CheckResult(f'stability.trained_distillation_benefit[M={steps}]', distilled.value + margin < truncated.value,
                       {'student_w2': distilled.value, 'teacher_w2': truncated.value, 'margin': margin,
                        'initial_loss': trace[0] if trace else None, 'final_loss': trace[-1] if trace else None},
                       gating=scale.name == 'full')


def check_multistage(scale: SuiteScale, seed: SeedSpec) -> list:
    params, sched, data = _reference_setup()
    teacher = MarginalOracleField(params, sched, data)
    sampler = MarginalSampler(params, sched, data, exact=True)
    x1 = draw_noise(params, sched, scale.oracle_samples, seed.spawn(0))
    target = data.resample(scale.oracle_samples, seed.spawn(1))

    def evaluate(student):
        cloud = sample_reverse(student, IntegratorSpec('euler', student.steps), x1).endpoint
        return {'w2_to_data': w2_1d(cloud, target).value}

    results = {}
    for label, schedule in (('staged', (20, 4, 2, 1)), ('direct', (20, 1))):
        cfg = _distill_config(scale, 1, 2, stage_schedule=schedule)
        _, reports = distill_multistage(teacher, cfg, sampler, seed.spawn(2, len(schedule)),
                                        student=_student_from_scratch(params, schedule[1], seed.spawn(3)),
                                        evaluate=evaluate)
        results[label] = [r.as_dict() for r in reports]
    finite = all(np.isfinite(r['metrics']['w2_to_data']) for reports in results.values() for r in reports)
    try:
        DistillConfig(stage_schedule=(100, 30))
        rejected = False
    except ConfigError:
        rejected = True
    return [CheckResult('stability.multistage_harness', finite and len(results['staged']) == 3
                        and len(results['direct']) == 1, results),
            CheckResult('stability.divisibility_rejected', rejected)]


def suite_stability(scale: SuiteScale, seed: SeedSpec, jobs: int = 1) -> list:
    params, sched, data = _reference_setup()
    teacher = MarginalOracleField(params, sched, data)
    sampler = MarginalSampler(params, sched, data, exact=True)
    checks = [_stability_check('stability.bound[identical]', teacher, teacher, sampler, scale, seed.spawn(0))]
    for m in (4, 20):
        student = PiecewiseStudentField(EndpointOracleStudent(teacher, m, substeps=2), m)
        checks.append(_stability_check(f'stability.bound[oracle,M={m}]', teacher, student, sampler, scale,
                                       seed.spawn(1, m)))
        cfg = _distill_config(scale, m, 2, jobs=jobs)
        trained, _ = distill_stage(teacher, _student_from_scratch(params, m, seed.spawn(2, m)), cfg, sampler,
                                   seed.spawn(3, m))
        checks.append(_stability_check(f'stability.bound[distilled,M={m}]', teacher,
                                       PiecewiseStudentField(trained, m), sampler, scale, seed.spawn(4, m)))
    checks.extend(check_euler_student_rate(teacher, params, sched, scale, seed.spawn(5)))
    checks.extend(check_trained_student_rate(teacher, sampler, scale, seed.spawn(8)))
    checks.append(check_trained_distillation_benefit(scale, seed.spawn(9)))
    for name in ('two-mode-1d', 'grid-2d'):
        checks.extend(check_distillation_benefit(name, scale, seed.spawn(6)))
    checks.extend(check_multistage(scale, seed.spawn(7)))
    return checks


# lemmas


def check_assignment_agreement(n_instances: int, seed: SeedSpec) -> list:
    worst_gap, worst_triangle = 0.0, -np.inf
    for k in range(n_instances):
        rng = seed.spawn(k).generator()
        n = int(rng.integers(2, 9))
        a, b, c = (rng.normal(size=(n, 1)) for _ in range(3))
        worst_gap = max(worst_gap, abs(w2_1d(a, b).value - w2_assignment(a, b).value))
        worst_triangle = max(worst_triangle, w2_1d(a, c).value - w2_1d(a, b).value - w2_1d(b, c).value)
    return [CheckResult('lemmas.sort_equals_assignment', worst_gap <= 1e-12, {'max_gap': worst_gap}),
            CheckResult('lemmas.triangle_inequality', worst_triangle <= 1e-12, {'max_violation': worst_triangle})]


def check_flow_map_lipschitz(n: int, seed: SeedSpec) -> CheckResult:
    params, sched = KacParams(2.0, 1.0), Schedule.linear()
    x0 = np.array([0.3])
    field_ = ConditionalOracleField(params, sched, x0)
    s, tau, delta = 0.9, 0.3, 1e-4
    x = sample_mean_reverting_batch(params, sched, np.repeat(x0[None, :], n, axis=0), s, seed.spawn(0))
    inside = np.abs(x[:, 0] - sched.f(s) * x0[0]) < params.c * sched.g(s) - 100 * delta
    x = x[inside]
    z = x + delta * np.where(seed.spawn(1).generator().uniform(size=x.shape) < 0.5, -1.0, 1.0)
    ratios = np.linalg.norm(flow_map(field_, s, tau, x) - flow_map(field_, s, tau, z), axis=1) / delta
    grid = np.linspace(s, tau, 13)
    traj = integrate_nodes(field_, np.linspace(s, tau, 1201), x, None, 'midpoint')
    lip = [estimate_lipschitz(field_, traj.states[k * 100], float(t), 1e-4, seed.spawn(2, k)).value
           for k, t in enumerate(grid)]
    bound = float(np.exp(integrate.trapezoid(lip, s - grid)))
    worst = float(np.max(ratios))
    return CheckResult('lemmas.flow_map_lipschitz', worst <= bound * 1.05,
                       {'max_ratio': worst, 'bound': bound, 'points': int(x.shape[0])},
                       inconclusive=not np.isfinite(bound))


def check_flow_map_reversibility(seed: SeedSpec) -> CheckResult:
    field_ = ParametricField(MLPModel(1, hidden=(16, 16), seed=seed))
    x = np.linspace(-1.0, 1.0, 9)[:, None]
    spec = IntegratorSpec('midpoint', 2000)
    back = flow_map(field_, 0.8, 0.2, flow_map(field_, 0.2, 0.8, x, spec=spec), spec=spec)
    error = float(np.max(np.abs(back - x)))
    return CheckResult('lemmas.flow_map_reversibility', error <= 1e-6, {'max_error': error})


def suite_lemmas(scale: SuiteScale, seed: SeedSpec, jobs: int = 1) -> list:
    report = lemma_pushforward_check(scale.lemma_instances, 6, seed.spawn(0))
    return ([CheckResult('lemmas.pushforward_coupling', report.passed, report.as_dict())]
            + check_assignment_agreement(scale.lemma_instances, seed.spawn(1))
            + [check_flow_map_lipschitz(scale.oracle_samples, seed.spawn(2)),
               check_flow_map_reversibility(seed.spawn(3))])


SUITE_RUNNERS = {
    'density': suite_density,
    'velocity': suite_velocity,
    'guidance': suite_guidance,
    'integrators': suite_integrators,
    'stability': suite_stability,
    'lemmas': suite_lemmas,
}


def run_suite(suite: str, scale: str = 'quick', master_seed: int = 0, jobs: int = 1) -> SuiteReport:
    """Run one suite (or ``all``) and return its report."""
    if suite != 'all' and suite not in SUITE_RUNNERS:
        raise ConfigError(f'unknown suite {suite!r}; choose from {SUITES + ("all",)}')
    if scale not in SCALES:
        raise ConfigError(f'unknown scale {scale!r}; choose from {tuple(SCALES)}')
    report = SuiteReport(suite=suite, scale=scale, master_seed=master_seed)
    for k, name in enumerate(SUITES):
        if suite not in (name, 'all'):
            continue
        logger.info(f'Running suite {name} ({scale})')
        start = time.perf_counter()
        checks = SUITE_RUNNERS[name](SCALES[scale], SeedSpec(master_seed, stream_id=100 + k), jobs)
        report.wall_clock[name] = time.perf_counter() - start
        for check in checks:
            if check.failed:
                logger.warning(f'check failed: {check.name}')
            elif check.inconclusive:
                logger.warning(f'check inconclusive: {check.name}')
        report.checks.extend(checks)
        logger.info(f'Suite {name}: {sum(c.passed for c in checks)}/{len(checks)} checks passed '
                    f'in {report.wall_clock[name]:.1f}s')
    return report
