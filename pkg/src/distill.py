"""Endpoint distillation of few-step students from a frozen teacher.

A student on the uniform grid t_k = k / M takes one Euler step per segment and is
trained so that ``x - dt * v(t_k, x)`` matches the teacher's reverse integration of
the same segment with N substeps. Stages chain S_1 -> S_2 -> ... with S_{i+1} | S_i;
every stage after the first uses a frozen copy of the previous student as teacher.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid
from tqdm import tqdm

from config.logging_config import get_logger
from src.exceptions import ConfigError, ConsistencyError, KacFlowError, ParameterError, StageError
from src.integrate import METHODS, integrate_nodes
from src.kac_core import SeedSpec
from src.metrics import REL_SLACK, SIGMA_SLACK, SampleCloud, estimate_lipschitz, rms_with_stderr, w2
from src.mlp import MLPModel, NULL_LABEL, Optimizer, OptimizerConfig
from src.velocity import MarginalSampler, ParametricField, VelocityField

logger = get_logger(__name__)

STATE_MODES = ('marginal', 'rollout')
SMOOTHING_WINDOW = 50
TUBE_POINTS = 256


def validate_stage_schedule(schedule) -> tuple:
    schedule = tuple(int(s) for s in schedule)
    if not schedule:
        raise ConfigError('stage_schedule must contain at least one step count')
    if any(s < 1 for s in schedule):
        raise ConfigError(f'stage step counts must be >= 1: {list(schedule)}')
    for hi, lo in zip(schedule[:-1], schedule[1:]):
        if lo >= hi:
            raise ConfigError(f'stage_schedule must be strictly decreasing: {list(schedule)}')
        if hi % lo:
            raise ConfigError(f'stage {hi} -> {lo}: {lo} does not divide {hi}')
    return schedule


@dataclass
class DistillConfig:
    substeps: int = 2
    steps: int = 4
    teacher_method: str = 'euler'
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_iter: int = 1000
    stage_schedule: tuple = ()
    optimizer: str = 'sgd'
    weight_decay: float = 0.01
    grad_clip: float | None = None
    lr_schedule: str = 'constant'
    ema_decay: float | None = None
    label_drop: float = 0.0
    state_mode: str = 'marginal'
    jobs: int = 1
    log_every: int = 100

    def __post_init__(self):
        if self.substeps < 2:
            raise ConfigError(f'teacher substeps N must be >= 2, got {self.substeps}')
        if self.steps < 1:
            raise ConfigError(f'student steps must be >= 1, got {self.steps}')
        if self.teacher_method not in METHODS:
            raise ConfigError(f'Unsupported teacher integrator: {self.teacher_method}')
        if self.state_mode not in STATE_MODES:
            raise ConfigError(f'state_mode must be one of {STATE_MODES}, got {self.state_mode}')
        if self.max_iter < 0:
            raise ConfigError(f'max_iter must be >= 0, got {self.max_iter}')
        if self.stage_schedule:
            self.stage_schedule = validate_stage_schedule(self.stage_schedule)
        self.optimizer_config()

    @property
    def delta_t(self) -> float:
        return 1.0 / self.steps

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(step_size=self.learning_rate, iterations=self.max_iter, batch_size=self.batch_size,
                               label_drop=self.label_drop, optimizer=self.optimizer, weight_decay=self.weight_decay,
                               grad_clip=self.grad_clip, lr_schedule=self.lr_schedule, ema_decay=self.ema_decay,
                               log_every=self.log_every)


def segment_node(t: float, steps: int) -> float:
    """Upper node t_k of the grid segment (t_k - 1/M, t_k] containing t."""
    k = min(max(int(np.ceil(t * steps - 1e-9)), 1), steps)
    return k / steps


class StudentModel(ParametricField):
    """MLP student sampled with one Euler step per segment of its grid."""
    kind = 'student'
    sampling_method = 'euler'

    def __init__(self, model: MLPModel, steps: int, params=None, sched=None):
        super().__init__(model, params, sched)
        self.steps = int(steps)

    @classmethod
    def from_teacher(cls, teacher: VelocityField, steps: int) -> 'StudentModel':
        model = getattr(teacher, 'model', None)
        if not isinstance(model, MLPModel):
            raise ConfigError(f'cannot initialise a student from a {teacher.kind} teacher; pass an initial model')
        return cls(model.copy(), steps, teacher.params, teacher.sched)

    def copy(self) -> 'StudentModel':
        return StudentModel(self.model.copy(), self.steps, self.params, self.sched)

    def fingerprint(self):
        return f'student:{self.steps}:{self.model.fingerprint()}'


class FrozenTeacher(VelocityField):
    """A teacher field together with the grid and integrator it is sampled with."""

    def __init__(self, field: VelocityField, steps: int, method: str = 'euler'):
        super().__init__(field.params, field.sched)
        self.field = field
        self.kind = field.kind
        self.steps = int(steps)
        self.sampling_method = method

    def _evaluate(self, t, x, label):
        return self.field.evaluate_counted(t, x, label)

    def fingerprint(self):
        return self.field.fingerprint()


class PiecewiseStudentField(VelocityField):
    """A student frozen in time on each grid segment: v(t, x) = base(t_k, x)."""
    kind = 'student'

    def __init__(self, base: VelocityField, steps: int):
        super().__init__(base.params, base.sched)
        self.base = base
        self.steps = int(steps)

    def _evaluate(self, t, x, label):
        return self.base.evaluate_counted(segment_node(t, self.steps), x, label)

    def fingerprint(self):
        return f'piecewise:{self.steps}:{self.base.fingerprint()}'


def teacher_endpoint(teacher: VelocityField, t: float, x, label, substeps: int, delta_t: float,
                     method: str = 'euler') -> np.ndarray:
    """State after integrating the teacher backward from t to t - delta_t in N uniform substeps."""
    if substeps < 1:
        raise ParameterError(f'substeps must be >= 1, got {substeps}')
    if t - delta_t < -1e-12 or t > 1.0 + 1e-12:
        raise ParameterError(f'segment [{t - delta_t}, {t}] leaves [0, 1]')
    x = np.asarray(x, dtype=float)
    nodes = np.linspace(t, max(t - delta_t, 0.0), substeps + 1)
    return integrate_nodes(teacher, nodes, x, label, method).endpoint.reshape(x.shape)


class EndpointOracleStudent(VelocityField):
    """Exact one-step student: v(t_k, x) = (x - teacher_endpoint(t_k, x)) / dt."""
    kind = 'student'
    sampling_method = 'euler'

    def __init__(self, teacher: VelocityField, steps: int, substeps: int = 2, method: str = 'euler'):
        super().__init__(teacher.params, teacher.sched)
        self.teacher = teacher
        self.steps = int(steps)
        self.substeps = int(substeps)
        self.method = method

    def _evaluate(self, t, x, label):
        node, dt = segment_node(t, self.steps), 1.0 / self.steps
        return (x - teacher_endpoint(self.teacher, node, x, label, self.substeps, dt, self.method)) / dt, 0

    def fingerprint(self):
        return f'endpoint-oracle:{self.steps}:{self.substeps}:{self.method}:{self.teacher.fingerprint()}'


def smoothed_trace(trace, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    return pd.Series(trace, dtype=float).rolling(window, min_periods=1).mean().to_numpy()


def _check_teacher_grid(teacher: VelocityField, cfg: DistillConfig):
    steps = getattr(teacher, 'steps', None)
    if steps is not None and steps != cfg.steps * cfg.substeps:
        raise ConfigError(f'teacher grid has {steps} steps; expected {cfg.steps} x {cfg.substeps}')


def _stage_states(teacher, cfg: DistillConfig, sampler: MarginalSampler, nodes: np.ndarray, seed: SeedSpec):
    """Inputs (x, labels) for the sampled grid indices ``nodes``."""
    rows = nodes.size
    if cfg.state_mode == 'marginal':
        x = np.empty((rows, sampler.params.d))
        labels = np.full(rows, NULL_LABEL)
        for k in np.unique(nodes):
            sel = np.flatnonzero(nodes == k)
            x[sel], labels[sel] = sampler.sample(k / cfg.steps, sel.size, seed.spawn(int(k)))
        return x, labels
    x1, labels = sampler.sample(1.0, rows, seed.spawn(0))
    fine = cfg.steps * cfg.substeps
    depth = (cfg.steps - int(nodes.min())) * cfg.substeps
    rollout = integrate_nodes(teacher, np.linspace(1.0, 0.0, fine + 1)[:depth + 1], x1, labels,
                              cfg.teacher_method)
    return rollout.states[(cfg.steps - nodes) * cfg.substeps, np.arange(rows)], labels


def _teacher_targets(teacher, cfg: DistillConfig, nodes, x, labels):
    groups = [np.flatnonzero(nodes == k) for k in np.unique(nodes)]

    def run(sel):
        t = nodes[sel[0]] / cfg.steps
        return sel, teacher_endpoint(teacher, t, x[sel], labels[sel], cfg.substeps, cfg.delta_t, cfg.teacher_method)

    if cfg.jobs > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(sel) for sel in groups]
    target = np.empty_like(x)
    for sel, value in results:
        target[sel] = value
    return target


def endpoint_loss(student: StudentModel, t, x, labels, target, delta_t: float):
    """Returns (loss, gradients) of mean |x - dt v(t, x) - target|^2."""
    model = student.model
    inputs = model.encode(t, x, labels if model.n_classes else None)
    v, activations = model.forward_cached(inputs)
    residual = x - delta_t * v - target
    loss = float(np.mean(np.sum(residual ** 2, axis=1)))
    grads = model.backward(activations, -2.0 * delta_t * residual / x.shape[0])
    return loss, grads


def distill_stage(teacher: VelocityField, student: StudentModel, cfg: DistillConfig, data_sampler: MarginalSampler,
                  seed: SeedSpec, progress: bool = False):
    """One endpoint-distillation stage; returns ``(trained_student, loss_trace)``.

    Neither the teacher nor the given student is mutated.
    """
    if student.steps != cfg.steps:
        raise ConfigError(f'student grid has {student.steps} steps; stage expects {cfg.steps}')
    _check_teacher_grid(teacher, cfg)
    student = student.copy()
    if cfg.max_iter == 0:
        return student, []
    logger.info(f'Distilling {cfg.steps}-step student: N={cfg.substeps}, teacher {cfg.teacher_method}, '
                f'states {cfg.state_mode}, {cfg.max_iter} iterations')
    before = teacher.fingerprint()
    opt = cfg.optimizer_config()
    optimizer = Optimizer(student.model, opt)
    trace = []
    for it in tqdm(range(cfg.max_iter), disable=not progress, desc=f'distill {cfg.steps}'):
        step_seed = seed.spawn(it)
        rng = step_seed.generator()
        nodes = rng.integers(1, cfg.steps + 1, size=cfg.batch_size)
        x, labels = _stage_states(teacher, cfg, data_sampler, nodes, step_seed.spawn(1))
        if cfg.label_drop > 0:
            labels = np.where(rng.uniform(size=labels.size) < cfg.label_drop, NULL_LABEL, labels)
        target = _teacher_targets(teacher, cfg, nodes, x, labels)
        loss, grads = endpoint_loss(student, nodes / cfg.steps, x, labels, target, cfg.delta_t)
        if not np.isfinite(loss):
            logger.error(f'Distillation diverged at iteration {it}')
            raise StageError(f'loss diverged at iteration {it}', trace=trace)
        trace.append(loss)
        optimizer.step(student.model, grads)
        if cfg.log_every and it % cfg.log_every == 0:
            logger.debug(f'iter {it} loss {loss:.6f}')
    if teacher.fingerprint() != before:
        raise ConsistencyError('teacher parameters changed during distillation')
    student.model = optimizer.result(student.model)
    logger.info(f'Stage completed: loss {trace[0]:.4g} -> {trace[-1]:.4g}')
    return student, trace


@dataclass
class StageReport:
    stage: int
    from_steps: int
    to_steps: int
    substeps: int
    teacher_method: str
    iterations: int
    initial_loss: float | None
    final_loss: float | None
    smoothed_initial: float | None
    smoothed_final: float | None
    wall_clock: float
    teacher_fingerprint: str
    student_fingerprint: str
    metrics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def distill_multistage(teacher: VelocityField, cfg: DistillConfig, data_sampler: MarginalSampler, seed: SeedSpec,
                       student: StudentModel | None = None, evaluate=None, on_stage=None, progress: bool = False):
    """Chain stages over ``cfg.stage_schedule``; returns ``(final_field, reports)``.

    A single-entry schedule returns the teacher wrapped with its own grid. ``evaluate``,
    if given, maps each stage's student to extra report metrics; ``on_stage(report, student)``
    is called after every stage.
    """
    schedule = validate_stage_schedule(cfg.stage_schedule or (cfg.steps * cfg.substeps, cfg.steps))
    current = teacher if isinstance(teacher, FrozenTeacher) else FrozenTeacher(teacher, schedule[0], cfg.teacher_method)
    if len(schedule) == 1:
        logger.info(f'Single-entry schedule {list(schedule)}: returning the teacher unchanged')
        return current, []
    reports = []
    init = student
    for i, (hi, lo) in enumerate(zip(schedule[:-1], schedule[1:])):
        stage_cfg = replace(cfg, steps=lo, substeps=hi // lo, stage_schedule=(),
                            teacher_method=cfg.teacher_method if i == 0 else 'euler')
        if init is None:
            init = StudentModel.from_teacher(current.field if isinstance(current, FrozenTeacher) else current, lo)
        start = time.perf_counter()
        try:
            trained, trace = distill_stage(current, StudentModel(init.model, lo, init.params, init.sched), stage_cfg,
                                           data_sampler, seed.spawn(i), progress)
        except KacFlowError as e:
            logger.error(f'Stage {i + 1} ({hi} -> {lo}) failed: {e}')
            raise StageError(f'stage {i + 1} ({hi} -> {lo}) failed: {e}', reports=reports,
                             trace=getattr(e, 'trace', None)) from e
        smoothed = smoothed_trace(trace) if trace else None
        report = StageReport(
            stage=i + 1, from_steps=hi, to_steps=lo, substeps=hi // lo, teacher_method=stage_cfg.teacher_method,
            iterations=len(trace), initial_loss=trace[0] if trace else None, final_loss=trace[-1] if trace else None,
            smoothed_initial=float(smoothed[0]) if trace else None,
            smoothed_final=float(smoothed[-1]) if trace else None,
            wall_clock=time.perf_counter() - start, teacher_fingerprint=current.fingerprint(),
            student_fingerprint=trained.fingerprint())
        if evaluate is not None:
            report.metrics = dict(evaluate(trained))
        reports.append(report)
        if on_stage is not None:
            on_stage(report, trained)
        logger.info(f'Stage {i + 1}: {hi} -> {lo} steps (N={hi // lo}) in {report.wall_clock:.2f}s')
        current = trained.copy()
        init = trained
    return current, reports


@dataclass
class StabilityReport:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    stderr: np.ndarray
    lipschitz: np.ndarray
    gap: np.ndarray
    gap_integral: np.ndarray
    epsilon: float
    passed: bool
    inconclusive: bool = False
    flagged: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {'times': self.times.tolist(), 'lhs': self.lhs.tolist(), 'rhs': self.rhs.tolist(),
                'stderr': self.stderr.tolist(), 'lipschitz': self.lipschitz.tolist(), 'gap': self.gap.tolist(),
                'gap_integral': self.gap_integral.tolist(), 'epsilon': self.epsilon, 'passed': self.passed,
                'inconclusive': self.inconclusive, 'flagged': self.flagged}


def _tube(a: np.ndarray, b: np.ndarray, seed: SeedSpec) -> np.ndarray:
    points = np.concatenate([a, b])
    if points.shape[0] <= TUBE_POINTS:
        return points
    return points[seed.generator().choice(points.shape[0], size=TUBE_POINTS, replace=False)]


def verify_stability_bound(teacher: VelocityField, student: VelocityField, data_sampler, grid, seed: SeedSpec,
                           n: int = 4000, substeps: int = 25, label=None, h: float = 1e-4) -> StabilityReport:
    """Endpoint-to-trajectory bound along a decreasing time grid starting at s = grid[0].

    lhs(tau) = W2 between the teacher and student flows pushed from one common cloud;
    rhs(tau) = exp(C(tau)) [eps + int_tau^s exp(-C(r)) gap(r) dr], C(tau) = int_tau^s L.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) >= 0):
        raise ParameterError('grid must be a strictly decreasing sequence of at least two times')
    cloud = data_sampler(float(grid[0]), n, seed.spawn(0))
    teacher_x, student_x = cloud.copy(), cloud.copy()
    lhs, lhs_se, lip, gap, gap_se, flagged = [], [], [], [], [], []
    for k, t in enumerate(grid):
        if k:
            nodes = np.linspace(grid[k - 1], t, substeps + 1)
            teacher_x = integrate_nodes(teacher, nodes, teacher_x, label, 'midpoint').endpoint
            student_x = integrate_nodes(student, nodes, student_x, label, 'midpoint').endpoint
        report = w2(SampleCloud(teacher_x, float(t), 'trajectory'), SampleCloud(student_x, float(t), 'trajectory'),
                    seed.spawn(1, k))
        lhs.append(report.value)
        lhs_se.append(report.stderr)
        tube = _tube(teacher_x, student_x, seed.spawn(2, k))
        estimates = [estimate_lipschitz(f, tube, float(t), h, seed.spawn(3, k), label=label) for f in (teacher, student)]
        for est in estimates:
            flagged.extend(est.flagged)
        lip.append(max(est.value for est in estimates))
        diff = teacher.evaluate(t, student_x, label) - student.evaluate(t, student_x, label)
        value, stderr = rms_with_stderr(np.sum(np.atleast_2d(diff) ** 2, axis=1))
        gap.append(value)
        gap_se.append(stderr)
    lip, gap, gap_se = np.array(lip), np.array(gap), np.array(gap_se)
    lhs, lhs_se = np.array(lhs), np.array(lhs_se)
    elapsed = grid[0] - grid
    epsilon = float(lhs[0])
    inconclusive = bool(flagged) or not np.all(np.isfinite(lip))
    if inconclusive:
        logger.warning(f'Lipschitz estimate not finite at {len(flagged)} points; stability check inconclusive')
        lip = np.where(np.isfinite(lip), lip, 0.0)
    growth = cumulative_trapezoid(lip, elapsed, initial=0.0)
    rhs = np.exp(growth) * (epsilon + cumulative_trapezoid(np.exp(-growth) * gap, elapsed, initial=0.0))
    rhs_se = np.exp(growth) * cumulative_trapezoid(np.exp(-growth) * gap_se, elapsed, initial=0.0)
    stderr = np.sqrt(lhs_se ** 2 + rhs_se ** 2)
    passed = bool(np.all(lhs <= rhs * (1.0 + REL_SLACK) + SIGMA_SLACK * stderr)) and not inconclusive
    report = StabilityReport(times=grid, lhs=lhs, rhs=rhs, stderr=stderr, lipschitz=lip, gap=gap,
                             gap_integral=cumulative_trapezoid(gap, elapsed, initial=0.0), epsilon=epsilon,
                             passed=passed, inconclusive=inconclusive, flagged=flagged[:20])
    logger.info(f'stability bound: passed={passed}, inconclusive={inconclusive}, '
                f'max lhs {lhs.max():.4g}, max rhs {rhs.max():.4g}')
    return report
