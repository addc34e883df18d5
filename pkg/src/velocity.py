"""Velocity fields of the (mean-reverting) Kac flow.

Every field is evaluated as ``field.evaluate(t, x, label)`` with ``x`` of shape
``(n, d)`` (or ``(d,)``) and a scalar time ``t`` in [0, 1]. Labels are ``None``
(unconditional), a class index, or one index per row with ``-1`` meaning the
null label.
"""
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from config.logging_config import get_logger
from src.datasets import Dataset
from src.exceptions import DomainError, ParameterError, TrainingError
from src.kac_core import KacParams, Schedule, SeedSpec, sample_mean_reverting_batch
from src.metrics import rms_with_stderr
from src.mlp import MLPModel, NULL_LABEL, Optimizer, OptimizerConfig
from src.telegraph_analytics import ATOM_RTOL, log_interior_density, sample_exact, telegraph_velocity

logger = get_logger(__name__)

FIELD_KINDS = ('conditional-oracle', 'marginal-oracle', 'parametric', 'guided', 'student', 'analytic')


def _as_rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return np.atleast_2d(x), x.ndim == 1


def _row_labels(label, rows: int) -> np.ndarray:
    if label is None:
        return np.full(rows, NULL_LABEL)
    return np.broadcast_to(np.asarray(label, dtype=int), (rows,))


class VelocityField:
    """Uniform evaluation interface for every velocity field."""

    kind = 'analytic'

    def __init__(self, params: KacParams | None = None, sched: Schedule | None = None):
        self.params = params
        self.sched = sched

    def _evaluate(self, t: float, x: np.ndarray, label) -> tuple[np.ndarray, int]:
        raise NotImplementedError

    def evaluate_counted(self, t: float, x, label=None) -> tuple[np.ndarray, int]:
        """Velocity plus the number of rows clamped into the support."""
        rows, single = _as_rows(x)
        v, clamped = self._evaluate(float(t), rows, label)
        return (v[0] if single else v), clamped

    def evaluate(self, t: float, x, label=None) -> np.ndarray:
        return self.evaluate_counted(t, x, label)[0]

    __call__ = evaluate

    @property
    def metadata(self) -> dict:
        return {
            'kind': self.kind,
            'params': self.params.describe() if self.params is not None else None,
            'schedule': self.sched.describe() if self.sched is not None else None,
        }

    def fingerprint(self) -> str:
        return repr(sorted(self.metadata.items(), key=lambda kv: kv[0]))


class ConstantField(VelocityField):

    def __init__(self, value):
        super().__init__()
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def _evaluate(self, t, x, label):
        return np.broadcast_to(self.value, x.shape).copy(), 0

    def fingerprint(self):
        return f'constant:{self.value.tolist()}'


class AffineField(VelocityField):
    """v(t, x) = k x + b."""

    def __init__(self, k: float, b=0.0):
        super().__init__()
        self.k = float(k)
        self.b = np.asarray(b, dtype=float)

    def _evaluate(self, t, x, label):
        return self.k * x + self.b, 0

    def fingerprint(self):
        return f'affine:{self.k}:{self.b.tolist()}'


class BiasedField(VelocityField):
    """A base field shifted by a constant bias vector."""

    def __init__(self, base: VelocityField, bias):
        super().__init__(base.params, base.sched)
        self.base = base
        self.bias = np.asarray(bias, dtype=float)
        self.kind = base.kind

    def _evaluate(self, t, x, label):
        v, clamped = self.base.evaluate_counted(t, x, label)
        return v + self.bias, clamped

    def fingerprint(self):
        return f'biased:{self.base.fingerprint()}:{self.bias.tolist()}'


def conditional_velocity(params: KacParams, sched: Schedule, t, x, x0) -> np.ndarray:
    """Per-coordinate chain rule v_i = f'(t) x0_i + g'(t) v_K(g(t), x_i - f(t) x0_i).

    ``t`` may be a scalar or one time per row of ``x``.
    """
    x = np.asarray(x, dtype=float)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), x.shape)
    t = np.asarray(t, dtype=float)
    t_col = t[..., None] if t.ndim and x.ndim > 1 else t
    s = np.asarray(sched.g(t_col), dtype=float)
    z = x - np.asarray(sched.f(t_col), dtype=float) * x0
    try:
        base = telegraph_velocity(params.a, params.c, s, z)
    except DomainError:
        logger.error('conditional velocity requested outside the support of the mean-reverting law')
        raise
    return np.asarray(sched.df(t_col)) * x0 + np.asarray(sched.dg(t_col)) * base


def _support_excess(params, sched, t, x, points) -> np.ndarray:
    """l_inf distance beyond each component's box, shape (rows, n_points); <= 0 inside."""
    z = x[:, None, :] - sched.f(t) * points[None, :, :]
    return np.max(np.abs(z), axis=2) - params.c * sched.g(t)


def _clamp_rows(params, sched, t, x, points, allowed) -> tuple[np.ndarray, np.ndarray]:
    """Project rows lying outside every allowed box onto the nearest allowed box."""
    excess = np.where(allowed, _support_excess(params, sched, t, x, points), np.inf)
    tol = ATOM_RTOL * params.c * sched.g(t)
    outside = np.min(excess, axis=1) > tol
    if not outside.any():
        return x, outside
    nearest = np.argmin(excess[outside], axis=1)
    center = sched.f(t) * points[nearest]
    edge = params.c * sched.g(t)
    x = x.copy()
    x[outside] = center + np.clip(x[outside] - center, -edge, edge)
    return x, outside


def _mixture_velocity(params: KacParams, sched: Schedule, t: float, x: np.ndarray, data: Dataset,
                      labels: np.ndarray) -> np.ndarray:
    points = data.points
    s = sched.g(t)
    z = x[:, None, :] - sched.f(t) * points[None, :, :]
    allowed = np.ones((x.shape[0], points.shape[0]), dtype=bool)
    if data.labels is not None:
        conditional = labels >= 0
        allowed = ~conditional[:, None] | (data.labels[None, :] == labels[:, None])
    elif np.any(labels >= 0):
        raise ParameterError('labels given but the dataset is unlabeled')
    with np.errstate(divide="ignore"):
        log_w = np.where(allowed, np.log(data.weights)[None, :], -np.inf)
    if s <= 0:
        # t = 0: the law is the data itself
        hit = np.all(np.abs(z) <= 1e-12 * max(1.0, data.max_abs), axis=2)
        log_post = np.where(hit, log_w, -np.inf)
        base = np.zeros_like(z)
    else:
        edge = params.c * s
        excess = np.abs(z) - edge
        on_atom = np.abs(excess) <= ATOM_RTOL * edge
        inside = excess < -ATOM_RTOL * edge
        log_coord = np.where(inside, log_interior_density(params.a, params.c, s, np.where(inside, z, 0.0)),
                             np.where(on_atom, -params.a * s - np.log(2.0), -np.inf))
        log_post = log_w + log_coord.sum(axis=2)
        base = telegraph_velocity(params.a, params.c, s, np.clip(z, -edge, edge))
    best = np.max(log_post, axis=1)
    if not np.all(np.isfinite(best)):
        bad = np.flatnonzero(~np.isfinite(best))
        distance = np.min(np.where(allowed, _support_excess(params, sched, t, x, points), np.inf), axis=1)
        logger.error(f'{bad.size} states outside every mixture support')
        raise DomainError(f'state outside all supports; nearest support distance {float(np.max(distance[bad])):.3g}')
    post = np.exp(log_post - best[:, None])
    post /= post.sum(axis=1, keepdims=True)
    velocities = sched.df(t) * points[None, :, :] + sched.dg(t) * base
    return np.einsum('rn,rnd->rd', post, velocities)


def marginal_velocity(params: KacParams, sched: Schedule, data: Dataset, t: float, x, label=None) -> np.ndarray:
    """Posterior-weighted average of conditional velocities (the regression minimiser)."""
    rows, single = _as_rows(x)
    v = _mixture_velocity(params, sched, float(t), rows, data, _row_labels(label, rows.shape[0]))
    return v[0] if single else v


class ConditionalOracleField(VelocityField):
    kind = 'conditional-oracle'

    def __init__(self, params: KacParams, sched: Schedule, x0, clamp: bool = True):
        super().__init__(params, sched)
        self.x0 = np.asarray(x0, dtype=float).reshape(params.d)
        self.clamp = clamp

    def _evaluate(self, t, x, label):
        clamped = 0
        if self.clamp:
            x, outside = _clamp_rows(self.params, self.sched, t, x, self.x0[None, :], np.ones((x.shape[0], 1), bool))
            clamped = int(outside.sum())
        return conditional_velocity(self.params, self.sched, t, x, self.x0), clamped

    def fingerprint(self):
        return f'conditional:{self.params}:{self.sched.describe()}:{self.x0.tolist()}'


class MarginalOracleField(VelocityField):
    kind = 'marginal-oracle'

    def __init__(self, params: KacParams, sched: Schedule, data: Dataset, clamp: bool = True):
        super().__init__(params, sched)
        self.data = data
        self.clamp = clamp

    def _evaluate(self, t, x, label):
        labels = _row_labels(label, x.shape[0])
        clamped = 0
        if self.clamp:
            allowed = np.ones((x.shape[0], self.data.points.shape[0]), dtype=bool)
            if self.data.labels is not None:
                allowed = (labels[:, None] < 0) | (self.data.labels[None, :] == labels[:, None])
            x, outside = _clamp_rows(self.params, self.sched, t, x, self.data.points, allowed)
            clamped = int(outside.sum())
            if clamped:
                logger.debug(f'clamped {clamped} states into the support at t={t:.4f}')
        return _mixture_velocity(self.params, self.sched, t, x, self.data, labels), clamped

    def fingerprint(self):
        return f'marginal:{self.params}:{self.sched.describe()}:{self.data.points.tobytes().hex()}'


class ParametricField(VelocityField):
    kind = 'parametric'

    def __init__(self, model: MLPModel, params: KacParams | None = None, sched: Schedule | None = None):
        super().__init__(params, sched)
        self.model = model

    def _evaluate(self, t, x, label):
        return self.model.forward(t, x, label), 0

    def fingerprint(self):
        return self.model.fingerprint()


@dataclass(frozen=True)
class GuidanceSpec:
    w: float
    conditional: VelocityField
    unconditional: VelocityField

    def __post_init__(self):
        if not np.isfinite(self.w):
            raise ParameterError(f'guidance strength must be finite, got {self.w}')


def guided_velocity(spec: GuidanceSpec, t: float, x, label=None) -> np.ndarray:
    """v_u + w (v_c - v_u); w = 0 and w = 1 return the unconditional / conditional output as is."""
    return _guided_counted(spec, t, x, label)[0]


def _guided_counted(spec: GuidanceSpec, t: float, x, label):
    unconditional, clamped_u = spec.unconditional.evaluate_counted(t, x, None)
    if label is None or spec.w == 0:
        return unconditional, clamped_u
    conditional, clamped_c = spec.conditional.evaluate_counted(t, x, label)
    if spec.w == 1:
        return conditional, clamped_c
    return unconditional + spec.w * (conditional - unconditional), max(clamped_u, clamped_c)


class GuidedField(VelocityField):
    kind = 'guided'

    def __init__(self, spec: GuidanceSpec):
        super().__init__(spec.conditional.params, spec.conditional.sched)
        self.spec = spec

    def _evaluate(self, t, x, label):
        return _guided_counted(self.spec, t, x, label)

    def gap(self, t: float, x, label) -> np.ndarray:
        return self.spec.conditional.evaluate(t, x, label) - self.spec.unconditional.evaluate(t, x, None)

    def fingerprint(self):
        return f'guided:{self.spec.w}:{self.spec.conditional.fingerprint()}:{self.spec.unconditional.fingerprint()}'


def _exact_states(params: KacParams, sched: Schedule, x0: np.ndarray, t, seed: SeedSpec) -> np.ndarray:
    """f(t) x0 + K_{g(t)} from exact per-coordinate telegraph draws; ``t`` is a scalar or one time per row."""
    n = x0.shape[0]
    params_1d = params.with_dimension(1)
    noise = np.zeros(x0.shape)
    if np.ndim(t) == 0:
        s = float(sched.g(float(t)))
        if s > 0:
            for j in range(params.d):
                noise[:, j] = sample_exact(params_1d, s, n, seed.spawn(1, j))
        return sched.f(float(t)) * x0 + noise
    t = np.asarray(t, dtype=float)
    s = np.clip(np.asarray(sched.g(t), dtype=float), 0.0, None)
    for j in range(params.d):
        noise[:, j] = sample_exact(params_1d, s, n, seed.spawn(1, j))
    return np.asarray(sched.f(t), dtype=float)[:, None] * x0 + noise


class MarginalSampler:
    """Draws (x, y) from the time-t marginal of the mean-reverting process over a dataset.

    ``exact`` uses the analytic telegraph law; otherwise reversal paths are simulated.
    """

    def __init__(self, params: KacParams, sched: Schedule, data: Dataset, exact: bool = False):
        self.params = params
        self.sched = sched
        self.data = data
        self.exact = exact

    def sample(self, t, n: int, seed: SeedSpec, label=None):
        data = self.data.restrict(label)
        rng = seed.generator()
        idx = rng.choice(data.points.shape[0], size=n, p=data.weights)
        x0 = data.points[idx]
        labels = data.labels[idx] if data.labels is not None else np.full(n, NULL_LABEL)
        if self.exact:
            return _exact_states(self.params, self.sched, x0, t, seed), labels
        return sample_mean_reverting_batch(self.params, self.sched, x0, t, seed.spawn(1)), labels

    def __call__(self, t, n: int, seed: SeedSpec) -> np.ndarray:
        return self.sample(t, n, seed)[0]


@dataclass(frozen=True)
class EnergyEstimate:
    value: float
    stderr: float
    n: int


def kinetic_energy(field: VelocityField, mu_sampler, t: float, n: int, seed: SeedSpec, label=None) -> EnergyEstimate:
    """Monte Carlo (E_{x~mu_t} |v(t, x)|^2)^{1/2} with a delta-method standard error."""
    if n < 1:
        raise ParameterError(f'n must be >= 1, got {n}')
    x = mu_sampler(t, n, seed)
    v = field.evaluate(t, x, label)
    value, stderr = rms_with_stderr(np.sum(np.atleast_2d(v) ** 2, axis=1))
    return EnergyEstimate(value=value, stderr=stderr, n=n)


def _training_batch(params, sched, data, opt, rng, seed, exact: bool):
    n = data.points.shape[0]
    idx = rng.choice(n, size=opt.batch_size, p=data.weights)
    x0 = data.points[idx]
    t = rng.uniform(0.0, 1.0, size=opt.batch_size)
    if exact:
        x = _exact_states(params, sched, x0, t, seed)
    else:
        x = sample_mean_reverting_batch(params, sched, x0, t, seed)
    labels = data.labels[idx].copy() if data.labels is not None else np.full(opt.batch_size, NULL_LABEL)
    if data.labels is not None and opt.label_drop > 0:
        labels[rng.uniform(size=opt.batch_size) < opt.label_drop] = NULL_LABEL
    return t, x, x0, labels


def train_parametric(model: MLPModel, params: KacParams, sched: Schedule, data: Dataset, opt: OptimizerConfig,
                     seed: SeedSpec, exact_noise: bool = True, progress: bool = False):
    """Regress the model onto conditional velocities; returns ``(trained_model, loss_trace)``.

    Times are uniform on [0, 1); states come from the exact telegraph law, or from simulated
    reversal paths when ``exact_noise`` is False. The input model is never mutated.
    """
    if opt.iterations == 0:
        return model.copy(), []
    if data.dim != params.d or model.dim != params.d:
        raise ParameterError(f'dimension mismatch: data {data.dim}, model {model.dim}, params {params.d}')
    if opt.label_drop < 1.0 and model.n_classes and data.labels is None:
        raise ParameterError('class-conditional model needs a labeled dataset')
    logger.info(f'Training {model} for {opt.iterations} iterations ({opt.optimizer}, lr={opt.step_size})')
    model = model.copy()
    optimizer = Optimizer(model, opt)
    trace = []
    for it in tqdm(range(opt.iterations), disable=not progress, desc='train'):
        step_seed = seed.spawn(it)
        t, x, x0, labels = _training_batch(params, sched, data, opt, step_seed.generator(), step_seed.spawn(1),
                                           exact_noise)
        target = conditional_velocity(params, sched, t, x, x0)
        inputs = model.encode(t, x, labels if model.n_classes else None)
        pred, activations = model.forward_cached(inputs)
        residual = pred - target
        loss = float(np.mean(np.sum(residual ** 2, axis=1)))
        if not np.isfinite(loss):
            logger.error(f'Training diverged at iteration {it}')
            raise TrainingError(f'loss diverged at iteration {it}', trace)
        trace.append(loss)
        optimizer.step(model, model.backward(activations, 2.0 * residual / opt.batch_size))
        if opt.log_every and it % opt.log_every == 0:
            logger.debug(f'iter {it} loss {loss:.6f}')
    logger.info(f'Model training completed: loss {trace[0]:.4f} -> {trace[-1]:.4f}')
    return optimizer.result(model), trace
