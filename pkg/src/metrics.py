"""Distances and diagnostics: empirical W2, cone audits and Lipschitz estimates.

Every stochastic inequality in this module is checked as
``lhs <= rhs * (1 + REL_SLACK) + SIGMA_SLACK * stderr``.
"""
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from config.logging_config import get_logger
from src.datasets import Dataset
from src.exceptions import ConsistencyError, DomainError, ParameterError
from src.kac_core import KacParams, Schedule, SeedSpec, sample_states_at_times

logger = get_logger(__name__)

REL_SLACK = 0.10
SIGMA_SLACK = 3.0
ASSIGNMENT_MAX_ATOMS = 8
CONE_TOL = 1e-9
PROVENANCES = ('exact-law', 'trajectory', 'dataset')


@dataclass(frozen=True, eq=False)
class SampleCloud:
    values: np.ndarray
    time: float | None = None
    provenance: str = 'dataset'

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ParameterError(f'sample cloud must be n x d, got shape {values.shape}')
        if not np.all(np.isfinite(values)):
            raise DomainError('sample cloud contains non-finite entries')
        if self.provenance not in PROVENANCES:
            raise ParameterError(f'unknown provenance {self.provenance}')
        object.__setattr__(self, 'values', values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class W2Report:
    value: float
    method: str
    stderr: float
    n: int
    n_projections: int | None = None

    def as_dict(self) -> dict:
        return {'w2': self.value, 'method': self.method, 'stderr': self.stderr, 'n': self.n,
                'n_projections': self.n_projections}


def rms_with_stderr(squares) -> tuple[float, float]:
    """sqrt(mean(squares)) with a delta-method standard error."""
    squares = np.asarray(squares, dtype=float)
    n = squares.size
    value = float(np.sqrt(np.mean(squares)))
    se_sq = float(np.std(squares, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    stderr = se_sq / (2.0 * value) if value > np.sqrt(se_sq) else np.sqrt(se_sq)
    return value, float(stderr)


def _as_cloud(x) -> SampleCloud:
    return x if isinstance(x, SampleCloud) else SampleCloud(x)


def _equalize(a: np.ndarray, b: np.ndarray, seed: SeedSpec | None):
    if a.shape[0] == b.shape[0]:
        return a, b
    rng = (seed or SeedSpec(0)).generator()
    n = min(a.shape[0], b.shape[0])
    if a.shape[0] > n:
        a = a[rng.choice(a.shape[0], size=n, replace=False)]
    else:
        b = b[rng.choice(b.shape[0], size=n, replace=False)]
    if a.shape[0] != b.shape[0]:
        raise ConsistencyError(f'sample counts differ after subsampling: {a.shape[0]} vs {b.shape[0]}')
    return a, b


def _check_pair(a: SampleCloud, b: SampleCloud):
    if a.dim != b.dim:
        raise ParameterError(f'dimension mismatch: {a.dim} vs {b.dim}')
    if min(a.n, b.n) < 2:
        raise ParameterError('W2 needs at least two samples per cloud')


def w2_1d(a, b, seed: SeedSpec | None = None) -> W2Report:
    """Exact empirical W2 in one dimension via the sorted (quantile) coupling."""
    a, b = _as_cloud(a), _as_cloud(b)
    _check_pair(a, b)
    if a.dim != 1:
        raise ParameterError(f'w2_1d needs d = 1, got d = {a.dim}')
    xa, xb = _equalize(a.values[:, 0], b.values[:, 0], seed)
    value, stderr = rms_with_stderr((np.sort(xa) - np.sort(xb)) ** 2)
    return W2Report(value=value, method='exact-1d', stderr=stderr, n=xa.size)


def _projection_sq(xa, xb, direction):
    return float(np.mean((np.sort(xa @ direction) - np.sort(xb @ direction)) ** 2))


def w2_sliced(a, b, n_projections: int = 256, seed: SeedSpec | None = None, jobs: int = 1) -> W2Report:
    """sqrt of the mean squared 1-D W2 over seeded random unit projections."""
    a, b = _as_cloud(a), _as_cloud(b)
    _check_pair(a, b)
    if a.dim < 2:
        raise ParameterError('w2_sliced needs d >= 2; use w2_1d')
    if n_projections < 1:
        raise ParameterError(f'n_projections must be >= 1, got {n_projections}')
    seed = seed or SeedSpec(0)
    xa, xb = _equalize(a.values, b.values, seed.spawn(0))
    directions = seed.spawn(1).generator().standard_normal((n_projections, a.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            squares = list(pool.map(lambda u: _projection_sq(xa, xb, u), directions))
    else:
        squares = [_projection_sq(xa, xb, u) for u in directions]
    value, stderr = rms_with_stderr(squares)
    return W2Report(value=value, method='sliced', stderr=stderr, n=xa.shape[0], n_projections=n_projections)


def w2_assignment(a, b) -> W2Report:
    """Exact W2 between equal-weight clouds by exhaustive search over permutations (n <= 8)."""
    a, b = _as_cloud(a), _as_cloud(b)
    if a.dim != b.dim or a.n != b.n:
        raise ParameterError('assignment W2 needs clouds of equal size and dimension')
    n = a.n
    if n > ASSIGNMENT_MAX_ATOMS:
        raise ParameterError(f'assignment search is limited to {ASSIGNMENT_MAX_ATOMS} atoms, got {n}')
    cost = np.sum((a.values[:, None, :] - b.values[None, :, :]) ** 2, axis=2)
    perms = np.array(list(itertools.permutations(range(n))))
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    return W2Report(value=float(np.sqrt(totals.min() / n)), method='assignment', stderr=0.0, n=n)


def w2(a, b, seed: SeedSpec | None = None, n_projections: int = 256, jobs: int = 1) -> W2Report:
    a = _as_cloud(a)
    return w2_1d(a, b, seed) if a.dim == 1 else w2_sliced(a, b, n_projections, seed, jobs)


@dataclass
class TimeLipschitzReport:
    pairs: list = field(default_factory=list)
    max_slack: float = 0.0
    passed: bool = True
    gating: bool = True

    def as_dict(self) -> dict:
        return {'pairs': self.pairs, 'max_slack': self.max_slack, 'passed': self.passed, 'gating': self.gating}


def effective_speed(params: KacParams, sched: Schedule, data: Dataset, s: float, t: float, nodes: int = 65) -> float:
    """sup over [s, t] of |f'| max|X0|_inf + g' c."""
    grid = np.linspace(min(s, t), max(s, t), nodes)
    return float(np.max(np.abs(sched.df(grid)) * data.max_abs + np.asarray(sched.dg(grid)) * params.c))


def _coupled_w2(xs: np.ndarray, xt: np.ndarray, product: bool) -> tuple[float, float]:
    if xs.shape[1] == 1 or product:
        per_coord = [(np.sort(xs[:, j]) - np.sort(xt[:, j])) ** 2 for j in range(xs.shape[1])]
        return rms_with_stderr(np.sum(per_coord, axis=0))
    report = w2_sliced(xs, xt)
    return report.value, report.stderr


def check_w2_lipschitz_in_time(params: KacParams, sched: Schedule, data: Dataset, times, n: int, seed: SeedSpec,
                               bound_scale: float = 1.0, jobs: int = 1) -> TimeLipschitzReport:
    """Empirical W2(mu_s, mu_t) against c_eff sqrt(d) |t - s| for every pair of grid times.

    Samples share their Kac paths across times. Single-point data gives product laws,
    whose W2 is combined exactly from the coordinates; other data uses sliced W2.
    The bound is gating only for the base flow (single data point at the origin).
    """
    times = np.asarray(times, dtype=float)
    if data.dim != params.d:
        raise ParameterError(f'dimension mismatch: data {data.dim}, params {params.d}')
    idx = seed.spawn(0).generator().choice(data.points.shape[0], size=n, p=data.weights)
    x0 = data.points[idx]
    noise = sample_states_at_times(params, np.asarray(sched.g(times), dtype=float), n, seed.spawn(1), jobs)
    clouds = [np.asarray(sched.f(t)) * x0 + noise[k] for k, t in enumerate(times)]
    product = data.points.shape[0] == 1
    report = TimeLipschitzReport(gating=product and data.max_abs == 0.0)
    worst = -np.inf
    for i, j in itertools.combinations_with_replacement(range(times.size), 2):
        s, t = float(times[i]), float(times[j])
        c_eff = effective_speed(params, sched, data, s, t)
        bound = bound_scale * c_eff * np.sqrt(params.d) * abs(t - s)
        value, stderr = (0.0, 0.0) if i == j else _coupled_w2(clouds[i], clouds[j], product)
        slack = bound * (1.0 + REL_SLACK) + SIGMA_SLACK * stderr - value
        report.pairs.append({'s': s, 't': t, 'w2': value, 'stderr': stderr, 'c_eff': c_eff, 'bound': bound,
                             'passed': bool(slack >= 0)})
        worst = max(worst, -slack)
    report.max_slack = float(worst)
    report.passed = all(p['passed'] for p in report.pairs)
    if not report.passed:
        logger.warning(f'W2 time-Lipschitz bound violated by up to {worst:.4g}')
    return report


@dataclass(frozen=True)
class ConeAudit:
    violations: int
    max_excess: float
    checked: int

    def as_dict(self) -> dict:
        return {'violations': self.violations, 'max_excess': self.max_excess, 'checked': self.checked}


def cone_audit(trajectories, data: Dataset, params: KacParams, sched: Schedule, sources=None) -> ConeAudit:
    """Count node states outside the time-t support by more than 1e-9 c.

    ``sources`` gives, per row, the index of the conditioning data point; otherwise a state
    is audited against the nearest box of the mixture support.
    """
    if not isinstance(trajectories, (list, tuple)):
        trajectories = [trajectories]
    tol = CONE_TOL * params.c
    violations, checked, worst = 0, 0, 0.0
    for traj in trajectories:
        for t, x in zip(traj.nodes, traj.states):
            t = float(t)
            x = np.atleast_2d(x)
            centers = np.asarray(sched.f(t)) * data.points
            edge = params.c * float(sched.g(t))
            if sources is not None:
                excess = np.max(np.abs(x - centers[np.asarray(sources)]), axis=1) - edge
            else:
                excess = np.min(np.max(np.abs(x[:, None, :] - centers[None, :, :]), axis=2), axis=1) - edge
            violations += int(np.sum(excess > tol))
            checked += x.shape[0]
            worst = max(worst, float(np.max(excess)))
    if violations:
        logger.warning(f'{violations} of {checked} states outside the support (max excess {worst:.3g})')
    return ConeAudit(violations=violations, max_excess=max(worst, 0.0), checked=checked)


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    h: float
    flagged: tuple = ()

    @property
    def finite(self) -> bool:
        return not self.flagged and np.isfinite(self.value)


def _difference_quotients(field, t, points, dirs, h, label):
    n, k, d = dirs.shape
    plus = (points[:, None, :] + h * dirs).reshape(-1, d)
    minus = (points[:, None, :] - h * dirs).reshape(-1, d)
    row_label = None if label is None else np.repeat(np.broadcast_to(np.asarray(label), (n,)), k)
    diff = field.evaluate(t, plus, row_label) - field.evaluate(t, minus, row_label)
    return (np.linalg.norm(diff, axis=1) / (2.0 * h)).reshape(n, k)


def estimate_lipschitz(field, tube, t: float, h: float = 1e-4, seed: SeedSpec | None = None,
                       n_directions: int = 8, label=None) -> LipschitzEstimate:
    """Max over tube points of central-difference directional derivative norms."""
    if h <= 0:
        raise ParameterError(f'h must be > 0, got {h}')
    points = _as_cloud(tube).values
    if points.shape[0] == 0:
        raise ParameterError('tube must be nonempty')
    dirs = (seed or SeedSpec(0)).generator().standard_normal((points.shape[0], n_directions, points.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    try:
        quotients = _difference_quotients(field, t, points, dirs, h, label)
    except DomainError:
        quotients = np.full((points.shape[0], n_directions), np.nan)
        for i in range(points.shape[0]):
            try:
                quotients[i] = _difference_quotients(field, t, points[i:i + 1], dirs[i:i + 1], h,
                                                     None if label is None else np.atleast_1d(label)[:1])[0]
            except DomainError:
                pass
    bad = ~np.all(np.isfinite(quotients), axis=1)
    flagged = tuple((float(t), tuple(points[i].tolist())) for i in np.flatnonzero(bad))
    if flagged:
        logger.warning(f'{len(flagged)} tube points with non-finite difference quotients at t={t:.4f}')
    finite = quotients[~bad]
    value = float(np.max(finite)) if finite.size else float('nan')
    return LipschitzEstimate(value=value, h=h, flagged=flagged)


@dataclass(frozen=True)
class LemmaReport:
    instances: int
    contraction_failures: int
    coupling_failures: int
    worst_contraction_ratio: float
    worst_coupling_ratio: float

    @property
    def passed(self) -> bool:
        return self.contraction_failures == 0 and self.coupling_failures == 0

    def as_dict(self) -> dict:
        return {'instances': self.instances, 'contraction_failures': self.contraction_failures,
                'coupling_failures': self.coupling_failures, 'worst_contraction_ratio': self.worst_contraction_ratio,
                'worst_coupling_ratio': self.worst_coupling_ratio, 'passed': self.passed}


def lemma_pushforward_check(n_instances: int = 200, max_atoms: int = 6, seed: SeedSpec | None = None,
                            atol: float = 1e-12) -> LemmaReport:
    """Randomized brute-force check of pushforward contraction and the coupling bound.

    F(x) = A x + beta sin(x) has Lip(F) <= |A|_2 + |beta|; G = F + gamma cos(x).
    """
    if not 2 <= max_atoms <= ASSIGNMENT_MAX_ATOMS:
        raise ParameterError(f'max_atoms must lie in [2, {ASSIGNMENT_MAX_ATOMS}]')
    seed = seed or SeedSpec(0)
    contraction_failures = coupling_failures = 0
    worst_contraction = worst_coupling = 0.0
    for k in range(n_instances):
        rng = seed.spawn(k).generator()
        n = int(rng.integers(2, max_atoms + 1))
        d = int(rng.integers(1, 3))
        mu, nu = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        A = rng.normal(size=(d, d))
        beta, gamma = rng.uniform(-1.0, 1.0, size=2)

        def push_f(x):
            return x @ A.T + beta * np.sin(x)

        def push_g(x):
            return push_f(x) + gamma * np.cos(x)

        lip = float(np.linalg.norm(A, 2) + abs(beta))
        lhs = w2_assignment(push_f(mu), push_f(nu)).value
        rhs = lip * w2_assignment(mu, nu).value
        if lhs > rhs + atol:
            contraction_failures += 1
        if rhs > 0:
            worst_contraction = max(worst_contraction, lhs / rhs)
        lhs = w2_assignment(push_f(nu), push_g(nu)).value
        rhs = float(np.sqrt(np.mean(np.sum((push_f(nu) - push_g(nu)) ** 2, axis=1))))
        if lhs > rhs + atol:
            coupling_failures += 1
        if rhs > 0:
            worst_coupling = max(worst_coupling, lhs / rhs)
    report = LemmaReport(n_instances, contraction_failures, coupling_failures, worst_contraction, worst_coupling)
    logger.info(f'pushforward lemma check: {report.as_dict()}')
    return report
