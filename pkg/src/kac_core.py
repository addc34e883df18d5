"""Kac (telegraph) process simulation.

A 1-D Kac particle moves at speed ``c`` and reverses direction at the events of a
Poisson(a) process; the initial direction is a fair sign. A d-dimensional state is
the component-wise product of independent 1-D paths. The mean-reverting process
``M_t = f(t) X0 + K_{g(t)}`` interpolates data (t=0) and pure Kac noise (t=1).
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator

from config.logging_config import get_logger
from src.exceptions import ConsistencyError, DomainError, ParameterError

logger = get_logger(__name__)

CHUNK_SIZE = 1 << 16
_SEED_LIMIT = 1 << 64


@dataclass(frozen=True)
class KacParams:
    a: float
    c: float
    d: int = 1

    def __post_init__(self):
        if not np.isfinite(self.a) or self.a <= 0:
            raise ParameterError(f'jump rate a must be positive and finite, got {self.a}')
        if not np.isfinite(self.c) or self.c <= 0:
            raise ParameterError(f'wave speed c must be positive and finite, got {self.c}')
        if int(self.d) != self.d or self.d < 1:
            raise ParameterError(f'dimension d must be a positive integer, got {self.d}')
        object.__setattr__(self, 'd', int(self.d))

    @property
    def xi(self) -> float:
        """Damping coefficient of the damped wave equation, ``xi = 2a``."""
        return 2.0 * self.a

    def with_dimension(self, d: int) -> 'KacParams':
        return replace(self, d=d)

    def describe(self) -> dict:
        return {'a': float(self.a), 'c': float(self.c), 'd': int(self.d)}


@dataclass(frozen=True)
class SeedSpec:
    """Reproducible random stream addressed by ``(master_seed, stream_id, substream...)``.

    Streams are Philox counter-based generators keyed through ``SeedSequence`` spawn keys,
    so distinct addresses give independent streams and equal addresses give equal bytes.
    """
    master_seed: int
    stream_id: int = 0
    substream: tuple = field(default=())

    def __post_init__(self):
        for name, value in (('master_seed', self.master_seed), ('stream_id', self.stream_id)):
            if int(value) != value or not 0 <= value < _SEED_LIMIT:
                raise ParameterError(f'{name} must be a 64-bit unsigned integer, got {value}')

    def spawn(self, *keys: int) -> 'SeedSpec':
        return replace(self, substream=self.substream + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(self.stream_id), *self.substream))
        return np.random.Generator(np.random.Philox(sequence))


class Schedule:
    """Time warps ``f`` (data weight) and ``g`` (noise clock) of the mean-reverting process.

    Boundary values are enforced exactly: f(0)=1, f(1)=0, g(0)=0, g(1)=1, and g must be
    nondecreasing on [0, 1].
    """

    KINDS = ('linear', 'quadratic', 'tabulated')

    def __init__(self, kind: str, f: Callable, g: Callable, df: Callable, dg: Callable, nodes=None):
        if kind not in self.KINDS:
            raise ParameterError(f'Unsupported schedule kind: {kind}')
        self.kind = kind
        self._f, self._g, self._df, self._dg = f, g, df, dg
        self.nodes = nodes
        self._validate()

    @classmethod
    def linear(cls) -> 'Schedule':
        return cls('linear',
                   f=lambda t: 1.0 - t,
                   g=lambda t: t,
                   df=lambda t: -np.ones_like(t),
                   dg=lambda t: np.ones_like(t))

    @classmethod
    def quadratic(cls) -> 'Schedule':
        return cls('quadratic',
                   f=lambda t: 1.0 - t,
                   g=lambda t: t * t,
                   df=lambda t: -np.ones_like(t),
                   dg=lambda t: 2.0 * t)

    @classmethod
    def tabulated(cls, times, f_values, g_values) -> 'Schedule':
        times = np.asarray(times, dtype=float)
        f_values = np.asarray(f_values, dtype=float)
        g_values = np.asarray(g_values, dtype=float)
        if times.ndim != 1 or times.size < 2 or times.shape != f_values.shape or times.shape != g_values.shape:
            raise ParameterError('tabulated schedule needs three equal-length 1-D node arrays')
        if times[0] != 0.0 or times[-1] != 1.0 or np.any(np.diff(times) <= 0):
            raise ParameterError('tabulated schedule nodes must increase strictly from 0 to 1')
        f_interp = PchipInterpolator(times, f_values)
        g_interp = PchipInterpolator(times, g_values)
        df_interp, dg_interp = f_interp.derivative(), g_interp.derivative()

        def pinned(interp, values):
            def evaluate(t):
                t = np.asarray(t, dtype=float)
                out = np.where(t == 0.0, values[0], np.where(t == 1.0, values[-1], interp(t)))
                return out if out.ndim else float(out)
            return evaluate

        nodes = {'times': times.tolist(), 'f': f_values.tolist(), 'g': g_values.tolist()}
        return cls('tabulated', pinned(f_interp, f_values), pinned(g_interp, g_values),
                   df_interp, dg_interp, nodes=nodes)

    @classmethod
    def from_name(cls, kind: str, nodes: dict | None = None) -> 'Schedule':
        if kind == 'linear':
            return cls.linear()
        if kind == 'quadratic':
            return cls.quadratic()
        if kind == 'tabulated':
            if not nodes:
                raise ParameterError('tabulated schedule requires nodes')
            return cls.tabulated(nodes['times'], nodes['f'], nodes['g'])
        raise ParameterError(f'Unsupported schedule kind: {kind}')

    def _validate(self):
        if self.f(0.0) != 1.0:
            raise ParameterError(f'schedule f(0) must equal 1, got {self.f(0.0)}')
        if self.f(1.0) != 0.0:
            raise ParameterError(f'schedule f(1) must equal 0, got {self.f(1.0)}')
        if self.g(0.0) != 0.0 or self.g(1.0) != 1.0:
            raise ParameterError(f'schedule g must satisfy g(0)=0 and g(1)=1, got {self.g(0.0)}, {self.g(1.0)}')
        grid = np.linspace(0.0, 1.0, 1001)
        if np.any(np.diff(self.g(grid)) < 0):
            raise ParameterError('schedule g must be nondecreasing on [0, 1]')

    def f(self, t):
        return self._f(np.asarray(t, dtype=float)) if np.ndim(t) else float(self._f(float(t)))

    def g(self, t):
        return self._g(np.asarray(t, dtype=float)) if np.ndim(t) else float(self._g(float(t)))

    def df(self, t):
        out = self._df(np.asarray(t, dtype=float))
        return out if np.ndim(t) else float(out)

    def dg(self, t):
        out = self._dg(np.asarray(t, dtype=float))
        return out if np.ndim(t) else float(out)

    def describe(self) -> dict:
        return {'kind': self.kind, 'nodes': self.nodes}

    def __repr__(self):
        return f'Schedule(kind={self.kind!r})'


@dataclass(frozen=True, eq=False)
class KacPath:
    """Lazily evaluated piecewise-linear path; stores jump times only."""
    c: float
    t_end: float
    jump_times: tuple
    initial_directions: np.ndarray

    @property
    def dimension(self) -> int:
        return len(self.jump_times)

    @property
    def jump_count(self) -> int:
        return int(sum(times.size for times in self.jump_times))

    def directions(self, coord: int = 0) -> np.ndarray:
        """Direction of every segment of one coordinate, values in {-1, +1}."""
        n = self.jump_times[coord].size
        return self.initial_directions[coord] * (1 - 2 * (np.arange(n + 1) & 1))

    def positions(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(times < 0) or np.any(times > self.t_end):
            raise DomainError(f'path evaluated outside [0, {self.t_end}]')
        out = np.empty((times.size, self.dimension))
        for i, jumps in enumerate(self.jump_times):
            breaks = np.concatenate(([0.0], jumps))
            dirs = self.directions(i)
            # positions at the start of every segment
            anchors = np.concatenate(([0.0], np.cumsum(self.c * dirs[:-1] * np.diff(breaks))))
            k = np.searchsorted(jumps, times, side='right')
            out[:, i] = anchors[k] + self.c * dirs[k] * (times - breaks[k])
        cone = (self.c * times)[:, None]
        return np.clip(out, -cone, cone)

    def position(self, t: float) -> np.ndarray:
        return self.positions([t])[0]


def _check_time(t: float, name: str = 't'):
    if not np.isfinite(t) or t < 0:
        raise DomainError(f'{name} must be a finite nonnegative time, got {t}')


def sample_path(params: KacParams, t_end: float, seed: SeedSpec) -> KacPath:
    _check_time(t_end, 't_end')
    rng = seed.generator()
    jump_times, initial = [], []
    for _ in range(params.d):
        initial.append(2 * int(rng.integers(0, 2)) - 1)
        n = rng.poisson(params.a * t_end)
        jump_times.append(np.sort(rng.uniform(0.0, t_end, size=n)))
    return KacPath(c=params.c, t_end=float(t_end), jump_times=tuple(jump_times),
                   initial_directions=np.asarray(initial, dtype=int))


def sample_path_conditioned(params: KacParams, t_end: float, seed: SeedSpec, n_jumps: int = 0,
                            max_tries: int = 100_000) -> KacPath:
    """Rejection sampler for a path with exactly ``n_jumps`` events in total."""
    for attempt in range(max_tries):
        path = sample_path(params, t_end, seed.spawn(attempt))
        if path.jump_count == n_jumps:
            return path
    logger.error(f'No path with {n_jumps} jumps after {max_tries} tries')
    raise ConsistencyError(f'conditioning on {n_jumps} jumps failed after {max_tries} tries')


def _telegraph_chunk(rng: np.random.Generator, a: float, c: float, horizons: np.ndarray, eval_times=None):
    """States of independent 1-D paths, one per horizon.

    With ``eval_times`` given, every path is simulated up to its horizon and evaluated at
    each of the times (all <= horizon), giving states coupled across times.
    """
    m = horizons.size
    directions = 2 * rng.integers(0, 2, size=m) - 1
    counts = rng.poisson(a * horizons)
    owner = np.repeat(np.arange(m), counts)
    jumps = rng.uniform(0.0, 1.0, size=owner.size) * horizons[owner]
    jumps = jumps[np.lexsort((jumps, owner))]
    starts = np.cumsum(counts) - counts
    rank = np.arange(owner.size) - np.repeat(starts, counts)
    parity = 1.0 - 2.0 * (rank & 1)

    def state_at(times):
        elapsed = np.clip(times[owner] - jumps, 0.0, None)
        reversal = np.bincount(owner, weights=parity * elapsed, minlength=m)
        x = c * directions * (times - 2.0 * reversal)
        return np.clip(x, -c * times, c * times)

    if eval_times is None:
        return state_at(horizons), counts
    return np.stack([state_at(np.full(m, tau)) for tau in eval_times]), counts


def _run_chunks(n: int, seed: SeedSpec, d: int, work: Callable, jobs: int):
    tasks = [(i, k, start, min(start + CHUNK_SIZE, n))
             for i in range(d) for k, start in enumerate(range(0, n, CHUNK_SIZE))]

    def run(task):
        i, k, start, stop = task
        return task, work(seed.spawn(i, k).generator(), start, stop)

    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, tasks))
    return [run(task) for task in tasks]


def sample_state_with_counts(params: KacParams, t, n: int, seed: SeedSpec, jobs: int = 1):
    """``n`` i.i.d. states X(t) (shape ``(n, d)``) and per-coordinate jump counts.

    ``t`` may be a scalar or a length-``n`` array of per-sample times.
    """
    if n < 1:
        raise DomainError(f'sample count must be >= 1, got {n}')
    times = np.broadcast_to(np.asarray(t, dtype=float), (n,)).astype(float)
    if not np.all(np.isfinite(times)) or np.any(times < 0):
        raise DomainError('sample times must be finite and nonnegative')
    states = np.zeros((n, params.d))
    counts = np.zeros((n, params.d), dtype=np.int64)
    for (i, _, start, stop), (x, k) in _run_chunks(
            n, seed, params.d, lambda rng, lo, hi: _telegraph_chunk(rng, params.a, params.c, times[lo:hi]), jobs):
        states[start:stop, i] = x
        counts[start:stop, i] = k
    logger.debug(f'sampled {n} Kac states in d={params.d}')
    return states, counts


def sample_state(params: KacParams, t, n: int, seed: SeedSpec, jobs: int = 1) -> np.ndarray:
    if np.ndim(t) == 0:
        _check_time(float(t))
        if t == 0:
            if n < 1:
                raise DomainError(f'sample count must be >= 1, got {n}')
            return np.zeros((n, params.d))
    return sample_state_with_counts(params, t, n, seed, jobs)[0]


def sample_states_at_times(params: KacParams, times, n: int, seed: SeedSpec, jobs: int = 1,
                           return_counts: bool = False):
    """States of the same ``n`` paths at every time in ``times``; shape ``(len(times), n, d)``.

    With ``return_counts`` the per-coordinate jump counts up to ``max(times)`` are returned too.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise DomainError('times must be a nonempty 1-D sequence')
    for tau in times:
        _check_time(tau)
    if n < 1:
        raise DomainError(f'sample count must be >= 1, got {n}')
    horizon = float(times.max())
    out = np.zeros((times.size, n, params.d))
    counts = np.zeros((n, params.d), dtype=np.int64)

    def work(rng, lo, hi):
        return _telegraph_chunk(rng, params.a, params.c, np.full(hi - lo, horizon), eval_times=times)

    for (i, _, start, stop), (block, k) in _run_chunks(n, seed, params.d, work, jobs):
        out[:, start:stop, i] = block
        counts[start:stop, i] = k
    return (out, counts) if return_counts else out


def _check_unit_time(t):
    t_arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t_arr)) or np.any(t_arr < 0) or np.any(t_arr > 1):
        logger.error(f'mean-reverting time outside [0, 1]: {t}')
        raise DomainError(f'time must lie in [0, 1], got {t}')


def sample_mean_reverting(params: KacParams, sched: Schedule, x0, t: float, seed: SeedSpec) -> np.ndarray:
    _check_unit_time(t)
    x0 = np.asarray(x0, dtype=float).reshape(params.d)
    if not np.all(np.isfinite(x0)):
        raise DomainError('data point must be finite')
    noise = sample_state(params, sched.g(t), 1, seed)[0]
    return sched.f(t) * x0 + noise


def sample_mean_reverting_batch(params: KacParams, sched: Schedule, x0s, t, seed: SeedSpec,
                                jobs: int = 1) -> np.ndarray:
    """``f(t) x0 + K_{g(t)}`` for every row of ``x0s``; ``t`` scalar or one time per row."""
    x0s = np.asarray(x0s, dtype=float).reshape(-1, params.d)
    _check_unit_time(t)
    if not np.all(np.isfinite(x0s)):
        raise DomainError('data points must be finite')
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), (x0s.shape[0],))
    s = np.asarray(sched.g(t_arr), dtype=float)
    noise = sample_state_with_counts(params, s, x0s.shape[0], seed, jobs)[0]
    return np.asarray(sched.f(t_arr), dtype=float)[:, None] * x0s + noise
