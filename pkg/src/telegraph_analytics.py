"""Closed-form 1-D telegraph law.

At time t > 0 the Kac state started at 0 has two boundary atoms of mass e^{-at}/2 at
+-ct and an absolutely continuous interior part

    p(t, x) = (a / 2c) e^{-at} [ I0(z) + (ct / r) I1(z) ],   r = sqrt(c^2 t^2 - x^2),  z = a r / c,

with signed probability flux F(t, x) = (a x / 2r) e^{-at} I1(z), which satisfies
dp/dt + dF/dx = 0 inside the cone. Every formula below is written with the
exponentially scaled Bessel functions e^{-z} I_n(z) so that arguments up to a*t ~ 1e4
stay finite.
"""
import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator
from scipy.special import i0e, i1e

from config.logging_config import get_logger
from src.exceptions import ConsistencyError, DegenerateLawError, DomainError, ParameterError
from src.kac_core import KacParams, SeedSpec

logger = get_logger(__name__)

QUANTILE_NODES = 4096
QUANTILE_SPREAD = 12.0
CDF_RTOL = 1e-13
ATOM_RTOL = 1e-12


@dataclass(frozen=True)
class BesselEval:
    order: int
    argument: float

    def __post_init__(self):
        if self.order not in (0, 1):
            raise ParameterError(f'only orders 0 and 1 are supported, got {self.order}')
        if not np.isfinite(self.argument) or self.argument < 0:
            raise DomainError(f'Bessel argument must be finite and nonnegative, got {self.argument}')

    def scaled(self) -> float:
        """e^{-z} I_order(z)."""
        return float(scaled_bessel(self.order, self.argument))

    def value(self) -> float:
        """I_order(z); overflows to inf beyond z ~ 713."""
        with np.errstate(over='ignore'):
            return float(np.exp(self.argument) * self.scaled())


def scaled_bessel(order: int, z):
    z = np.asarray(z, dtype=float)
    return i0e(z) if order == 0 else i1e(z)


def second_moment(a: float, c: float, t: float) -> float:
    """E[X(t)^2] = (c^2 / a) (t - (1 - e^{-2at}) / (2a)), atoms included."""
    return float((c ** 2 / a) * (t + np.expm1(-2.0 * a * t) / (2.0 * a)))


def _increasing_nodes(cdf: np.ndarray, tol: float) -> np.ndarray:
    """Indices of a subsequence of ``cdf`` whose steps all exceed ``tol``; keeps both ends."""
    keep = [0]
    for i in range(1, cdf.size - 1):
        if cdf[i] - cdf[keep[-1]] > tol:
            keep.append(i)
    if cdf[-1] - cdf[keep[-1]] <= tol and len(keep) > 1:
        keep.pop()
    keep.append(cdf.size - 1)
    return np.asarray(keep)


def _scaled_i1_over_z(zeta: np.ndarray) -> np.ndarray:
    """e^{-z} I1(z) / z with the removable singularity at 0 filled in."""
    small = zeta < 1e-6
    safe = np.where(small, 1.0, zeta)
    return np.where(small, 0.5 * np.exp(-zeta), i1e(safe) / safe)


def _interior(a: float, c: float, s: float, z: np.ndarray):
    edge = c * s
    r = np.sqrt(np.clip((edge - z) * (edge + z), 0.0, None))
    zeta = a * r / c
    return zeta, i0e(zeta), _scaled_i1_over_z(zeta)


def telegraph_velocity(a: float, c: float, s, z) -> np.ndarray:
    """Base Kac velocity F/p at clock ``s`` (broadcast against ``z``).

    +-c on the atoms |z| = c s, 0 at s = 0; raises ``DomainError`` beyond the cone.
    """
    z = np.asarray(z, dtype=float)
    s = np.broadcast_to(np.asarray(s, dtype=float), z.shape)
    edge = c * s
    gap = edge - np.abs(z)
    if np.any(gap < -ATOM_RTOL * edge) or np.any((s <= 0) & (z != 0)):
        raise DomainError(f'state outside the cone |z| <= c*s: max excess {np.max(-gap)}')
    on_atom = (np.abs(gap) <= ATOM_RTOL * edge) & (s > 0)
    _, i0, h = _interior(a, c, s, z)
    interior = a * z * h / (i0 + a * s * h)
    return np.where(s <= 0, 0.0, np.where(on_atom, np.sign(z) * c, interior))


def log_interior_density(a: float, c: float, s, z) -> np.ndarray:
    """log p(s, z) for the AC part; -inf outside the open cone."""
    z = np.asarray(z, dtype=float)
    edge = c * np.asarray(s, dtype=float)
    inside = np.abs(z) < edge
    zeta, i0, h = _interior(a, c, s, np.where(inside, z, 0.0))
    with np.errstate(divide='ignore'):
        value = np.log(a / (2.0 * c)) + zeta - a * s + np.log(i0 + a * s * h)
    return np.where(inside, value, -np.inf)


class StateDensity1D:
    """Telegraph law at a fixed time t > 0. Immutable; the quantile table is built lazily."""

    def __init__(self, params: KacParams, t: float):
        if params.d != 1:
            raise ParameterError(f'the analytic law is one-dimensional, got d={params.d}')
        if not np.isfinite(t) or t <= 0:
            logger.error(f'analytic law requested at t={t}')
            raise DegenerateLawError(f'the law at t={t} is a point mass; special-case t = 0')
        self.params = params
        self.t = float(t)
        self.edge = params.c * self.t
        self.atom_weight = 0.5 * np.exp(-params.a * self.t)
        self._quantile = None
        self._lock = threading.Lock()

    @property
    def interior_mass(self) -> float:
        return float(-np.expm1(-self.params.a * self.t))

    def on_atom(self, x) -> np.ndarray:
        return np.abs(np.abs(np.asarray(x, dtype=float)) - self.edge) <= ATOM_RTOL * self.edge

    def ac_density(self, x) -> np.ndarray:
        return np.exp(log_interior_density(self.params.a, self.params.c, self.t, x))

    def ac_flux(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(np.abs(x) >= self.edge):
            raise DomainError(f'flux is defined on the open cone |x| < {self.edge}; atoms carry flux +-c*atom_weight')
        a, c = self.params.a, self.params.c
        zeta, _, h = _interior(a, c, self.t, x)
        return (a * a * x / (2.0 * c)) * h * np.exp(zeta - a * self.t)

    def velocity(self, x) -> np.ndarray:
        return telegraph_velocity(self.params.a, self.params.c, self.t, x)

    def density_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.where(self.on_atom(x), self.atom_weight, self.ac_density(x))

    def total_mass(self) -> float:
        interior, _ = integrate.quad(self.ac_density, -self.edge, self.edge, points=[0.0],
                                     epsabs=1e-12, epsrel=1e-10, limit=500)
        return 2.0 * self.atom_weight + interior

    @property
    def table_half_width(self) -> float:
        """Half-width of the quantile grid: the cone, or QUANTILE_SPREAD interior sd when that is narrower."""
        atoms = 2.0 * self.atom_weight * self.edge ** 2
        variance = max(second_moment(self.params.a, self.params.c, self.t) - atoms, 0.0) / self.interior_mass
        return float(min(self.edge, QUANTILE_SPREAD * np.sqrt(variance)))

    def _build_quantile(self) -> PchipInterpolator:
        half = self.table_half_width
        nodes = np.linspace(-half, half, QUANTILE_NODES)
        inner = np.nextafter(self.edge, 0.0)
        density = np.exp(log_interior_density(self.params.a, self.params.c, self.t, np.clip(nodes, -inner, inner)))
        cdf = integrate.cumulative_trapezoid(density, nodes, initial=0.0)
        if not np.all(np.isfinite(cdf)) or np.any(np.diff(cdf) < 0) or cdf[-1] <= 0:
            logger.error(f'non-monotone CDF table at t={self.t}')
            raise ConsistencyError(f'CDF table for a={self.params.a}, c={self.params.c}, t={self.t} is not monotone')
        if abs(cdf[-1] - self.interior_mass) > 1e-3 * self.interior_mass:
            logger.warning(f'quantile table mass {cdf[-1]:.6g} vs interior mass {self.interior_mass:.6g}')
        cdf = cdf / cdf[-1]
        keep = _increasing_nodes(cdf, CDF_RTOL)
        logger.debug(f'quantile table at t={self.t}: {keep.size} nodes on [-{half:.4g}, {half:.4g}]')
        return PchipInterpolator(cdf[keep], nodes[keep])

    def quantile(self, u) -> np.ndarray:
        """Inverse CDF of the interior part, u in [0, 1]."""
        if self._quantile is None:
            with self._lock:
                if self._quantile is None:
                    self._quantile = self._build_quantile()
        x = self._quantile(np.asarray(u, dtype=float))
        bound = self.edge * (1.0 - 1e-9)
        return np.clip(x, -bound, bound)

    def law_quantile(self, u) -> np.ndarray:
        """Inverse CDF of the full law: the left atom below u = w, the right atom above 1 - w."""
        u = np.asarray(u, dtype=float)
        w = self.atom_weight
        inner = self.quantile(np.clip((u - w) / (1.0 - 2.0 * w), 0.0, 1.0))
        return np.where(u < w, -self.edge, np.where(u > 1.0 - w, self.edge, inner))

    def sample(self, n: int, seed: SeedSpec) -> np.ndarray:
        if n < 1:
            raise DomainError(f'sample count must be >= 1, got {n}')
        rng = seed.generator()
        pick = rng.uniform(size=n)
        signs = 2.0 * rng.integers(0, 2, size=n) - 1.0
        interior = self.quantile(rng.uniform(size=n))
        return np.where(pick < 2.0 * self.atom_weight, signs * self.edge, interior)


@lru_cache(maxsize=512)
def state_law(params: KacParams, t: float) -> StateDensity1D:
    return StateDensity1D(params, float(t))


def density_at(params: KacParams, t: float, x):
    return state_law(params, t).density_at(x)


def flux_at(params: KacParams, t: float, x):
    return state_law(params, t).ac_flux(x)


def flux_by_integration(params: KacParams, t: float, x: float, h: float = 1e-5) -> float:
    """F(t, x) = -int_0^x dp/dt dy, the numerical counterpart of ``flux_at``."""
    if abs(x) >= params.c * (t - h):
        raise DomainError('x too close to the cone for the finite-difference flux')

    def dp_dt(y):
        return (state_law(params, t + h).ac_density(y) - state_law(params, t - h).ac_density(y)) / (2.0 * h)

    value, _ = integrate.quad(dp_dt, 0.0, x, epsabs=1e-12, epsrel=1e-10, limit=200)
    return -value


def sample_exact(params: KacParams, t, n: int, seed: SeedSpec) -> np.ndarray:
    """Exact draws of X(t) from the analytic law.

    A scalar ``t`` inverts the cached quantile table of ``state_law``. An array of ``n``
    times (one clock per draw, zeros allowed) uses the law given the reversal count N:
    with N ~ Poisson(a t) the time spent in the initial direction is a sum of
    floor(N / 2) + 1 of the N + 1 uniform spacings, so X = sign * c t (2B - 1) with
    B ~ Beta(floor(N / 2) + 1, N - floor(N / 2)), and N = 0 is the atom at sign * c t.
    """
    if np.ndim(t) == 0:
        return state_law(params, t).sample(n, seed)
    if params.d != 1:
        raise ParameterError(f'the analytic law is one-dimensional, got d={params.d}')
    t = np.asarray(t, dtype=float)
    if t.shape != (n,):
        raise ParameterError(f'need one time per draw: got shape {t.shape} for n={n}')
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise DomainError('sample times must be finite and nonnegative')
    rng = seed.generator()
    counts = rng.poisson(params.a * t)
    signs = 2.0 * rng.integers(0, 2, size=n) - 1.0
    forward = counts // 2 + 1
    moving = counts > 0
    share = np.ones(n)
    share[moving] = rng.beta(forward[moving], (counts - forward + 1)[moving])
    return signs * params.c * t * (2.0 * share - 1.0)


def continuity_residual(params: KacParams, times, fractions, h: float = 1e-4) -> dict:
    """Max of |dp/dt + dF/dx| on a (t, x = fraction * c t) grid, by centered differences."""
    times = np.asarray(times, dtype=float)
    fractions = np.asarray(fractions, dtype=float)
    worst, peak = 0.0, 0.0
    for t in times:
        x = fractions * params.c * t
        dp_dt = (state_law(params, t + h).ac_density(x) - state_law(params, t - h).ac_density(x)) / (2.0 * h)
        law = state_law(params, t)
        dF_dx = (law.ac_flux(x + h) - law.ac_flux(x - h)) / (2.0 * h)
        worst = max(worst, float(np.max(np.abs(dp_dt + dF_dx))))
        peak = max(peak, float(np.max(law.ac_density(x))))
    return {'max_residual': worst, 'max_density': peak, 'ratio': worst / peak}
