import logging
import math
import threading
from concurrent.futures import Future
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline, RegularGridInterpolator
from scipy.optimize import brentq, minimize, minimize_scalar

from config import settings
from errors import RateInvariantError
from hamiltonian import HamiltonianSurface, build_surface, grad_h
from model import SystemSpec, as_batch

logger = logging.getLogger(__name__)

INF = math.inf


@dataclass
class AdjointResult:
    value: float
    beta_star: np.ndarray
    on_boundary: bool = False
    warnings: List[str] = field(default_factory=list)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


@dataclass
class DomainBox:
    directions: np.ndarray
    m: np.ndarray
    M: np.ndarray
    degenerate: np.ndarray

    def contains(self, alpha: np.ndarray, tol: Optional[float] = None) -> bool:
        """Strictly inside on nondegenerate directions, on the single value otherwise."""
        tol = settings.DEGENERATE_TOL if tol is None else tol
        projections = self.directions @ np.asarray(alpha, dtype=float)
        for p, lo, hi, flat in zip(projections, self.m, self.M, self.degenerate):
            if flat:
                if abs(p - hi) > tol:
                    return False
            elif not lo < p < hi:
                return False
        return True


def default_directions(dim: int) -> np.ndarray:
    """Coordinate axes, plus the normalised diagonals when dim > 1."""
    directions = [np.eye(dim)[k] for k in range(dim)]
    for i, j in combinations(range(dim), 2):
        for sign in (1.0, -1.0):
            v = np.zeros(dim)
            v[i], v[j] = 1.0, sign
            directions.append(v / math.sqrt(2.0))
    return np.array(directions)


def domain_box(spec: SystemSpec, x, directions: Optional[np.ndarray] = None,
               grid_n: Optional[int] = None) -> DomainBox:
    """Per-direction range [m_v, M_v] of v . f(x, .) by dense scan plus local refinement."""
    grid_n = grid_n or settings.DOMAIN_GRID_N
    if grid_n < 32:
        raise ValueError(f"grid_n must be >= 32, got {grid_n}")
    directions = default_directions(spec.dim_slow) if directions is None else np.atleast_2d(directions)
    l = spec.dim_fast
    n_axis = min(grid_n, max(32, int(2_000_000 ** (1.0 / l))))
    axes = spec.geometry.grid(n_axis)
    points = np.column_stack([m.ravel() for m in np.meshgrid(*axes, indexing='ij')])
    x_row = as_batch(x, spec.dim_slow)[:1]
    values = spec.f(np.repeat(x_row, len(points), axis=0), points)
    h = spec.geometry.periods / n_axis

    def projected(v: np.ndarray, sign: float):
        def fn(y):
            y = np.atleast_2d(y)
            return sign * float((spec.f(x_row, y) @ v)[0])
        return fn

    def refine(v: np.ndarray, start: np.ndarray, sign: float) -> float:
        fn = projected(v, sign)
        if l == 1:
            res = minimize_scalar(lambda s: fn([s]), bounds=(start[0] - h[0], start[0] + h[0]),
                                  method='bounded', options={'xatol': 1e-12})
            return sign * float(res.fun)
        res = minimize(fn, start, method='L-BFGS-B',
                       bounds=list(zip(start - h, start + h)))
        return sign * float(res.fun)

    m_values, M_values = [], []
    for v in directions:
        proj = values @ v
        i_lo, i_hi = int(np.argmin(proj)), int(np.argmax(proj))
        lo = min(float(proj[i_lo]), refine(v, points[i_lo], 1.0))
        hi = max(float(proj[i_hi]), refine(v, points[i_hi], -1.0))
        m_values.append(lo)
        M_values.append(hi)

    m_arr, M_arr = np.array(m_values), np.array(M_values)
    degenerate = (M_arr - m_arr) < settings.DEGENERATE_TOL
    return DomainBox(directions=directions, m=m_arr, M=M_arr, degenerate=degenerate)


@lru_cache(maxsize=256)
def _cached_domain(spec: SystemSpec, x: Tuple[float, ...]) -> DomainBox:
    return domain_box(spec, np.array(x))


def surface_domain(surface: HamiltonianSurface) -> Optional[DomainBox]:
    """Domain box of f(x', .) for a spectral surface; synthetic surfaces have none."""
    if surface.spec is None:
        return None
    return _cached_domain(surface.spec, tuple(float(v) for v in surface.x_prime))


def _solver_tol(surface: HamiltonianSurface, solver_tol: Optional[float]) -> float:
    if solver_tol is not None:
        return solver_tol
    return settings.SYNTHETIC_SOLVER_TOL if surface.synthetic else settings.SPECTRAL_SOLVER_TOL


def _refine_1d(surface: HamiltonianSurface, alpha: float, b: float) -> Tuple[float, float]:
    axis = surface.axes[0]
    spline = CubicHermiteSpline(axis, surface.values, surface.gradients[:, 0])
    slope = spline.derivative()
    lo, hi = max(axis[0], -b), min(axis[-1], b)
    points = np.unique(np.concatenate([[lo, hi], axis[(axis > lo) & (axis < hi)]]))

    def excess(beta: float) -> float:
        return alpha - float(slope(beta))

    candidates = [lo, hi]
    signs = [excess(p) for p in points]
    candidates.extend(p for p, s in zip(points, signs) if s == 0.0)
    for (p0, s0), (p1, s1) in zip(zip(points, signs), zip(points[1:], signs[1:])):
        if s0 > 0 > s1:
            candidates.append(brentq(excess, p0, p1, xtol=1e-14))
    objectives = [alpha * c - float(spline(c)) for c in candidates]
    best = max(objectives)
    tied = [c for c, o in zip(candidates, objectives) if o >= best - 1e-14]
    beta = min(tied, key=abs)
    return float(beta), float(alpha * beta - spline(beta))


def _refine_nd(surface: HamiltonianSurface, alpha: np.ndarray, b: float,
               start: np.ndarray, tol: float) -> Tuple[np.ndarray, float]:
    values = RegularGridInterpolator(surface.axes, surface.values, method='linear')
    gradients = RegularGridInterpolator(surface.axes, surface.gradients, method='linear')
    bounds = surface.box

    def negative(beta):
        return -(float(alpha @ beta) - float(values(beta[None, :])[0]))

    def negative_jac(beta):
        return -(alpha - gradients(beta[None, :])[0])

    if math.isfinite(b):
        constraint = {'type': 'ineq', 'fun': lambda beta: b * b - float(beta @ beta),
                      'jac': lambda beta: -2.0 * beta}
        res = minimize(negative, start, jac=negative_jac, method='SLSQP', bounds=bounds,
                       constraints=[constraint], options={'ftol': tol * 1e-2, 'maxiter': 500})
    else:
        res = minimize(negative, start, jac=negative_jac, method='L-BFGS-B', bounds=bounds,
                       options={'ftol': tol * 1e-2, 'maxiter': 500})
    beta = np.clip(res.x, [lo for lo, _ in bounds], [hi for _, hi in bounds])
    if math.isfinite(b) and np.linalg.norm(beta) > b:
        beta = beta * (b / np.linalg.norm(beta))
    return beta, -negative(beta)


def legendre(surface: HamiltonianSurface, alpha, b: float = INF, solver_tol: Optional[float] = None,
             domain: Optional[DomainBox] = None, exact: bool = False) -> AdjointResult:
    """(Truncated) convex conjugate sup_{|beta| <= b} (alpha . beta - H(beta)).

    Outside the domain box with b = inf the value is +inf. Ties among grid
    maximisers resolve to the minimum-norm adjoint.
    """
    d = surface.dim
    alpha = as_batch(alpha, d)[0]
    if not b > 0:
        raise ValueError(f"truncation b must be positive, got {b}")
    tol = _solver_tol(surface, solver_tol)
    domain = domain if domain is not None else surface_domain(surface)
    if not math.isfinite(b) and domain is not None and not domain.contains(alpha):
        return AdjointResult(INF, np.full(d, np.nan), False)

    nodes = surface.beta_grid
    flat_values = surface.values.ravel()
    norms = np.sqrt(np.sum(nodes * nodes, axis=1))
    mask = norms <= b + 1e-12
    objective = np.where(mask, nodes @ alpha - flat_values, -INF)
    grid_best = float(objective.max())
    tied = np.flatnonzero(objective >= grid_best - tol)
    node = tied[np.argmin(norms[tied])]
    beta, value = nodes[node].copy(), float(objective[node])
    warnings: List[str] = []

    if d == 1:
        refined_beta, refined_value = _refine_1d(surface, float(alpha[0]), b)
        refined_beta = np.array([refined_beta])
    else:
        refined_beta, refined_value = _refine_nd(surface, alpha, b, beta, tol)

    if refined_value >= grid_best - tol:
        beta, value = refined_beta, refined_value
    else:
        message = (f"Interpolated surface not concave-maximisable at alpha={alpha.tolist()}; "
                   f"using grid argmax")
        logger.warning(message)
        warnings.append(message)

    if exact:
        value = float(alpha @ beta) - surface.exact_value(beta)

    if math.isfinite(b):
        on_boundary = bool(np.linalg.norm(beta) >= b - 1e-9)
    else:
        on_boundary = any(abs(beta[k] - lo) < 1e-12 or abs(beta[k] - hi) < 1e-12
                          for k, (lo, hi) in enumerate(surface.box))
        if on_boundary:
            message = (f"Maximiser for alpha={alpha.tolist()} sits on the surface box boundary; "
                       f"enlarge the beta box")
            logger.warning(message)
            warnings.append(message)
    return AdjointResult(max(value, 0.0), beta, on_boundary, warnings)


def truncation_gap(surface: HamiltonianSurface, alpha, b: float, **kwargs) -> float:
    """L - L^b, with +inf - finite = +inf."""
    full = legendre(surface, alpha, INF, **kwargs).value
    if not math.isfinite(full):
        return INF
    truncated = legendre(surface, alpha, b, **kwargs).value
    return max(full - truncated, 0.0)


@dataclass
class RateFunction:
    """L or L^b read off one Hamiltonian surface, with cached evaluations."""
    surface: HamiltonianSurface
    trunc_b: float = INF
    solver_tol: Optional[float] = None
    domain: Optional[DomainBox] = None
    exact_resolve: bool = False
    _cache: Dict[Tuple[float, ...], AdjointResult] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.trunc_b > 0:
            raise ValueError(f"trunc_b must be positive, got {self.trunc_b}")
        self.solver_tol = _solver_tol(self.surface, self.solver_tol)
        if self.domain is None:
            self.domain = surface_domain(self.surface)

    def evaluate(self, alpha) -> AdjointResult:
        key = tuple(float(a) for a in np.atleast_1d(alpha))
        result = self._cache.get(key)
        if result is None:
            result = legendre(self.surface, np.array(key), self.trunc_b, self.solver_tol,
                              self.domain, self.exact_resolve)
            self._cache[key] = result
        return result

    def __call__(self, alpha) -> float:
        return self.evaluate(alpha).value

    def rate_at(self, x) -> 'RateFunction':
        return self

    def averaged_drift(self, x=None) -> np.ndarray:
        return averaged_drift(self.surface, self)


def averaged_drift(surface: HamiltonianSurface, rate: Optional[RateFunction] = None) -> np.ndarray:
    """Zero-rate drift grad_beta H(x', x, 0); L vanishes there up to the solver tolerance."""
    alpha = surface.gradient_at_zero()
    rate = rate or RateFunction(surface)
    value = legendre(surface, alpha, INF, rate.solver_tol, rate.domain).value
    if not value <= rate.solver_tol:
        raise RateInvariantError(f"L(averaged drift {alpha.tolist()}) = {value:.3e} exceeds "
                                 f"solver tolerance {rate.solver_tol:.1e}")
    return alpha


@dataclass
class SlopeCheckEntry:
    direction: List[float]
    m: float
    M: float
    slope: float
    lower_margin: float
    upper_margin: float
    degenerate: bool
    ok: bool
    note: str = ''


@dataclass
class SlopeCheckReport:
    entries: List[SlopeCheckEntry]
    passed: bool
    skipped: bool


def interior_slope_check(surface: HamiltonianSurface, box: DomainBox) -> SlopeCheckReport:
    """Check m_v < v . grad H(0) < M_v on every nondegenerate direction."""
    gradient = surface.gradient_at_zero()
    entries = []
    for v, lo, hi, flat in zip(box.directions, box.m, box.M, box.degenerate):
        slope = float(v @ gradient)
        if flat:
            entries.append(SlopeCheckEntry(v.tolist(), float(lo), float(hi), slope, 0.0, 0.0,
                                           True, True, 'degenerate direction: card{f(x,.)}=1, check skipped'))
            continue
        lower, upper = slope - float(lo), float(hi) - slope
        ok = lower > 0 and upper > 0
        if not ok:
            logger.warning(f"Zero-rate drift slope {slope:.6g} not strictly inside "
                           f"({lo:.6g}, {hi:.6g}) along {v.tolist()}")
        entries.append(SlopeCheckEntry(v.tolist(), float(lo), float(hi), slope, lower, upper, False, ok))
    checked = [e for e in entries if not e.degenerate]
    return SlopeCheckReport(entries=entries, passed=all(e.ok for e in checked), skipped=not checked)


def recover_hamiltonian(alphas: np.ndarray, rates: np.ndarray, betas: np.ndarray) -> np.ndarray:
    """Discrete Fenchel involution: max over tabulated alpha of alpha . beta - L(alpha)."""
    alphas = np.atleast_2d(np.asarray(alphas, dtype=float).T).T
    betas = np.atleast_2d(np.asarray(betas, dtype=float).T).T
    rates = np.asarray(rates, dtype=float)
    finite = np.isfinite(rates)
    scores = betas @ alphas[finite].T - rates[finite][None, :]
    return scores.max(axis=1)


def tabulate_l_curve(surface: HamiltonianSurface, alphas: Sequence, bs: Sequence[Optional[float]],
                     solver_tol: Optional[float] = None) -> List[Dict[str, Any]]:
    """Rows (alpha, b, L, L^b, gap, beta*, on_boundary) for plotting L-curves."""
    domain = surface_domain(surface)
    rows = []
    for alpha in alphas:
        full = legendre(surface, alpha, INF, solver_tol, domain)
        for b in bs:
            b_value = INF if b is None else float(b)
            trunc = full if not math.isfinite(b_value) else legendre(surface, alpha, b_value, solver_tol, domain)
            gap = INF if not full.finite else max(full.value - trunc.value, 0.0)
            rows.append({'alpha': np.atleast_1d(alpha).astype(float), 'b': b_value, 'L': full.value,
                         'L_b': trunc.value, 'gap': gap, 'beta_star': trunc.beta_star,
                         'on_boundary': trunc.on_boundary})
    return rows


class RateField:
    """L(x, alpha) for x-dependent systems from surfaces H(x, x, .) tabulated on demand."""

    def __init__(self, spec: SystemSpec, box_radius: Optional[float] = None,
                 n_per_axis: Optional[int] = None, grid_n: Optional[int] = None,
                 trunc_b: float = INF, solver_tol: Optional[float] = None,
                 jobs: Optional[int] = None, x_digits: int = 6):
        self.spec = spec
        self.box_radius = box_radius or settings.SURFACE_BOX_RADIUS
        self.n_per_axis = n_per_axis or settings.SURFACE_NODES_PER_AXIS
        self.grid_n = grid_n or settings.SPECTRAL_GRID_N
        self.trunc_b = trunc_b
        self.solver_tol = solver_tol
        self.jobs = jobs
        self.x_digits = x_digits
        self._rates: Dict[Tuple[float, ...], RateFunction] = {}
        self._pending: Dict[Tuple[float, ...], Future] = {}
        self._lock = threading.Lock()

    def _key(self, x) -> Tuple[float, ...]:
        if self.spec.x_independent:
            return ()
        return tuple(round(float(v), self.x_digits) for v in as_batch(x, self.spec.dim_slow)[0])

    def rate_at(self, x) -> RateFunction:
        """Surface for x, built once per key; concurrent callers for the same key wait on one build."""
        key = self._key(x)
        with self._lock:
            rate = self._rates.get(key)
            if rate is not None:
                return rate
            pending = self._pending.get(key)
            owner = pending is None
            if owner:
                pending = Future()
                self._pending[key] = pending
        if not owner:
            return pending.result()

        try:
            point = np.array(key) if key else np.zeros(self.spec.dim_slow)
            box = [(-self.box_radius, self.box_radius)] * self.spec.dim_slow
            surface = build_surface(self.spec, point, point, box, self.n_per_axis,
                                    grid_n=self.grid_n, jobs=self.jobs)
            rate = RateFunction(surface, self.trunc_b, self.solver_tol)
        except Exception as e:
            with self._lock:
                del self._pending[key]
            pending.set_exception(e)
            raise
        with self._lock:
            self._rates[key] = rate
            del self._pending[key]
        pending.set_result(rate)
        return rate

    def surface_at(self, x) -> HamiltonianSurface:
        return self.rate_at(x).surface

    def evaluate(self, x, alpha) -> AdjointResult:
        return self.rate_at(x).evaluate(alpha)

    def averaged_drift(self, x) -> np.ndarray:
        key = self._key(x)
        with self._lock:
            rate = self._rates.get(key)
        if rate is not None:
            return rate.surface.gradient_at_zero()
        # unrounded x keeps the drift smooth for the flow integrator
        point = as_batch(x, self.spec.dim_slow)[0] if key else np.zeros(self.spec.dim_slow)
        return grad_h(self.spec, point, point, np.zeros(self.spec.dim_slow), grid_n=self.grid_n)
