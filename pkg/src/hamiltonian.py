import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import expm_multiply
from scipy.special import logsumexp

import streams
from config import settings
from errors import ConvergenceError, SurfaceBuildError
from fastsim import additive_functional
from model import SystemSpec, as_batch

logger = logging.getLogger(__name__)

MIN_GRID_N = 16


def _vector(v, dim: int) -> np.ndarray:
    return as_batch(v, dim)[0].copy()


class FeynmanKacOperator:
    """Discretised generator of the frozen fast process plus the potential beta . f(x', y).

    The transport part is assembled on a periodic grid with second-order central
    differences, switching to upwinding where the cell Peclet number exceeds 2.
    Mixed derivatives use the 7-point cross stencil.
    """

    def __init__(self, spec: SystemSpec, x_prime, x, beta, grid_n: int):
        l = spec.dim_fast
        if grid_n < MIN_GRID_N:
            raise ValueError(f"grid_n must be >= {MIN_GRID_N}, got {grid_n}")
        if l > 3:
            raise ValueError(f"fast dimension {l} is too large for a tabulated generator (max 3)")
        if l > settings.MAX_FAST_DIM:
            logger.warning(f"Fast dimension {l} exceeds the dense-grid cap {settings.MAX_FAST_DIM}; "
                           f"{grid_n ** l} grid points, expect long runtimes")

        self.spec = spec
        self.x_prime = _vector(x_prime, spec.dim_slow)
        self.x = _vector(x, spec.dim_slow)
        self.beta = _vector(beta, spec.dim_slow)
        self.grid_n = grid_n
        self.shape = (grid_n,) * l
        self.h = spec.geometry.periods / grid_n
        self.warnings: List[str] = []

        axes = spec.geometry.grid(grid_n)
        mesh = np.meshgrid(*axes, indexing='ij')
        self.points = np.column_stack([m.ravel() for m in mesh])
        n_points = len(self.points)
        xs = np.repeat(self.x[None, :], n_points, axis=0)
        xps = np.repeat(self.x_prime[None, :], n_points, axis=0)

        self.potential = spec.f(xps, self.points) @ self.beta
        self.transport = self._assemble_transport(
            spec.covariance(xs, self.points), spec.fast_drift(xs, self.points))
        self.matrix = (self.transport + sparse.diags(self.potential)).tocsr()

    def _neighbor(self, index: np.ndarray, offsets: Sequence[int]) -> np.ndarray:
        n = self.grid_n
        shifted = [(index[k] + offsets[k]) % n for k in range(len(offsets))]
        return np.ravel_multi_index(shifted, self.shape)

    def _assemble_transport(self, cov: np.ndarray, drift: np.ndarray) -> sparse.csr_matrix:
        l = self.spec.dim_fast
        n_points = len(self.points)
        index = np.unravel_index(np.arange(n_points), self.shape)
        rows, cols, vals = [], [], []

        def add(offsets, weights):
            rows.append(np.arange(n_points))
            cols.append(self._neighbor(index, offsets))
            vals.append(weights)

        upwinded = 0
        for k in range(l):
            a = cov[:, k, k]
            b = drift[:, k]
            hk = self.h[k]
            diffusive = a / (2.0 * hk * hk)
            central = np.abs(b) * hk <= a
            upwinded += int(np.count_nonzero(~central))
            plus = np.where(central, diffusive + b / (2.0 * hk), diffusive + np.maximum(b, 0.0) / hk)
            minus = np.where(central, diffusive - b / (2.0 * hk), diffusive + np.maximum(-b, 0.0) / hk)
            unit = [0] * l
            unit[k] = 1
            add(unit, plus)
            unit[k] = -1
            add(unit, minus)

        for k, m in combinations(range(l), 2):
            c = cov[:, k, m]
            weight = np.abs(c) / (2.0 * self.h[k] * self.h[m])
            pos = c >= 0
            for sk, sm in ((1, 1), (-1, -1)):
                offsets = [0] * l
                offsets[k], offsets[m] = sk, sm
                add(offsets, np.where(pos, weight, 0.0))
            for sk, sm in ((1, -1), (-1, 1)):
                offsets = [0] * l
                offsets[k], offsets[m] = sk, sm
                add(offsets, np.where(pos, 0.0, weight))
            for axis in (k, m):
                for sign in (1, -1):
                    offsets = [0] * l
                    offsets[axis] = sign
                    add(offsets, -weight)

        if upwinded:
            logger.debug(f"Upwinded {upwinded} drift entries (cell Peclet number > 2)")

        off = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_points, n_points)).tocsr()
        off.sum_duplicates()
        off.eliminate_zeros()

        if off.nnz and off.data.min() < 0:
            negatives = int(np.count_nonzero(off.data < 0))
            message = (f"Stencil correction: {negatives} negative off-diagonal entries from the "
                       f"mixed-derivative stencil were set to zero")
            logger.warning(message)
            self.warnings.append(message)
            off.data = np.maximum(off.data, 0.0)
            off.eliminate_zeros()

        row_sums = np.asarray(off.sum(axis=1)).ravel()
        return (off - sparse.diags(row_sums)).tocsr()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    @property
    def shift(self) -> float:
        return float(np.max(-self.transport.diagonal()) + np.max(np.abs(self.potential)) + 1.0)

    def principal_eigenpair(self, tol: Optional[float] = None, max_iters: Optional[int] = None,
                            start: Optional[np.ndarray] = None) -> 'EigenPair':
        """Perron root of the generator by power iteration on I + A / sigma.

        The iteration matrix is nonnegative; the Collatz-Wielandt bracket
        min/max of (Mv)_i / v_i encloses its Perron root and gives the residual.
        """
        tol = settings.EIGEN_TOL if tol is None else tol
        max_iters = settings.EIGEN_MAX_ITERS if max_iters is None else max_iters
        sigma = self.shift
        n_points = self.matrix.shape[0]
        step = (sparse.identity(n_points, format='csr') + self.matrix / sigma).tocsr()
        floor = 64.0 * np.finfo(float).eps * sigma

        v = np.ones(n_points) if start is None else np.maximum(np.asarray(start, dtype=float).ravel(), 1e-300)
        v = v / v.max()
        iterations = 0
        residual = math.inf
        eigenvalue = math.nan
        while True:
            w = step @ v
            ratios = w / v
            lo, hi = float(ratios.min()), float(ratios.max())
            eigenvalue = sigma * (0.5 * (lo + hi) - 1.0)
            residual = 0.5 * sigma * (hi - lo)
            if residual <= max(tol * max(1.0, abs(eigenvalue)), floor):
                v = w / w.max()
                break
            if iterations >= max_iters:
                raise ConvergenceError(
                    f"Power iteration did not converge in {max_iters} iterations "
                    f"(beta={self.beta.tolist()}, grid {self.grid_n})", residual)
            for _ in range(settings.POWER_BLOCK):
                v = step @ v
            v = v / v.max()
            iterations += settings.POWER_BLOCK

        if not np.all(v > 0):
            raise ConvergenceError("Eigenfunction lost positivity", residual)
        return EigenPair(eigenvalue=eigenvalue, eigenfunction=v, residual=residual,
                         iterations=iterations, grid_n=self.grid_n, warnings=list(self.warnings))

    def apply_semigroup(self, g: np.ndarray, t: float) -> np.ndarray:
        """T_t g = exp(t A) g on the grid."""
        return expm_multiply(self.matrix * t, np.asarray(g, dtype=float).ravel())


@dataclass
class EigenPair:
    eigenvalue: float
    eigenfunction: np.ndarray
    residual: float
    iterations: int = 0
    grid_n: int = 0
    warnings: List[str] = field(default_factory=list)

    @property
    def min_eigenfunction(self) -> float:
        return float(self.eigenfunction.min())


def h_spectral(spec: SystemSpec, x_prime, x, beta, grid_n: Optional[int] = None,
               tol: Optional[float] = None, max_iters: Optional[int] = None,
               richardson: Optional[bool] = None, start: Optional[np.ndarray] = None) -> EigenPair:
    """H(x', x, beta) as the principal eigenvalue of generator plus potential."""
    grid_n = grid_n or settings.SPECTRAL_GRID_N
    richardson = settings.RICHARDSON_CHECK if richardson is None else richardson
    operator = FeynmanKacOperator(spec, x_prime, x, beta, grid_n)
    pair = operator.principal_eigenpair(tol=tol, max_iters=max_iters, start=start)

    coarse_n = grid_n // 2
    if richardson and np.any(operator.beta) and coarse_n >= MIN_GRID_N:
        coarse_op = FeynmanKacOperator(spec, x_prime, x, beta, coarse_n)
        coarse = coarse_op.principal_eigenpair(tol=tol, max_iters=max_iters)
        error = abs(pair.eigenvalue - coarse.eigenvalue) / 3.0
        if error > settings.RICHARDSON_TOL * max(1.0, abs(pair.eigenvalue)):
            message = (f"Grid {grid_n} may be too coarse at beta={operator.beta.tolist()}: "
                       f"estimated discretisation error {error:.2e}")
            logger.warning(message)
            pair.warnings.append(message)
    return pair


@dataclass
class MonteCarloEstimate:
    estimate: float
    stderr: float
    effective_sample_size: float
    replicas: int
    degenerate: bool = False


def log_mean_exp(values: np.ndarray) -> Tuple[float, float, float]:
    """Return (log mean exp(v), delta-method stderr of that log-mean, effective sample size)."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    if np.ptp(values) == 0.0:
        return float(values[0]), 0.0, float(n)
    lme = float(logsumexp(values) - math.log(n))
    w = np.exp(values - values.max())
    stderr = float(np.std(w, ddof=1) / (np.mean(w) * math.sqrt(n)))
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return lme, stderr, ess


def h_montecarlo(spec: SystemSpec, x_prime, x, beta, t: float, dt: float, replicas: int,
                 seed: int, y0=None, jobs: Optional[int] = None) -> MonteCarloEstimate:
    """Long-time route: t^-1 log mean exp(beta . integral of f(x', y^x_s) ds)."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if replicas < 100:
        raise ValueError(f"replicas must be >= 100, got {replicas}")
    beta = _vector(beta, spec.dim_slow)
    x_row = as_batch(x, spec.dim_slow)[:1]
    xp_row = as_batch(x_prime, spec.dim_slow)[:1]
    y_row = as_batch(np.zeros(spec.dim_fast) if y0 is None else y0, spec.dim_fast)[:1]

    if not np.any(beta):
        return MonteCarloEstimate(0.0, 0.0, float(replicas), replicas)

    def block(k: int, n: int) -> np.ndarray:
        rng = streams.generator(seed, streams.STREAM_MONTE_CARLO_H, k)
        return additive_functional(spec, np.repeat(x_row, n, axis=0), np.repeat(xp_row, n, axis=0),
                                   np.repeat(y_row, n, axis=0), t, dt, rng, weight=beta)

    exponents = np.concatenate(streams.run_replica_blocks(block, replicas, jobs=jobs))
    lme, stderr, ess = log_mean_exp(exponents)
    degenerate = ess < settings.MIN_EFFECTIVE_SAMPLE_SIZE
    if degenerate:
        logger.warning(f"Weight collapse in Monte Carlo H at beta={beta.tolist()}, t={t}: ESS {ess:.1f}")
    return MonteCarloEstimate(lme / t, stderr / t, ess, replicas, degenerate)


@dataclass
class RouteAgreement:
    times: List[float]
    estimates: List[float]
    stderrs: List[float]
    spectral: float
    errors: List[float]
    fitted_constant: float
    decreasing: bool


def route_agreement(spec: SystemSpec, x_prime, x, beta, times: Sequence[float], dt: float,
                    replicas: int, seed: int, grid_n: Optional[int] = None,
                    jobs: Optional[int] = None) -> RouteAgreement:
    """Compare the Monte Carlo route at several t against the spectral value.

    The constant C in |error| <= C / t is fitted as the largest t * |error|.
    """
    spectral = h_spectral(spec, x_prime, x, beta, grid_n=grid_n).eigenvalue
    estimates, stderrs, errors = [], [], []
    for t in times:
        mc = h_montecarlo(spec, x_prime, x, beta, t, dt, replicas, seed, jobs=jobs)
        estimates.append(mc.estimate)
        stderrs.append(mc.stderr)
        errors.append(abs(mc.estimate - spectral))
    fitted = max(t * e for t, e in zip(times, errors))
    decreasing = all(b <= a for a, b in zip(errors, errors[1:]))
    return RouteAgreement(list(times), estimates, stderrs, spectral, errors, fitted, decreasing)


@dataclass
class HamiltonianSurface:
    """Tabulated H(x', x, .) on a rectangular beta grid with gradients at the nodes."""
    x_prime: np.ndarray
    x: np.ndarray
    axes: Tuple[np.ndarray, ...]
    values: np.ndarray
    gradients: np.ndarray
    eigen_min: Optional[np.ndarray] = None
    grid_n: int = 0
    checks: Dict[str, Any] = field(default_factory=dict)
    spec: Optional[SystemSpec] = field(default=None, repr=False)
    synthetic: bool = False
    exact_fn: Optional[Callable[[np.ndarray], float]] = field(default=None, repr=False)
    fingerprint: Optional[str] = None
    tolerances: Dict[str, float] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def beta_grid(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing='ij')
        return np.column_stack([m.ravel() for m in mesh])

    @property
    def box(self) -> List[Tuple[float, float]]:
        return [(float(a[0]), float(a[-1])) for a in self.axes]

    @property
    def radius(self) -> float:
        """Largest r such that the ball |beta| <= r lies inside the box."""
        return float(min(min(-lo, hi) for lo, hi in self.box))

    def zero_index(self) -> Tuple[int, ...]:
        return tuple(int(np.argmin(np.abs(a))) for a in self.axes)

    def gradient_at_zero(self) -> np.ndarray:
        return self.gradients[self.zero_index()].copy()

    def exact_value(self, beta: np.ndarray) -> float:
        """Re-solve H at an arbitrary beta (closed form for synthetic surfaces)."""
        if self.exact_fn is not None:
            return float(self.exact_fn(np.asarray(beta, dtype=float)))
        if self.spec is None:
            raise ValueError("surface has no system attached for an exact re-solve")
        return h_spectral(self.spec, self.x_prime, self.x, beta, grid_n=self.grid_n,
                          richardson=False).eigenvalue

    @classmethod
    def synthetic_surface(cls, func: Callable[[np.ndarray], float],
                          grad: Callable[[np.ndarray], np.ndarray],
                          box: Sequence[Tuple[float, float]], n_per_axis: int) -> 'HamiltonianSurface':
        """Surface from a closed-form convex H, with no underlying system."""
        axes = _box_axes(box, n_per_axis)
        mesh = np.meshgrid(*axes, indexing='ij')
        nodes = np.column_stack([m.ravel() for m in mesh])
        shape = tuple(len(a) for a in axes)
        values = np.array([func(b) for b in nodes]).reshape(shape)
        gradients = np.array([np.atleast_1d(grad(b)) for b in nodes]).reshape(shape + (len(axes),))
        zero = np.zeros(len(axes))
        return cls(x_prime=zero, x=zero, axes=axes, values=values, gradients=gradients,
                   synthetic=True, exact_fn=func)


def _box_axes(box: Sequence[Tuple[float, float]], n_per_axis: int) -> Tuple[np.ndarray, ...]:
    axes = []
    for lo, hi in box:
        if not lo <= 0.0 <= hi or lo >= hi:
            raise ValueError(f"beta box [{lo}, {hi}] must contain 0 and have positive width")
        axis = np.linspace(lo, hi, n_per_axis)
        if not np.any(np.abs(axis) < 1e-14):
            axis = np.sort(np.append(axis, 0.0))
        axis[np.argmin(np.abs(axis))] = 0.0
        axes.append(axis)
    return tuple(axes)


def grad_h(target: Union[HamiltonianSurface, SystemSpec], x_prime=None, x=None, beta=None,
           step: Optional[float] = None, grid_n: Optional[int] = None,
           start: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of H in beta by central differences at steps s and s/2, Richardson-combined."""
    if isinstance(target, HamiltonianSurface):
        spec = target.spec
        x_prime = target.x_prime if x_prime is None else x_prime
        x = target.x if x is None else x
        grid_n = grid_n or target.grid_n
        if spec is None:
            raise ValueError("synthetic surfaces carry their own gradients")
    else:
        spec = target
    step = settings.GRADIENT_STEP if step is None else step
    if not 0 < step <= 0.1:
        raise ValueError(f"step must lie in (0, 0.1], got {step}")
    d = spec.dim_slow
    beta = np.zeros(d) if beta is None else _vector(beta, d)
    grid_n = grid_n or settings.SPECTRAL_GRID_N

    def value(b: np.ndarray) -> float:
        return h_spectral(spec, x_prime, x, b, grid_n=grid_n, richardson=False, start=start).eigenvalue

    gradient = np.empty(d)
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        wide = (value(beta + step * e) - value(beta - step * e)) / (2.0 * step)
        half = 0.5 * step
        narrow = (value(beta + half * e) - value(beta - half * e)) / (2.0 * half)
        gradient[k] = (4.0 * narrow - wide) / 3.0
    return gradient


def _surface_checks(surface: HamiltonianSurface, f_sup_norm: Optional[float]) -> Dict[str, Any]:
    values = surface.values
    zero_value = float(values[surface.zero_index()])
    checks: Dict[str, Any] = {'zero_value': zero_value, 'zero_ok': abs(zero_value) <= 1e-10}

    violations = 0
    worst = 0.0
    for axis in range(surface.dim):
        b = surface.axes[axis]
        v = np.moveaxis(values, axis, -1)
        left, mid, right = v[..., :-2], v[..., 1:-1], v[..., 2:]
        w = (b[1:-1] - b[:-2]) / (b[2:] - b[:-2])
        chord = (1.0 - w) * left + w * right
        excess = mid - chord
        violations += int(np.count_nonzero(excess > 1e-8))
        if excess.size:
            worst = max(worst, float(excess.max()))
    checks['convexity_violations'] = violations
    checks['convexity_worst_excess'] = worst

    if f_sup_norm is not None:
        norms = np.sqrt(np.sum(surface.beta_grid ** 2, axis=1)).reshape(values.shape)
        excess = np.abs(values) - (f_sup_norm * norms + 1e-8)
        checks['bound_violations'] = int(np.count_nonzero(excess > 0))
    if surface.eigen_min is not None:
        checks['min_eigenfunction'] = float(surface.eigen_min.min())
    return checks


def build_surface(spec: SystemSpec, x_prime, x, beta_box: Sequence[Tuple[float, float]],
                  n_per_axis: int, grid_n: Optional[int] = None, step: Optional[float] = None,
                  jobs: Optional[int] = None) -> HamiltonianSurface:
    """Tabulate H and its gradient on a beta grid; invariant checks are recorded on the surface."""
    if n_per_axis < 5:
        raise ValueError(f"n_per_axis must be >= 5, got {n_per_axis}")
    if len(beta_box) != spec.dim_slow:
        raise ValueError(f"beta box needs {spec.dim_slow} intervals, got {len(beta_box)}")
    grid_n = grid_n or settings.SPECTRAL_GRID_N
    axes = _box_axes(beta_box, n_per_axis)
    shape = tuple(len(a) for a in axes)
    nodes = np.column_stack([m.ravel() for m in np.meshgrid(*axes, indexing='ij')])
    logger.info(f"Tabulating H for '{spec.name}' on {len(nodes)} beta nodes (grid {grid_n})")

    def solve(i: int):
        beta = nodes[i]
        try:
            pair = h_spectral(spec, x_prime, x, beta, grid_n=grid_n)
            gradient = grad_h(spec, x_prime, x, beta, step=step, grid_n=grid_n,
                              start=pair.eigenfunction)
        except Exception as e:
            raise SurfaceBuildError(beta, e) from e
        return pair.eigenvalue, gradient, pair.min_eigenfunction, pair.warnings

    results = streams.run_indexed([lambda i=i: solve(i) for i in range(len(nodes))],
                                  jobs=jobs, label='beta nodes')
    values = np.array([r[0] for r in results]).reshape(shape)
    gradients = np.array([r[1] for r in results]).reshape(shape + (spec.dim_slow,))
    eigen_min = np.array([r[2] for r in results]).reshape(shape)
    warnings = [w for r in results for w in r[3]]

    surface = HamiltonianSurface(
        x_prime=_vector(x_prime, spec.dim_slow), x=_vector(x, spec.dim_slow), axes=axes,
        values=values, gradients=gradients, eigen_min=eigen_min, grid_n=grid_n, spec=spec,
        fingerprint=spec.fingerprint,
        tolerances={'eigen_tol': settings.EIGEN_TOL, 'richardson_tol': settings.RICHARDSON_TOL,
                    'gradient_step': settings.GRADIENT_STEP if step is None else step,
                    'solver_tol': settings.SPECTRAL_SOLVER_TOL})
    surface.checks = _surface_checks(surface, spec.f_sup_norm)
    surface.checks['accuracy_warnings'] = len(warnings)
    if surface.checks['convexity_violations']:
        logger.warning(f"Surface has {surface.checks['convexity_violations']} midpoint convexity violations")
    if surface.checks.get('bound_violations'):
        logger.warning(f"Surface has {surface.checks['bound_violations']} nodes with |H| > |f|.|beta|")
    return surface
