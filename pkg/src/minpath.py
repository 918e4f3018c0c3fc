import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize

from action import Path
from config import settings
from errors import InfeasiblePathError

logger = logging.getLogger(__name__)

ARMIJO_C = 1e-4
BARRIER = 1e12
X_STEP = 1e-3


@dataclass
class MinActionProblem:
    rate: object
    x_start: np.ndarray
    x_end: np.ndarray
    T: float
    m: int
    max_iters: int = settings.MINPATH_MAX_ITERS
    tol: float = settings.MINPATH_TOL
    quasi_newton: bool = False

    def __post_init__(self):
        self.x_start = np.atleast_1d(np.asarray(self.x_start, dtype=float))
        self.x_end = np.atleast_1d(np.asarray(self.x_end, dtype=float))
        if self.m < 2:
            raise ValueError(f"m must be >= 2, got {self.m}")
        if not (np.all(np.isfinite(self.x_start)) and np.all(np.isfinite(self.x_end))):
            raise ValueError("endpoints must be finite")
        if self.x_start.shape != self.x_end.shape:
            raise ValueError("endpoints must have the same dimension")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def dim(self) -> int:
        return len(self.x_start)

    @property
    def delta(self) -> float:
        return self.T / self.m


@dataclass
class MinActionResult:
    path: Path
    value: float
    grad_norm: float
    converged: bool
    per_iter: List[float] = field(default_factory=list)
    iterations: int = 0
    boundary_segments: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {'value': self.value, 'grad_norm': self.grad_norm, 'converged': self.converged,
                'iterations': self.iterations, 'per_iter': self.per_iter,
                'boundary_segments': self.boundary_segments}


class DiscreteAction:
    """sum_j Delta L(x_j, (x_{j+1} - x_j) / Delta) with the adjoint-based gradient."""

    def __init__(self, rate, T: float, m: int, dim: int):
        self.rate = rate
        self.T = T
        self.m = m
        self.dim = dim
        self.delta = T / m

    def segments(self, nodes: np.ndarray):
        slopes = np.diff(nodes, axis=0) / self.delta
        return [self.rate.rate_at(nodes[j]).evaluate(slopes[j]) for j in range(self.m)], slopes

    def value(self, nodes: np.ndarray) -> float:
        results, _ = self.segments(nodes)
        if any(not r.finite for r in results):
            return math.inf
        return float(sum(self.delta * r.value for r in results))

    def _dx_rate(self, x: np.ndarray, slope: np.ndarray) -> np.ndarray:
        """Central difference of L in x over surfaces at x +- h (cached per x)."""
        grad = np.zeros(self.dim)
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = X_STEP
            plus = self.rate.rate_at(x + e).evaluate(slope).value
            minus = self.rate.rate_at(x - e).evaluate(slope).value
            if math.isfinite(plus) and math.isfinite(minus):
                grad[k] = (plus - minus) / (2.0 * X_STEP)
        return grad

    def gradient(self, nodes: np.ndarray, x_dependent: bool) -> Tuple[float, np.ndarray]:
        """Value and gradient with respect to every node (endpoints included)."""
        results, slopes = self.segments(nodes)
        if any(not r.finite for r in results):
            return math.inf, np.zeros_like(nodes)
        value = float(sum(self.delta * r.value for r in results))
        betas = np.array([r.beta_star for r in results])
        grad = np.zeros_like(nodes)
        grad[1:] += betas
        grad[:-1] -= betas
        if x_dependent:
            for j in range(self.m):
                grad[j] += self.delta * self._dx_rate(nodes[j], slopes[j])
        return value, grad


def _x_dependent(rate) -> bool:
    spec = getattr(rate, 'spec', None)
    return spec is not None and not spec.x_independent


def _check_feasible(objective: DiscreteAction, nodes: np.ndarray):
    results, slopes = objective.segments(nodes)
    for j, r in enumerate(results):
        if not r.finite:
            raise InfeasiblePathError(j, slopes[j].tolist())


def _initial_nodes(problem: MinActionProblem, init: Union[Path, str]) -> np.ndarray:
    if isinstance(init, Path):
        if abs(init.T - problem.T) > 1e-12 * problem.T:
            raise ValueError(f"initial path horizon {init.T} differs from T={problem.T}")
        times = np.linspace(0.0, problem.T, problem.m + 1)
        nodes = init.evaluate(times)
        nodes[0], nodes[-1] = problem.x_start, problem.x_end
        return nodes
    if init != 'linear':
        raise ValueError(f"unknown initialisation '{init}'")
    frac = np.linspace(0.0, 1.0, problem.m + 1)[:, None]
    return problem.x_start[None, :] + frac * (problem.x_end - problem.x_start)[None, :]


def minimize_action(problem: MinActionProblem, init: Union[Path, str] = 'linear') -> MinActionResult:
    """Minimise the discretised action over interior nodes with fixed endpoints."""
    objective = DiscreteAction(problem.rate, problem.T, problem.m, problem.dim)
    nodes = _initial_nodes(problem, init)
    _check_feasible(objective, nodes)
    x_dep = _x_dependent(problem.rate)
    shape = (problem.m - 1, problem.dim)

    def assemble(z: np.ndarray) -> np.ndarray:
        full = nodes.copy()
        full[1:-1] = z.reshape(shape)
        return full

    def value_and_grad(z: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = objective.gradient(assemble(z), x_dep)
        return value, grad[1:-1].ravel()

    z = nodes[1:-1].ravel().copy()
    value, grad = value_and_grad(z)
    trace = [value]

    if problem.quasi_newton:
        def fun(zz):
            v, g = value_and_grad(zz)
            if not math.isfinite(v):
                return BARRIER, np.zeros_like(zz)
            return v, g

        def record(zz):
            trace.append(value_and_grad(zz)[0])

        res = minimize(fun, z, jac=True, method='L-BFGS-B', callback=record,
                       options={'maxiter': problem.max_iters, 'gtol': problem.tol * 1e-2,
                                'ftol': 1e-15})
        candidate_value, candidate_grad = value_and_grad(res.x)
        if math.isfinite(candidate_value) and candidate_value <= value:
            z, value, grad = res.x, candidate_value, candidate_grad
        iterations = int(res.nit)
    else:
        step = 1.0
        iterations = 0
        while iterations < problem.max_iters and np.linalg.norm(grad) > problem.tol:
            accepted = False
            g2 = float(grad @ grad)
            while step > 1e-14:
                trial = z - step * grad
                trial_value, trial_grad = value_and_grad(trial)
                if math.isfinite(trial_value) and trial_value <= value - ARMIJO_C * step * g2:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                logger.info("Line search stalled; stopping")
                break
            z, value, grad = trial, trial_value, trial_grad
            trace.append(value)
            iterations += 1
            step = min(1.0, step * 2.0)

    grad_norm = float(np.linalg.norm(grad))
    final = assemble(z)
    results, _ = objective.segments(final)
    boundary = [j for j, r in enumerate(results) if r.on_boundary]
    if boundary:
        logger.warning(f"Minimum-action path has near-boundary slopes on segments {boundary}")
    converged = grad_norm <= problem.tol
    logger.info(f"Minimum action {value:.6g} after {iterations} iterations "
                f"(grad norm {grad_norm:.2e}, {'converged' if converged else 'not converged'})")
    return MinActionResult(path=Path(np.linspace(0.0, problem.T, problem.m + 1), final),
                           value=value, grad_norm=grad_norm, converged=converged,
                           per_iter=trace, iterations=iterations, boundary_segments=boundary)


@dataclass
class LevelSetResult:
    distance: float
    achieved_action: float
    converged: bool
    path: Optional[Path] = None
    flag: str = ''


def _shrunk_path(objective: DiscreteAction, path: Path, theta: float) -> np.ndarray:
    """Integrate slopes drift + theta (slope - drift) from the path start."""
    slopes = path.slopes
    nodes = np.empty_like(path.values)
    nodes[0] = path.values[0]
    for j in range(path.n_segments):
        drift = np.asarray(objective.rate.averaged_drift(nodes[j]), dtype=float)
        nodes[j + 1] = nodes[j] + path.dt * (drift + theta * (slopes[j] - drift))
    return nodes


def level_set_distance(path: Path, s: float, problem: MinActionProblem) -> LevelSetResult:
    """Approximate sup-distance from path to {xi: S(xi) <= s, xi_0 = path_0}."""
    if s < 0:
        raise ValueError(f"s must be nonnegative, got {s}")
    objective = DiscreteAction(problem.rate, path.T, path.n_segments, path.dim)
    slack = settings.SPECTRAL_SOLVER_TOL
    own = objective.value(path.values)
    if own <= s + slack:
        return LevelSetResult(0.0, own, True, path, 'path lies in the level set')

    def sup_distance(nodes: np.ndarray) -> float:
        return float(np.max(np.abs(nodes - path.values)))

    lo, hi = 0.0, 1.0
    best_nodes = _shrunk_path(objective, path, 0.0)
    best_value = objective.value(best_nodes)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        nodes = _shrunk_path(objective, path, mid)
        value = objective.value(nodes)
        if value <= s + slack:
            lo, best_nodes, best_value = mid, nodes, value
        else:
            hi = mid
    if not best_value <= s + slack:
        return LevelSetResult(math.inf, best_value, False, None, 'no feasible starting path found')
    best_distance = sup_distance(best_nodes)

    n, d = path.n_segments, path.dim
    x_dep = _x_dependent(problem.rate)

    def unpack(v: np.ndarray) -> np.ndarray:
        nodes = np.empty_like(path.values)
        nodes[0] = path.values[0]
        nodes[1:] = v[:-1].reshape(n, d)
        return nodes

    def action_slack(v):
        value = objective.value(unpack(v))
        return s - value if math.isfinite(value) else -BARRIER

    def action_slack_jac(v):
        value, grad = objective.gradient(unpack(v), x_dep)
        jac = np.zeros_like(v)
        if math.isfinite(value):
            jac[:-1] = -grad[1:].ravel()
        return jac

    target = path.values[1:].ravel()
    eye = np.eye(n * d)
    constraints = [
        {'type': 'ineq', 'fun': action_slack, 'jac': action_slack_jac},
        {'type': 'ineq', 'fun': lambda v: v[-1] - (v[:-1] - target),
         'jac': lambda v: np.hstack([-eye, np.ones((n * d, 1))])},
        {'type': 'ineq', 'fun': lambda v: v[-1] + (v[:-1] - target),
         'jac': lambda v: np.hstack([eye, np.ones((n * d, 1))])},
    ]
    start = np.append(best_nodes[1:].ravel(), best_distance)
    res = minimize(lambda v: v[-1], start, jac=lambda v: np.append(np.zeros(n * d), 1.0),
                   method='SLSQP', constraints=constraints,
                   options={'maxiter': problem.max_iters, 'ftol': 1e-10})

    candidate = unpack(res.x)
    candidate_value = objective.value(candidate)
    candidate_distance = sup_distance(candidate)
    if res.success and candidate_value <= s + slack and candidate_distance <= best_distance:
        return LevelSetResult(candidate_distance, candidate_value, True, Path(path.times, candidate))
    logger.warning(f"Level-set penalty solve did not converge ({res.message}); "
                   f"reporting best feasible point")
    return LevelSetResult(best_distance, best_value, False, Path(path.times, best_nodes),
                          'penalty solve nonconvergent; best feasible point reported')
