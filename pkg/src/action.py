import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import solve_ivp

logger = logging.getLogger(__name__)

INDEX_EPS = 1e-9


@dataclass
class Path:
    """Piecewise-linear path on a uniform time grid over [0, T]."""
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        self.values = values.reshape(len(values), -1)
        if len(self.times) < 2 or len(self.times) != len(self.values):
            raise ValueError("a path needs at least two nodes and one value per node")
        if self.times[0] != 0.0:
            raise ValueError("path times must start at 0")
        steps = np.diff(self.times)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ValueError("path times must be uniform and increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("path values must be finite")

    @classmethod
    def linear(cls, x0, velocity, T: float, n: int) -> 'Path':
        times = np.linspace(0.0, T, n + 1)
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        velocity = np.atleast_1d(np.asarray(velocity, dtype=float))
        return cls(times, x0[None, :] + times[:, None] * velocity[None, :])

    @classmethod
    def constant(cls, x0, T: float, n: int) -> 'Path':
        return cls.linear(x0, np.zeros_like(np.atleast_1d(x0), dtype=float), T, n)

    @classmethod
    def from_function(cls, func: Callable[[np.ndarray], np.ndarray], T: float, n: int) -> 'Path':
        times = np.linspace(0.0, T, n + 1)
        values = np.asarray(func(times), dtype=float)
        return cls(times, values.reshape(len(times), -1))

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_segments(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return self.T / self.n_segments

    @property
    def slopes(self) -> np.ndarray:
        """Right-forward difference on each segment."""
        return np.diff(self.values, axis=0) / self.dt

    def max_speed(self) -> float:
        return float(np.max(np.sqrt(np.sum(self.slopes ** 2, axis=1))))

    def segment_index(self, t) -> np.ndarray:
        idx = np.floor(np.asarray(t, dtype=float) / self.dt + INDEX_EPS).astype(int)
        return np.clip(idx, 0, self.n_segments - 1)

    def evaluate(self, t) -> np.ndarray:
        t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), 0.0, self.T)
        idx = self.segment_index(t)
        frac = (t - self.times[idx])[:, None]
        return self.values[idx] + frac * self.slopes[idx]

    def right_derivative(self, t) -> np.ndarray:
        return self.slopes[self.segment_index(np.atleast_1d(t))]

    def piece(self, start: int, stop: int) -> 'Path':
        """Sub-path over nodes start..stop, re-based to start at time 0."""
        times = self.times[start:stop + 1] - self.times[start]
        return Path(times, self.values[start:stop + 1])

    def columns(self) -> List[str]:
        return ['t'] + [f"x_{k + 1}" for k in range(self.dim)]

    def to_array(self) -> np.ndarray:
        return np.column_stack([self.times, self.values])


@dataclass
class StepPath:
    """psi_s = phi at kappa_m(s + a) - a, clamped to [0, T]; constant on each cell."""
    base: Path
    m: int
    offset_a: float
    breakpoints: np.ndarray
    anchors: np.ndarray
    values: np.ndarray

    def evaluate(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        cell = np.clip(np.searchsorted(self.breakpoints, s, side='right') - 1, 0, len(self.values) - 1)
        return self.values[cell]

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.breakpoints)


@dataclass
class PiecewiseLinearPath:
    """chi with slope frozen at the right derivative of phi on each cell, started at phi_0."""
    base: Path
    m: int
    offset_a: float
    breakpoints: np.ndarray
    slopes: np.ndarray
    nodes: np.ndarray

    def evaluate(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        cell = np.clip(np.searchsorted(self.breakpoints, s, side='right') - 1, 0, len(self.slopes) - 1)
        return self.nodes[cell] + (s - self.breakpoints[cell])[:, None] * self.slopes[cell]


def discretize(path: Path, m: int, a: float = 0.0) -> Tuple[StepPath, PiecewiseLinearPath]:
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    T = path.T
    if not 0.0 <= a < T:
        raise ValueError(f"offset a must lie in [0, T), got {a}")
    delta = T / m
    inner = [k * delta - a for k in range(1, m + 2) if 0.0 < k * delta - a < T - 1e-12 * T]
    breakpoints = np.array([0.0] + inner + [T])

    # kappa_m(s + a) - a on each cell, clamped into [0, T]
    anchors = np.clip(np.floor((breakpoints[:-1] + a) / delta + INDEX_EPS) * delta - a, 0.0, T)
    psi = path.evaluate(anchors)
    slopes = path.right_derivative(anchors)
    lengths = np.diff(breakpoints)
    nodes = np.vstack([path.values[:1], path.values[0] + np.cumsum(slopes * lengths[:, None], axis=0)])

    step = StepPath(path, m, a, breakpoints, anchors, psi)
    linear = PiecewiseLinearPath(path, m, a, breakpoints, slopes, nodes)
    return step, linear


@dataclass
class ActionValue:
    value: float
    per_segment: np.ndarray
    m: Optional[int] = None
    offset_a: Optional[float] = None
    infeasible_segments: List[int] = field(default_factory=list)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)

    def to_dict(self) -> dict:
        return {'value': self.value, 'per_segment': self.per_segment.tolist(), 'm': self.m,
                'a': self.offset_a, 'infeasible_segments': self.infeasible_segments}


def _total(per_segment: np.ndarray, m=None, a=None) -> ActionValue:
    infeasible = [int(i) for i in np.flatnonzero(~np.isfinite(per_segment))]
    value = math.inf if infeasible else float(np.sum(per_segment))
    return ActionValue(value, per_segment, m, a, infeasible)


def action(path_or_pair: Union[Path, Tuple[StepPath, PiecewiseLinearPath]], rate) -> ActionValue:
    """S as a sum of segment contributions; +inf when any slope leaves the finite-rate domain.

    `rate` is anything with rate_at(x) returning an object whose evaluate(alpha)
    gives the local L (RateFunction or RateField).
    """
    if isinstance(path_or_pair, Path):
        path = path_or_pair
        slopes = path.slopes
        per_segment = np.array([
            path.dt * rate.rate_at(path.values[k]).evaluate(slopes[k]).value
            for k in range(path.n_segments)])
        return _total(per_segment)

    psi, chi = path_or_pair
    lengths = psi.lengths
    per_segment = np.array([
        lengths[j] * rate.rate_at(psi.values[j]).evaluate(chi.slopes[j]).value
        for j in range(len(lengths))])
    return _total(per_segment, psi.m, psi.offset_a)


def averaged_discrete_action(path: Path, rate, m: int, offsets: Sequence[float]) -> float:
    """Mean of the discretised action over several offsets a."""
    values = [action(discretize(path, m, a), rate).value for a in offsets]
    return float(np.mean(values))


@dataclass
class ConvergenceReport:
    m_list: List[int]
    discretized: List[float]
    reference: float
    discrepancies: List[float]
    nonincreasing: bool
    nu: Optional[float]
    below_nu: Optional[bool]


def action_convergence(path: Path, rate, m_list: Sequence[int], nu: Optional[float] = None,
                       a: float = 0.0) -> ConvergenceReport:
    """|S^psi(chi) - S(phi)| over m_list, with monotonicity and the nu threshold reported."""
    reference = action(path, rate).value
    if not math.isfinite(reference):
        raise ValueError("action_convergence needs a path with finite action")
    discretized = [action(discretize(path, m, a), rate).value for m in m_list]
    discrepancies = [abs(s - reference) for s in discretized]
    nonincreasing = all(b <= a_ + 1e-12 for a_, b in zip(discrepancies, discrepancies[1:]))
    below = None if nu is None else discrepancies[-1] <= nu
    return ConvergenceReport(list(m_list), discretized, reference, discrepancies, nonincreasing, nu, below)


def averaged_flow(rate, x0, T: float, n: int) -> Path:
    """Numerical solution of phi' = zero-rate drift(phi), sampled on n uniform segments."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    times = np.linspace(0.0, T, n + 1)

    def drift(t, x):
        return np.asarray(rate.averaged_drift(x), dtype=float)

    solution = solve_ivp(drift, (0.0, T), x0, t_eval=times, rtol=1e-10, atol=1e-12)
    if not solution.success:
        logger.warning(f"Averaged flow integration: {solution.message}")
    return Path(times, solution.y.T)
