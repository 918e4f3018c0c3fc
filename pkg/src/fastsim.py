import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

import streams
from errors import SimulationBlowupError
from model import SystemSpec, as_batch

logger = logging.getLogger(__name__)

NOISE_CHUNK = 65536


@dataclass
class FrozenFastPath:
    times: np.ndarray
    states: np.ndarray
    frozen_x: np.ndarray
    seed: int
    period: Tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have the same length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def to_rows(self) -> Tuple[List[str], np.ndarray]:
        columns = ['t'] + [f"y_{j + 1}" for j in range(self.states.shape[1])]
        return columns, np.column_stack([self.times, self.states])


@dataclass
class OccupationMeasure:
    bin_edges: Tuple[np.ndarray, ...]
    mass: np.ndarray
    total_time: float

    @property
    def bin_centers(self) -> Tuple[np.ndarray, ...]:
        return tuple(0.5 * (e[1:] + e[:-1]) for e in self.bin_edges)

    def to_rows(self) -> Tuple[List[str], np.ndarray]:
        centers = np.meshgrid(*self.bin_centers, indexing='ij')
        columns = [f"bin_center_{j + 1}" for j in range(len(centers))] + ['mass']
        return columns, np.column_stack([c.ravel() for c in centers] + [self.mass.ravel()])


def time_steps(t_end: float, dt: float) -> np.ndarray:
    """Step sizes covering [0, t_end]: full steps of dt, then one partial step if needed."""
    if dt <= 0 or t_end <= 0:
        raise ValueError(f"need dt > 0 and t_end > 0, got dt={dt}, t_end={t_end}")
    if dt > t_end * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds t_end={t_end}")
    n_full = int(np.floor(t_end / dt + 1e-9))
    steps = np.full(n_full, float(dt))
    remainder = t_end - n_full * dt
    if remainder > 1e-12 * t_end:
        steps = np.append(steps, remainder)
    return steps


def euler_step(spec: SystemSpec, x: np.ndarray, y: np.ndarray, dt: float,
               noise: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step of the frozen fast dynamics, wrapped onto the torus."""
    drift = spec.B(x, y)
    diffusion = spec.C(x, y)
    increment = drift * dt + np.einsum('nij,nj->ni', diffusion, noise) * np.sqrt(dt)
    return spec.geometry.wrap(y + increment)


def _check_finite(step: int, *arrays: np.ndarray, where: str):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise SimulationBlowupError(step, where)


def frozen_steps(spec: SystemSpec, x: np.ndarray, y0: np.ndarray, t_end: float, dt: float,
                 rng: np.random.Generator) -> Iterator[Tuple[int, float, float, np.ndarray]]:
    """Yield (step, time, step_size, state) after every step of a frozen ensemble.

    x and y0 are batches of shape (n, d) and (n, l); the ensemble moves together.
    """
    y = spec.geometry.wrap(np.array(y0, dtype=float))
    n, l = y.shape
    t = 0.0
    for k, h in enumerate(time_steps(t_end, dt)):
        noise = rng.standard_normal((n, l))
        y = euler_step(spec, x, y, h, noise)
        _check_finite(k, y, where='frozen fast process')
        t += h
        yield k, t, h, y


def simulate_frozen(spec: SystemSpec, x, y0, t_end: float, dt: float, seed: int) -> FrozenFastPath:
    """Single frozen fast path y^x on [0, t_end], recorded at every step."""
    x_row = as_batch(x, spec.dim_slow)[:1]
    y = spec.geometry.wrap(as_batch(y0, spec.dim_fast)[:1].copy())
    steps = time_steps(t_end, dt)
    rng = streams.generator(seed, streams.STREAM_FROZEN_PATH)
    l = spec.dim_fast

    states = np.empty((len(steps) + 1, l))
    states[0] = y[0]
    noise = np.empty((0, l))
    for k, h in enumerate(steps):
        j = k % NOISE_CHUNK
        if j == 0:
            noise = rng.standard_normal((min(NOISE_CHUNK, len(steps) - k), l))
        y = euler_step(spec, x_row, y, h, noise[j:j + 1])
        _check_finite(k, y, where='frozen fast process')
        states[k + 1] = y[0]

    times = np.concatenate([[0.0], np.cumsum(steps)])
    times[-1] = t_end
    return FrozenFastPath(times=times, states=states, frozen_x=x_row[0].copy(), seed=seed,
                          period=spec.geometry.period)


def occupation(path: FrozenFastPath, bins: int, period: Optional[Tuple[float, ...]] = None) -> OccupationMeasure:
    """Time-weighted histogram of the states; each state holds until the next time."""
    if len(path.times) < 2:
        raise ValueError("path must contain at least one step")
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    l = path.states.shape[1]
    period = period or path.period or (2.0 * np.pi,) * l
    edges = tuple(np.linspace(0.0, p, bins + 1) for p in period)
    weights = np.diff(path.times)
    mass, _ = np.histogramdd(path.states[:-1], bins=edges, weights=weights)
    total = float(weights.sum())
    return OccupationMeasure(bin_edges=edges, mass=mass / mass.sum(), total_time=total)


def additive_functional(spec: SystemSpec, x: np.ndarray, x_prime: np.ndarray, y0: np.ndarray,
                        t_end: float, dt: float, rng: np.random.Generator,
                        weight: Optional[np.ndarray] = None) -> np.ndarray:
    """Trapezoidal integral of f(x', y^x_s) over [0, t_end] for a frozen ensemble.

    Returns shape (n, d), or (n,) when a weight vector (beta) is given.
    """
    def integrand(y):
        values = spec.f(x_prime, y)
        return values @ weight if weight is not None else values

    previous = integrand(spec.geometry.wrap(np.array(y0, dtype=float)))
    total = np.zeros_like(previous)
    for _, _, h, y in frozen_steps(spec, x, y0, t_end, dt, rng):
        current = integrand(y)
        total += 0.5 * h * (previous + current)
        previous = current
    return total


def invariant_average_f(spec: SystemSpec, x, t_end: float, dt: float, seed: int,
                        replicas: int = 1, y0=None, jobs: Optional[int] = None) -> np.ndarray:
    """Time average (1/t_end) * integral of f(x, y^x_s) ds, averaged over replicas."""
    if replicas < 1:
        raise ValueError(f"replicas must be >= 1, got {replicas}")
    x_row = as_batch(x, spec.dim_slow)[:1]
    y_row = as_batch(np.zeros(spec.dim_fast) if y0 is None else y0, spec.dim_fast)[:1]

    if replicas == 1:
        path = simulate_frozen(spec, x_row, y_row, t_end, dt, seed)
        values = spec.f(np.repeat(x_row, len(path.times), axis=0), path.states)
        integral = np.sum(0.5 * np.diff(path.times)[:, None] * (values[1:] + values[:-1]), axis=0)
        return integral / t_end

    def block(k: int, n: int) -> np.ndarray:
        rng = streams.generator(seed, streams.STREAM_FROZEN_ENSEMBLE, k)
        xs = np.repeat(x_row, n, axis=0)
        return additive_functional(spec, xs, xs, np.repeat(y_row, n, axis=0), t_end, dt, rng)

    parts = streams.run_replica_blocks(block, replicas, jobs=jobs, label='frozen replica blocks')
    integrals = np.concatenate(parts, axis=0)
    return integrals.mean(axis=0) / t_end
