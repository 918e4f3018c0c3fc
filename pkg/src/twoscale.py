import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

import streams
from config import settings
from errors import ConfigError, SimulationBlowupError
from fastsim import euler_step, time_steps
from hamiltonian import log_mean_exp
from model import SystemSpec, as_batch

logger = logging.getLogger(__name__)


@dataclass
class SimConfig:
    epsilon: float
    T: float
    dt_fast: float = settings.COUPLED_DT_FAST
    seed: int = settings.DEFAULT_SEED
    replicas: int = 1

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ConfigError('epsilon', f"expected 0 < epsilon <= 1, got {self.epsilon}")
        if not self.T > 0:
            raise ConfigError('T', f"expected a positive horizon, got {self.T}")
        if not 0 < self.dt_fast <= 0.01:
            raise ConfigError('dt_fast', f"expected 0 < dt_fast <= 0.01, got {self.dt_fast}")
        if self.replicas < 1:
            raise ConfigError('replicas', f"expected at least one replica, got {self.replicas}")

    @property
    def step(self) -> float:
        """Original-time step resolving the rescaled fast process at dt_fast."""
        return self.dt_fast * self.epsilon ** 2


@dataclass
class CoupledTrajectory:
    times: np.ndarray
    slow: np.ndarray
    fast: np.ndarray
    seed: int

    @property
    def replicas(self) -> int:
        return self.slow.shape[0]

    def final_slow(self) -> np.ndarray:
        return self.slow[:, -1, :]

    def columns(self) -> List[str]:
        d, l = self.slow.shape[2], self.fast.shape[2]
        return (['replica', 't'] + [f"x_{k + 1}" for k in range(d)] + [f"y_{j + 1}" for j in range(l)])

    def to_array(self) -> np.ndarray:
        rows = []
        for r in range(self.replicas):
            ids = np.full(len(self.times), float(r))
            rows.append(np.column_stack([ids, self.times, self.slow[r], self.fast[r]]))
        return np.vstack(rows)


@dataclass
class TwoScaleSchedule:
    Delta: float
    t_eps: float
    nu: float

    @classmethod
    def default(cls, epsilon: float, Delta: float, nu: float, c: Optional[float] = None) -> 'TwoScaleSchedule':
        """t(eps) = c * sqrt(log(1/eps)), capped so that t(eps) eps^2 <= Delta."""
        c = settings.SCHEDULE_C if c is None else c
        log_inv = math.log(1.0 / epsilon)
        t_eps = c * math.sqrt(max(log_inv, 0.0))
        t_eps = min(t_eps, settings.SCHEDULE_LOG_CAP * log_inv, Delta / epsilon ** 2)
        return cls(Delta=Delta, t_eps=t_eps, nu=nu)

    def check(self, epsilon: float):
        if self.Delta <= 0 or self.t_eps <= 0 or self.nu <= 0:
            raise ConfigError('schedule', "Delta, t_eps and nu must be positive")
        if self.t_eps * epsilon ** 2 > self.Delta * (1 + 1e-12):
            raise ConfigError('schedule.t_eps', f"t_eps * eps^2 = {self.t_eps * epsilon ** 2:.3g} exceeds "
                                                f"Delta = {self.Delta}")
        log_inv = math.log(1.0 / epsilon)
        if log_inv > 0 and self.t_eps > settings.SCHEDULE_LOG_CAP * log_inv * (1 + 1e-12):
            raise ConfigError('schedule.t_eps', "t_eps / log(1/eps) exceeds the configured cap")


def coupled_steps(spec: SystemSpec, x: np.ndarray, y: np.ndarray, epsilon: float, horizon: float,
                  dt_fast: float, rng: np.random.Generator) -> Iterator[Tuple[int, float, np.ndarray, np.ndarray]]:
    """Yield (step, original time, X, Y) for an ensemble of the coupled system.

    The step in original time is dt_fast * eps^2; the fast update uses the
    rescaled step so it reads exactly like the frozen dynamics.
    """
    x = np.array(x, dtype=float)
    y = spec.geometry.wrap(np.array(y, dtype=float))
    n, l = y.shape
    eps2 = epsilon ** 2
    t = 0.0
    for k, h in enumerate(time_steps(horizon, dt_fast * eps2)):
        noise = rng.standard_normal((n, l))
        drift = spec.f(x, y)
        y = euler_step(spec, x, y, h / eps2, noise)
        x = x + drift * h
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise SimulationBlowupError(k, 'coupled simulation')
        t += h
        yield k, t, x, y


def simulate_coupled(spec: SystemSpec, x0, y0, cfg: SimConfig, record_every: int = 1,
                     jobs: Optional[int] = None) -> CoupledTrajectory:
    """Euler-Maruyama in original time for cfg.replicas replicas, recorded every few steps."""
    if record_every < 1:
        raise ValueError(f"record_every must be >= 1, got {record_every}")
    x_row = as_batch(x0, spec.dim_slow)[:1]
    y_row = as_batch(y0, spec.dim_fast)[:1]
    n_steps = len(time_steps(cfg.T, cfg.step))

    def block(k: int, n: int):
        rng = streams.generator(cfg.seed, streams.STREAM_COUPLED, k)
        times, slow, fast = [0.0], [np.repeat(x_row, n, axis=0)], [np.repeat(spec.geometry.wrap(y_row), n, axis=0)]
        for step, t, x, y in coupled_steps(spec, slow[0], fast[0], cfg.epsilon, cfg.T, cfg.dt_fast, rng):
            if (step + 1) % record_every == 0 or step == n_steps - 1:
                times.append(t if step < n_steps - 1 else cfg.T)
                slow.append(x)
                fast.append(y)
        return np.array(times), np.stack(slow, axis=1), np.stack(fast, axis=1)

    parts = streams.run_replica_blocks(block, cfg.replicas, jobs=jobs, label='coupled replica blocks')
    times = parts[0][0]
    slow = np.concatenate([p[1] for p in parts], axis=0)
    fast = np.concatenate([p[2] for p in parts], axis=0)
    return CoupledTrajectory(times=times, slow=slow, fast=fast, seed=cfg.seed)


def coupling_error(spec: SystemSpec, x, cfg: SimConfig, t_eps: float, y0=None,
                   jobs: Optional[int] = None) -> float:
    """Mean over replicas of sup over [0, t_eps] (rescaled time) of |y_t - y^x_t|^2 on the torus.

    Both fast motions start at y0 with X_0 = x and share every Gaussian increment.
    """
    if t_eps * cfg.epsilon ** 2 > cfg.T * (1 + 1e-12):
        raise ValueError(f"t_eps * eps^2 = {t_eps * cfg.epsilon ** 2:.3g} exceeds T = {cfg.T}")
    x_row = as_batch(x, spec.dim_slow)[:1]
    y_row = spec.geometry.wrap(as_batch(np.zeros(spec.dim_fast) if y0 is None else y0, spec.dim_fast)[:1])
    eps2 = cfg.epsilon ** 2

    def block(k: int, n: int) -> np.ndarray:
        rng = streams.generator(cfg.seed, streams.STREAM_COUPLING_ERROR, k)
        frozen_x = np.repeat(x_row, n, axis=0)
        slow = frozen_x.copy()
        true_y = np.repeat(y_row, n, axis=0)
        frozen_y = true_y.copy()
        worst = np.zeros(n)
        for step, h in enumerate(time_steps(t_eps, cfg.dt_fast)):
            noise = rng.standard_normal(true_y.shape)
            drift = spec.f(slow, true_y)
            true_y = euler_step(spec, slow, true_y, h, noise)
            frozen_y = euler_step(spec, frozen_x, frozen_y, h, noise)
            slow = slow + eps2 * h * drift
            if not np.all(np.isfinite(true_y)):
                raise SimulationBlowupError(step, 'coupling error')
            worst = np.maximum(worst, spec.geometry.distance(true_y, frozen_y) ** 2)
        return worst

    sups = np.concatenate(streams.run_replica_blocks(block, cfg.replicas, jobs=jobs))
    return float(np.mean(sups))


def coupling_bound(constant: float, epsilon: float, t_eps: float) -> float:
    return constant * t_eps ** 2 * epsilon ** 2 * math.exp(constant * t_eps)


def fit_coupling_constant(error: float, epsilon: float, t_eps: float) -> float:
    """Solve error = C t^2 eps^2 exp(C t) for C >= 0."""
    if error <= 0:
        return 0.0
    upper = 1.0
    while coupling_bound(upper, epsilon, t_eps) < error:
        upper *= 2.0
    return float(brentq(lambda c: coupling_bound(c, epsilon, t_eps) - error, 0.0, upper, xtol=1e-14))


@dataclass
class Lemma5Report:
    beta: List[float]
    epsilon: float
    Delta: float
    t_eps: float
    nu: float
    lambda_hat: float
    delta_h: float
    nu_hat: float
    passed: bool
    effective_sample_size: float
    replicas: int
    unreliable: bool
    block_nu_hat: List[float] = field(default_factory=list)
    block_lambda_hat: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_lemma5(spec: SystemSpec, x_prime, x, beta, cfg: SimConfig, schedule: TwoScaleSchedule,
                  H_ref: float, y0=None, jobs: Optional[int] = None) -> Lemma5Report:
    """Empirical check of exp(eps^-2 Delta (H -+ nu)) bounds on the exponential moment.

    Lambda-hat = eps^2 log mean exp(beta . eps^-2 integral_0^Delta f(x', Y_s) ds) from a
    coupled simulation started at X_0 = x; the same quantity is reported per
    fast block of length t(eps).
    """
    schedule.check(cfg.epsilon)
    d = spec.dim_slow
    beta = as_batch(beta, d)[0]
    x_row = as_batch(x, d)[:1]
    xp_row = as_batch(x_prime, d)[:1]
    y_row = as_batch(np.zeros(spec.dim_fast) if y0 is None else y0, spec.dim_fast)[:1]
    eps2 = cfg.epsilon ** 2
    horizon = schedule.Delta / eps2
    block_edges = np.arange(schedule.t_eps, horizon + 1e-12, schedule.t_eps)
    n_blocks = len(block_edges)

    def block(k: int, n: int) -> np.ndarray:
        rng = streams.generator(cfg.seed, streams.STREAM_LEMMA5, k)
        slow = np.repeat(x_row, n, axis=0)
        fast = spec.geometry.wrap(np.repeat(y_row, n, axis=0))
        xp = np.repeat(xp_row, n, axis=0)
        previous = spec.f(xp, fast) @ beta
        totals = np.zeros((n, n_blocks + 1))
        t = 0.0
        for step, h in enumerate(time_steps(horizon, cfg.dt_fast)):
            noise = rng.standard_normal(fast.shape)
            drift = spec.f(slow, fast)
            fast = euler_step(spec, slow, fast, h, noise)
            slow = slow + eps2 * h * drift
            if not np.all(np.isfinite(slow)):
                raise SimulationBlowupError(step, 'two-scale exponential moment')
            current = spec.f(xp, fast) @ beta
            which = min(int(np.searchsorted(block_edges, t + 0.5 * h)), n_blocks)
            totals[:, which] += 0.5 * h * (previous + current)
            previous = current
            t += h
        return totals

    totals = np.concatenate(streams.run_replica_blocks(block, cfg.replicas, jobs=jobs), axis=0)
    lme, _, ess = log_mean_exp(totals.sum(axis=1))
    lambda_hat = eps2 * lme
    delta_h = schedule.Delta * H_ref
    nu_hat = abs(lambda_hat - delta_h) / schedule.Delta
    unreliable = ess < settings.MIN_EFFECTIVE_SAMPLE_SIZE
    if unreliable:
        logger.warning(f"Exponential-moment estimate unreliable: effective sample size {ess:.1f}")

    block_lambda, block_nu = [], []
    block_scale = eps2 * schedule.t_eps
    for j in range(n_blocks):
        lme_j, _, _ = log_mean_exp(totals[:, j])
        block_lambda.append(eps2 * lme_j)
        block_nu.append(abs(eps2 * lme_j - block_scale * H_ref) / block_scale)

    passed = bool(nu_hat <= schedule.nu and not unreliable)
    logger.info(f"Exponential moment at beta={beta.tolist()}, eps={cfg.epsilon}: Lambda-hat {lambda_hat:.6g}, "
                f"Delta*H {delta_h:.6g}, nu-hat {nu_hat:.4g} ({'pass' if passed else 'fail'})")
    return Lemma5Report(beta=beta.tolist(), epsilon=cfg.epsilon, Delta=schedule.Delta,
                        t_eps=schedule.t_eps, nu=schedule.nu, lambda_hat=lambda_hat, delta_h=delta_h,
                        nu_hat=nu_hat, passed=passed, effective_sample_size=ess,
                        replicas=cfg.replicas, unreliable=unreliable,
                        block_nu_hat=block_nu, block_lambda_hat=block_lambda)
