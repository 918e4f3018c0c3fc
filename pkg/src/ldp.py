import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from statsmodels.stats.proportion import proportion_confint

import streams
from action import Path
from errors import ConfigError
from model import SystemSpec, as_batch
from twoscale import SimConfig, coupled_steps

logger = logging.getLogger(__name__)

CI_ALPHA = 0.05
MIN_REPLICAS = 1000


@dataclass
class LdpEntry:
    epsilon: float
    replicas: int
    hits: int
    p_hat: float
    ci_low: float
    ci_high: float
    log_prob: float
    log_prob_low: float
    log_prob_high: float
    censored: bool
    coarse_hits: int
    hits_by_delta: Dict[str, int] = field(default_factory=dict)


@dataclass
class LdpEstimate:
    epsilons: List[float]
    delta: float
    entries: List[LdpEntry]
    action_ref: float

    @property
    def log_probs(self) -> List[float]:
        return [e.log_prob for e in self.entries]

    @property
    def all_censored(self) -> bool:
        return all(e.censored for e in self.entries)


def _rescaled_log(epsilon: float, p: float) -> float:
    return epsilon ** 2 * math.log(p) if p > 0 else -math.inf


def make_entry(epsilon: float, distances: np.ndarray, coarse_distances: np.ndarray, delta: float,
               extra_deltas: Sequence[float] = ()) -> LdpEntry:
    """Tube statistics for one epsilon from per-replica sup distances."""
    n = len(distances)
    hits = int(np.count_nonzero(distances < delta))
    low, high = proportion_confint(hits, n, alpha=CI_ALPHA, method='wilson')
    # pin the Wilson ends that are exact in theory
    low = 0.0 if hits == 0 else low
    high = 1.0 if hits == n else high
    censored = hits == 0
    p_hat = hits / n
    return LdpEntry(
        epsilon=epsilon, replicas=n, hits=hits, p_hat=p_hat, ci_low=float(low), ci_high=float(high),
        log_prob=math.nan if censored else _rescaled_log(epsilon, p_hat),
        log_prob_low=_rescaled_log(epsilon, float(low)), log_prob_high=_rescaled_log(epsilon, float(high)),
        censored=censored, coarse_hits=int(np.count_nonzero(coarse_distances < delta)),
        hits_by_delta={f"{d:g}": int(np.count_nonzero(distances < d)) for d in extra_deltas},
    )


def tube_distances(spec: SystemSpec, phi: Path, cfg: SimConfig, y0=None,
                   jobs: Optional[int] = None):
    """Per-replica sup over the simulation grid of |X_t - phi(t)|, plus the same on every 2nd step."""
    if abs(cfg.T - phi.T) > 1e-12 * max(1.0, phi.T):
        raise ConfigError('ldp.T', f"simulation horizon {cfg.T} differs from the path horizon {phi.T}")
    x_row = as_batch(phi.values[0], spec.dim_slow)[:1]
    y_row = as_batch(np.zeros(spec.dim_fast) if y0 is None else y0, spec.dim_fast)[:1]

    def block(k: int, n: int):
        rng = streams.generator(cfg.seed, streams.STREAM_TUBE, k)
        fine = np.zeros(n)
        coarse = np.zeros(n)
        for step, t, x, _ in coupled_steps(spec, np.repeat(x_row, n, axis=0), np.repeat(y_row, n, axis=0),
                                           cfg.epsilon, cfg.T, cfg.dt_fast, rng):
            gap = np.sqrt(np.sum((x - phi.evaluate(t)) ** 2, axis=1))
            fine = np.maximum(fine, gap)
            if step % 2 == 1:
                coarse = np.maximum(coarse, gap)
        return fine, coarse

    parts = streams.run_replica_blocks(block, cfg.replicas, jobs=jobs, label='tube replica blocks')
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _checkpoint_path(directory: str, epsilon: float) -> str:
    return os.path.join(directory, f"ldp_eps_{epsilon:.6g}.json")


def _load_checkpoint(directory: Optional[str], epsilon: float, signature: dict) -> Optional[LdpEntry]:
    if not directory:
        return None
    path = _checkpoint_path(directory, epsilon)
    if not os.path.exists(path):
        return None
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.warning(f"Ignoring unreadable checkpoint {path}: {e}")
        return None
    if data.get('signature') != signature:
        logger.info(f"Checkpoint {path} was made with other settings; recomputing")
        return None
    entry = data['entry']
    for key in ('log_prob', 'log_prob_low', 'log_prob_high'):
        entry[key] = float(entry[key]) if entry[key] is not None else math.nan
    logger.info(f"Resumed eps={epsilon} from checkpoint")
    return LdpEntry(**entry)


def _save_checkpoint(directory: Optional[str], epsilon: float, signature: dict, entry: LdpEntry):
    if not directory:
        return
    os.makedirs(directory, exist_ok=True)
    data = asdict(entry)
    for key in ('log_prob', 'log_prob_low', 'log_prob_high'):
        value = data[key]
        data[key] = None if math.isnan(value) else (str(value) if math.isinf(value) else value)
    with open(_checkpoint_path(directory, epsilon), 'w', encoding='utf-8') as f:
        json.dump({'signature': signature, 'entry': data}, f, indent=2, sort_keys=True)


def tube_probability(spec: SystemSpec, phi: Path, delta: float, cfgs: Sequence[SimConfig],
                     action_ref: float = math.nan, y0=None, extra_deltas: Sequence[float] = (),
                     checkpoint_dir: Optional[str] = None, jobs: Optional[int] = None) -> LdpEstimate:
    """Monte Carlo P(sup_t |X^eps_t - phi_t| < delta) over an epsilon sweep."""
    if not delta > 0:
        raise ConfigError('ldp.delta', "expected a positive tube radius")
    for cfg in cfgs:
        if cfg.replicas < MIN_REPLICAS:
            raise ConfigError('ldp.replicas', f"expected at least {MIN_REPLICAS} replicas per epsilon, "
                                              f"got {cfg.replicas} at eps={cfg.epsilon}")
    entries = []
    for i, cfg in enumerate(cfgs):
        signature = {'system': spec.fingerprint, 'delta': delta, 'replicas': cfg.replicas,
                     'seed': cfg.seed, 'dt_fast': cfg.dt_fast, 'T': cfg.T,
                     'path': phi.to_array().round(12).tolist(), 'extra_deltas': list(extra_deltas)}
        entry = _load_checkpoint(checkpoint_dir, cfg.epsilon, signature)
        if entry is None:
            logger.info(f"Progress: {i + 1}/{len(cfgs)} tube sweep at eps={cfg.epsilon} ({cfg.replicas} replicas)")
            fine, coarse = tube_distances(spec, phi, cfg, y0=y0, jobs=jobs)
            entry = make_entry(cfg.epsilon, fine, coarse, delta, extra_deltas)
            _save_checkpoint(checkpoint_dir, cfg.epsilon, signature, entry)
        if entry.coarse_hits != entry.hits:
            logger.info(f"eps={cfg.epsilon}: grid sensitivity {entry.hits} hits (fine) vs "
                        f"{entry.coarse_hits} (every 2nd step)")
        entries.append(entry)

    estimate = LdpEstimate(epsilons=[c.epsilon for c in cfgs], delta=delta, entries=entries,
                           action_ref=action_ref)
    if estimate.all_censored:
        logger.warning("Every epsilon in the sweep is censored (no replica stayed in the tube)")
    return estimate


@dataclass
class TrendReport:
    status: str
    monotone: Optional[bool] = None
    gap: Optional[float] = None
    nu_hat: Optional[float] = None
    nu: Optional[float] = None
    lower_bound_holds: Optional[bool] = None
    smallest_epsilon: Optional[float] = None


def trend_check(est: LdpEstimate, nu: float = 0.1) -> TrendReport:
    """Compare eps^2 log p-hat with -S(phi) along the sweep."""
    usable = sorted([e for e in est.entries if not e.censored], key=lambda e: -e.epsilon)
    if len(usable) < 3:
        return TrendReport(status='no uncensored data', nu=nu)

    monotone = True
    for previous, current in zip(usable, usable[1:]):
        overlap = current.log_prob_high >= previous.log_prob_low
        if current.log_prob < previous.log_prob and not overlap:
            monotone = False

    last = usable[-1]
    S = est.action_ref
    if math.isfinite(S):
        gap = last.log_prob + S
        nu_hat = max(0.0, -S - last.log_prob)
    else:
        gap, nu_hat = math.inf, 0.0
    return TrendReport(status='ok', monotone=monotone, gap=gap, nu_hat=nu_hat, nu=nu,
                       lower_bound_holds=nu_hat <= nu, smallest_epsilon=last.epsilon)
