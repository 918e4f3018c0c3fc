import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from errors import ConfigError
from user_settings import (
    DEFAULT_SEED, REPLICA_BLOCK_SIZE, MAX_WORKERS, MOMENT_DT, OCCUPATION_DT,
    COUPLED_DT_FAST, SPECTRAL_GRID_N, MAX_FAST_DIM, EIGEN_TOL, EIGEN_MAX_ITERS,
    POWER_BLOCK, RICHARDSON_CHECK, RICHARDSON_TOL, GRADIENT_STEP,
    SURFACE_BOX_RADIUS, SURFACE_NODES_PER_AXIS, SYNTHETIC_SOLVER_TOL,
    SPECTRAL_SOLVER_TOL, DOMAIN_GRID_N, DEGENERATE_TOL, SCHEDULE_C,
    SCHEDULE_LOG_CAP, MIN_EFFECTIVE_SAMPLE_SIZE, MINPATH_MAX_ITERS, MINPATH_TOL,
    DEFAULT_OUT_DIR, OUT_DIR_ENV_VAR, CSV_FLOAT_FORMAT
)

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

TOOL_VERSION = '1.0.0'


class Settings:
    def __init__(self):
        self.DEFAULT_SEED = int(DEFAULT_SEED)
        self.REPLICA_BLOCK_SIZE = min(1_000_000, max(1, int(REPLICA_BLOCK_SIZE)))
        self.MAX_WORKERS = max(1, min(int(MAX_WORKERS), os.cpu_count() or 4))

        self.MOMENT_DT = min(0.1, max(1e-6, MOMENT_DT))
        self.OCCUPATION_DT = min(0.1, max(1e-6, OCCUPATION_DT))
        self.COUPLED_DT_FAST = min(0.01, max(1e-6, COUPLED_DT_FAST))

        self.SPECTRAL_GRID_N = max(16, int(SPECTRAL_GRID_N))
        self.MAX_FAST_DIM = min(3, max(1, int(MAX_FAST_DIM)))
        self.EIGEN_TOL = max(1e-14, EIGEN_TOL)
        self.EIGEN_MAX_ITERS = max(100, int(EIGEN_MAX_ITERS))
        self.POWER_BLOCK = min(64, max(1, int(POWER_BLOCK)))
        self.RICHARDSON_CHECK = bool(RICHARDSON_CHECK)
        self.RICHARDSON_TOL = max(0.0, RICHARDSON_TOL)
        self.GRADIENT_STEP = min(0.1, max(1e-6, GRADIENT_STEP))
        self.SURFACE_BOX_RADIUS = max(1e-3, SURFACE_BOX_RADIUS)
        self.SURFACE_NODES_PER_AXIS = max(5, int(SURFACE_NODES_PER_AXIS))

        self.SYNTHETIC_SOLVER_TOL = max(1e-14, SYNTHETIC_SOLVER_TOL)
        self.SPECTRAL_SOLVER_TOL = max(1e-14, SPECTRAL_SOLVER_TOL)
        self.DOMAIN_GRID_N = max(32, int(DOMAIN_GRID_N))
        self.DEGENERATE_TOL = max(0.0, DEGENERATE_TOL)

        self.SCHEDULE_C = max(1e-6, SCHEDULE_C)
        self.SCHEDULE_LOG_CAP = max(1e-6, SCHEDULE_LOG_CAP)
        self.MIN_EFFECTIVE_SAMPLE_SIZE = max(1.0, float(MIN_EFFECTIVE_SAMPLE_SIZE))

        self.MINPATH_MAX_ITERS = max(1, int(MINPATH_MAX_ITERS))
        self.MINPATH_TOL = max(1e-14, MINPATH_TOL)

        self.CSV_FLOAT_FORMAT = CSV_FLOAT_FORMAT
        self.OUT_DIR = os.environ.get(OUT_DIR_ENV_VAR) or DEFAULT_OUT_DIR

    def workers(self, jobs: Optional[int] = None) -> int:
        requested = self.MAX_WORKERS if jobs is None else jobs
        return max(1, min(int(requested), os.cpu_count() or 4))


settings = Settings()


# Defaults per CLI command; a run config only has to name what it changes.
SECTION_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'ham': {
        'x_prime': None, 'x': None, 'box_radius': 2.0, 'n_per_axis': 21,
        'grid_n': None,
    },
    'rate': {
        'x': None, 'box_radius': None, 'n_per_axis': None, 'grid_n': None,
        'alphas': {'start': -1.2, 'stop': 1.2, 'num': 25}, 'b': [1.0, 2.0, None],
    },
    'action': {
        'x': None, 'path': {'type': 'linear', 'velocity': None, 'T': 1.0, 'n': 64},
        'm': 16, 'a': 0.0, 'box_radius': None, 'n_per_axis': None, 'grid_n': None,
    },
    'simulate': {
        'x0': None, 'y0': None, 'epsilon': 0.1, 'T': 1.0, 'dt_fast': None,
        'replicas': 8, 'record_every': 100, 'frozen_t_end': 100.0, 'frozen_dt': None, 'bins': 64,
    },
    'verify-lemma5': {
        'x_prime': None, 'x': None, 'y0': None, 'beta': [0.3], 'epsilon': 0.1,
        'Delta': 0.2, 'nu': 0.05, 'replicas': 100_000, 'dt_fast': None,
        't_eps': None, 'grid_n': 256,
    },
    'ldp': {
        'x0': None, 'y0': None, 'path': {'type': 'linear', 'velocity': None, 'T': 1.0, 'n': 100},
        'delta': 0.3, 'epsilons': [0.3, 0.2, 0.15, 0.1], 'replicas': 10_000,
        'dt_fast': None, 'nu': 0.1, 'box_radius': None, 'n_per_axis': None, 'grid_n': None,
        'extra_deltas': [],
    },
    'minpath': {
        'x_start': None, 'x_end': None, 'T': 1.0, 'm': 16, 'max_iters': None,
        'tol': None, 'quasi_newton': False, 'box_radius': None, 'n_per_axis': None, 'grid_n': None,
        'init': 'linear', 'level_set_s': None,
    },
}


@dataclass
class RunConfig:
    command: str
    seed: int
    system: Dict[str, Any]
    section: Dict[str, Any]
    raw: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def parse_override(text: str):
    if '=' not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, value = text.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError(text, "override key is empty")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.split('.'), parsed


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    data = copy.deepcopy(data)
    for text in overrides or []:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[path[-1]] = value
    return data


def load_run_config(path: str, command: str, overrides: Sequence[str] = (),
                    seed: Optional[int] = None) -> RunConfig:
    if command not in SECTION_DEFAULTS:
        raise ConfigError('command', f"unknown command '{command}'")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError('config', f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError('config', f"invalid JSON in {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError('config', "top level must be an object")

    data = apply_overrides(data, overrides)
    if seed is not None:
        data['seed'] = seed
    data.setdefault('seed', settings.DEFAULT_SEED)

    if not isinstance(data.get('system'), dict):
        raise ConfigError('system', "missing or not an object")
    if not isinstance(data['seed'], int) or isinstance(data['seed'], bool) or data['seed'] < 0:
        raise ConfigError('seed', "expected a nonnegative integer")

    section = copy.deepcopy(SECTION_DEFAULTS[command])
    given = data.get(command, {})
    if not isinstance(given, dict):
        raise ConfigError(command, "expected an object")
    unknown = set(given) - set(section)
    if unknown:
        raise ConfigError(f"{command}.{sorted(unknown)[0]}", "unknown field")
    section.update(given)

    logger.info(f"Loaded config {path} for command '{command}' (seed {data['seed']})")
    return RunConfig(command=command, seed=data['seed'], system=data['system'],
                     section=section, raw=data)


class SectionReader:
    """Typed access to one config section with field-level error messages."""

    def __init__(self, name: str, values: Dict[str, Any]):
        self.name = name
        self.values = values

    def _field(self, key: str) -> str:
        return f"{self.name}.{key}"

    def raw(self, key: str, default=None):
        value = self.values.get(key)
        return default if value is None else value

    def positive(self, key: str, default=None) -> float:
        value = self.raw(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
            raise ConfigError(self._field(key), "expected a positive number")
        return float(value)

    def nonnegative(self, key: str, default=None) -> float:
        value = self.raw(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
            raise ConfigError(self._field(key), "expected a nonnegative number")
        return float(value)

    def integer(self, key: str, default=None, minimum: int = 1) -> int:
        value = self.raw(key, default)
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            raise ConfigError(self._field(key), f"expected an integer >= {minimum}")
        return int(value)

    def flag(self, key: str, default: bool = False) -> bool:
        value = self.raw(key, default)
        if not isinstance(value, bool):
            raise ConfigError(self._field(key), "expected true or false")
        return value

    def vector(self, key: str, dim: int, default=None) -> List[float]:
        value = self.raw(key, default)
        if value is None:
            value = [0.0] * dim
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or len(value) != dim:
            raise ConfigError(self._field(key), f"expected a list of {dim} numbers")
        for item in value:
            if isinstance(item, bool) or not isinstance(item, (int, float)) or not math.isfinite(item):
                raise ConfigError(self._field(key), "expected finite numbers")
        return [float(v) for v in value]

    def number_list(self, key: str, allow_null: bool = False) -> List[Optional[float]]:
        value = self.raw(key)
        if isinstance(value, dict):
            try:
                start, stop, num = float(value['start']), float(value['stop']), int(value['num'])
            except (KeyError, TypeError, ValueError):
                raise ConfigError(self._field(key), "range needs numeric start, stop and num")
            if num < 1:
                raise ConfigError(self._field(key), "range num must be >= 1")
            if num == 1:
                return [start]
            step = (stop - start) / (num - 1)
            return [start + i * step for i in range(num)]
        if not isinstance(value, list) or not value:
            raise ConfigError(self._field(key), "expected a non-empty list")
        result = []
        for item in value:
            if item is None and allow_null:
                result.append(None)
            elif isinstance(item, (int, float)) and not isinstance(item, bool) and math.isfinite(item):
                result.append(float(item))
            else:
                raise ConfigError(self._field(key), "expected numbers" + (" or null" if allow_null else ""))
        return result
