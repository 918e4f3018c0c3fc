import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import streams
from coefficient_parser import compile_matrix_field, compile_vector_field, variable_names
from errors import ConfigError, UnknownSystemError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

CoefficientFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TorusGeometry:
    dim_fast: int
    period: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.dim_fast < 1:
            raise ValueError(f"dim_fast must be >= 1, got {self.dim_fast}")
        period = self.period or (TWO_PI,) * self.dim_fast
        if len(period) == 1 and self.dim_fast > 1:
            period = tuple(period) * self.dim_fast
        if len(period) != self.dim_fast or any(p <= 0 for p in period):
            raise ValueError(f"need {self.dim_fast} positive periods, got {period}")
        object.__setattr__(self, 'period', tuple(float(p) for p in period))

    @property
    def periods(self) -> np.ndarray:
        return np.asarray(self.period)

    def wrap(self, y: np.ndarray) -> np.ndarray:
        """Map points into the fundamental domain [0, period) coordinatewise."""
        p = self.periods
        wrapped = np.mod(y, p)
        # np.mod can round a tiny negative input up to exactly the period
        return np.where(wrapped >= p, wrapped - p, wrapped)

    def distance(self, y1: np.ndarray, y2: np.ndarray) -> np.ndarray:
        """Minimal-image Euclidean distance along the last axis."""
        p = self.periods
        diff = np.abs(np.mod(np.asarray(y1) - np.asarray(y2), p))
        diff = np.minimum(diff, p - diff)
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def grid(self, n: int) -> Tuple[np.ndarray, ...]:
        return tuple(np.arange(n) * (p / n) for p in self.period)


def as_batch(v, dim: int) -> np.ndarray:
    """Coerce a point or a batch of points into shape (n, dim)."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = np.full((1, dim), float(arr))
    elif arr.ndim == 1:
        arr = arr.reshape(1, dim) if arr.shape[0] == dim else arr.reshape(-1, 1)
    if arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SystemSpec:
    """Coefficients (f, B, C) of a slow-fast system with fast variable on a flat torus.

    Coefficient callables are vectorised: x has shape (n, d), y has shape (n, l);
    f returns (n, d), B returns (n, l) and C returns (n, l, l).
    """
    name: str
    dim_slow: int
    geometry: TorusGeometry
    f: CoefficientFn
    B: CoefficientFn
    C: CoefficientFn
    f_sup_norm: float
    lipschitz_f: float
    nondegeneracy_floor: float
    x_independent: bool = False
    source: Dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.dim_slow < 1:
            raise ValueError(f"dim_slow must be >= 1, got {self.dim_slow}")
        if self.f_sup_norm < 0 or self.lipschitz_f < 0 or self.nondegeneracy_floor <= 0:
            raise ValueError("declared bounds must be nonnegative with a positive nondegeneracy floor")

    @property
    def dim_fast(self) -> int:
        return self.geometry.dim_fast

    def _batches(self, x, y, n: Optional[int] = None):
        xb = as_batch(x, self.dim_slow)
        yb = as_batch(y, self.dim_fast)
        n = n or max(len(xb), len(yb))
        if len(xb) == 1 and n > 1:
            xb = np.repeat(xb, n, axis=0)
        if len(yb) == 1 and n > 1:
            yb = np.repeat(yb, n, axis=0)
        return xb, yb

    def drift(self, x, y) -> np.ndarray:
        xb, yb = self._batches(x, y)
        return self.f(xb, yb)

    def fast_drift(self, x, y) -> np.ndarray:
        xb, yb = self._batches(x, y)
        return self.B(xb, yb)

    def diffusion(self, x, y) -> np.ndarray:
        xb, yb = self._batches(x, y)
        return self.C(xb, yb)

    def covariance(self, x, y) -> np.ndarray:
        c = self.diffusion(x, y)
        return np.einsum('nij,nkj->nik', c, c)

    @property
    def fingerprint(self) -> str:
        payload = json.dumps({'name': self.name, 'source': self.source}, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class BuiltinSystem:
    name: str
    spec: SystemSpec
    notes: str


def _constant_system() -> SystemSpec:
    return SystemSpec(
        name='constant', dim_slow=1, geometry=TorusGeometry(1),
        f=lambda x, y: np.full((len(x), 1), 0.7),
        B=lambda x, y: np.zeros((len(x), 1)),
        C=lambda x, y: np.ones((len(x), 1, 1)),
        f_sup_norm=0.7, lipschitz_f=0.0, nondegeneracy_floor=1.0,
        x_independent=True, source={'builtin': 'constant'},
    )


def _cosine_ring_system() -> SystemSpec:
    return SystemSpec(
        name='cosine-ring', dim_slow=1, geometry=TorusGeometry(1),
        f=lambda x, y: np.cos(y[:, :1]),
        B=lambda x, y: np.zeros((len(x), 1)),
        C=lambda x, y: np.ones((len(x), 1, 1)),
        f_sup_norm=1.0, lipschitz_f=1.0, nondegeneracy_floor=1.0,
        x_independent=True, source={'builtin': 'cosine-ring'},
    )


def _full_dep_system() -> SystemSpec:
    return SystemSpec(
        name='full-dep', dim_slow=1, geometry=TorusGeometry(1),
        f=lambda x, y: np.cos(y[:, :1]),
        B=lambda x, y: 0.3 * np.sin(x[:, :1] - y[:, :1]),
        C=lambda x, y: np.sqrt(1.0 + 0.5 * np.sin(x[:, :1]) * np.cos(y[:, :1]))[:, :, None],
        f_sup_norm=1.0, lipschitz_f=1.0, nondegeneracy_floor=0.5,
        x_independent=False, source={'builtin': 'full-dep'},
    )


TORUS_2D_DIFFUSION = np.array([[1.0, 0.0], [0.4, 1.0]])


def _torus_2d_system() -> SystemSpec:
    return SystemSpec(
        name='torus-2d', dim_slow=2, geometry=TorusGeometry(2),
        f=lambda x, y: np.stack([np.cos(y[:, 0]), np.sin(y[:, 1])], axis=1),
        B=lambda x, y: np.zeros((len(x), 2)),
        C=lambda x, y: np.broadcast_to(TORUS_2D_DIFFUSION, (len(x), 2, 2)).copy(),
        f_sup_norm=math.sqrt(2.0), lipschitz_f=1.0, nondegeneracy_floor=0.6,
        x_independent=True, source={'builtin': 'torus-2d'},
    )


BUILTINS: Dict[str, BuiltinSystem] = {
    'constant': BuiltinSystem(
        'constant', _constant_system(),
        "f = 0.7, B = 0, C = 1. H(beta) = 0.7 beta; L is finite only at alpha = 0.7."),
    'cosine-ring': BuiltinSystem(
        'cosine-ring', _cosine_ring_system(),
        "f = cos y, Brownian fast motion. H(beta) = -a0(4 beta)/8 (Mathieu characteristic value), "
        "approximately beta^2 - 1.75 beta^4 for small beta; zero-rate drift 0; domain (-1, 1)."),
    'full-dep': BuiltinSystem(
        'full-dep', _full_dep_system(),
        "f = cos y, B = 0.3 sin(x - y), C = sqrt(1 + 0.5 sin x cos y). At x = 0 the invariant "
        "density is proportional to exp(0.6 cos y), so the averaged drift is I1(0.6)/I0(0.6)."),
    'torus-2d': BuiltinSystem(
        'torus-2d', _torus_2d_system(),
        "d = l = 2, f = (cos y1, sin y2), constant correlated diffusion CC* = [[1, 0.4], [0.4, 1.16]]."),
}


def builtin(name: str) -> SystemSpec:
    entry = BUILTINS.get(name)
    if entry is None:
        raise UnknownSystemError(name, BUILTINS.keys())
    return entry.spec


def builtin_notes(spec: SystemSpec) -> Optional[str]:
    """Reference values documented for a builtin system; None for closed-form systems."""
    entry = BUILTINS.get(spec.source.get('builtin', ''))
    return entry.notes if entry is not None else None


def describe(spec: SystemSpec) -> Dict[str, Any]:
    return {'name': spec.name, 'fingerprint': spec.fingerprint, 'dim_slow': spec.dim_slow,
            'dim_fast': spec.dim_fast, 'notes': builtin_notes(spec)}


def _references_slow(exprs: Sequence[str], dim_slow: int) -> bool:
    names = set(variable_names(dim_slow, 0))
    return any(name in str(e) for e in exprs for name in names)


def system_from_config(system: Dict[str, Any]) -> SystemSpec:
    """Build a SystemSpec from the `system` section of a run config."""
    if 'builtin' in system:
        extra = set(system) - {'builtin'}
        if extra:
            raise ConfigError(f"system.{sorted(extra)[0]}", "not allowed together with 'builtin'")
        return builtin(system['builtin'])

    for key in ('dim_slow', 'dim_fast', 'f', 'B', 'C', 'f_sup_norm', 'lipschitz_f', 'nondegeneracy_floor'):
        if key not in system:
            raise ConfigError(f"system.{key}", "missing (or give 'builtin')")
    d, l = system['dim_slow'], system['dim_fast']
    if not isinstance(d, int) or isinstance(d, bool) or d < 1:
        raise ConfigError('system.dim_slow', "expected an integer >= 1")
    if not isinstance(l, int) or isinstance(l, bool) or l < 1:
        raise ConfigError('system.dim_fast', "expected an integer >= 1")

    f_exprs, b_exprs, c_rows = system['f'], system['B'], system['C']
    if not isinstance(f_exprs, list) or len(f_exprs) != d:
        raise ConfigError('system.f', f"expected a list of {d} expressions")
    if not isinstance(b_exprs, list) or len(b_exprs) != l:
        raise ConfigError('system.B', f"expected a list of {l} expressions")
    if not isinstance(c_rows, list):
        raise ConfigError('system.C', f"expected a {l}x{l} list of lists")

    period = system.get('period', TWO_PI)
    period = [period] * l if isinstance(period, (int, float)) else period
    try:
        geometry = TorusGeometry(l, tuple(float(p) for p in period))
    except (TypeError, ValueError) as e:
        raise ConfigError('system.period', str(e))

    bounds = {}
    for key in ('f_sup_norm', 'lipschitz_f', 'nondegeneracy_floor'):
        value = system[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
            raise ConfigError(f"system.{key}", "expected a nonnegative number")
        bounds[key] = float(value)
    if bounds['nondegeneracy_floor'] <= 0:
        raise ConfigError('system.nondegeneracy_floor', "expected a positive number")

    flat_c = [e for row in c_rows for e in (row if isinstance(row, list) else [row])]
    x_free = not _references_slow(list(f_exprs) + list(b_exprs) + flat_c, d)
    return SystemSpec(
        name=str(system.get('name', 'custom')), dim_slow=d, geometry=geometry,
        f=compile_vector_field(f_exprs, d, l, 'system.f'),
        B=compile_vector_field(b_exprs, d, l, 'system.B'),
        C=compile_matrix_field(c_rows, d, l, 'system.C'),
        x_independent=x_free, source=dict(system), **bounds,
    )


@dataclass
class ValidationReport:
    system: str
    samples: int
    max_abs_f: float
    lipschitz_f: float
    lipschitz_B: float
    lipschitz_C: float
    min_eig_cc: float
    periodicity_error: float
    nonfinite: int
    violations: List[str] = field(default_factory=list)
    notes: Optional[str] = None

    @property
    def ok(self) -> bool:
        return not self.violations


def _lipschitz_quotient(values_a: np.ndarray, values_b: np.ndarray, gaps: np.ndarray) -> float:
    diff = np.abs(values_a - values_b).reshape(len(gaps), -1)
    diff = np.sqrt(np.sum(diff * diff, axis=1))
    mask = gaps > 1e-12
    if not np.any(mask):
        return 0.0
    return float(np.max(diff[mask] / gaps[mask]))


def validate(spec: SystemSpec, samples: int, seed: int, x_radius: float = math.pi) -> ValidationReport:
    """Spot-check the declared bounds of a system by random sampling.

    Violations are collected in the report, never raised.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    rng = streams.generator(seed, streams.STREAM_VALIDATE)
    d, l = spec.dim_slow, spec.dim_fast
    periods = spec.geometry.periods
    x1 = rng.uniform(-x_radius, x_radius, size=(samples, d))
    x2 = rng.uniform(-x_radius, x_radius, size=(samples, d))
    y1 = rng.uniform(0.0, 1.0, size=(samples, l)) * periods
    y2 = rng.uniform(0.0, 1.0, size=(samples, l)) * periods

    f1, f2 = spec.f(x1, y1), spec.f(x2, y2)
    b1, b2 = spec.B(x1, y1), spec.B(x2, y2)
    c1, c2 = spec.C(x1, y1), spec.C(x2, y2)
    nonfinite = int(sum(np.count_nonzero(~np.isfinite(a)) for a in (f1, f2, b1, b2, c1, c2)))

    gaps = np.sqrt(np.sum((x1 - x2) ** 2, axis=1) + spec.geometry.distance(y1, y2) ** 2)
    cc = np.einsum('nij,nkj->nik', c1, c1)
    with np.errstate(invalid='ignore'):
        min_eig = float(np.min(np.linalg.eigvalsh(cc))) if np.all(np.isfinite(cc)) else float('nan')
    shifted = spec.f(x1, y1 + periods)
    periodicity_error = float(np.max(np.abs(shifted - f1)))

    report = ValidationReport(
        system=spec.name, samples=samples,
        max_abs_f=float(np.max(np.sqrt(np.sum(f1 * f1, axis=1)))),
        lipschitz_f=_lipschitz_quotient(f1, f2, gaps),
        lipschitz_B=_lipschitz_quotient(b1, b2, gaps),
        lipschitz_C=_lipschitz_quotient(c1, c2, gaps),
        min_eig_cc=min_eig, periodicity_error=periodicity_error, nonfinite=nonfinite,
        notes=builtin_notes(spec),
    )

    if nonfinite:
        report.violations.append(f"{nonfinite} nonfinite coefficient values")
    if report.max_abs_f > spec.f_sup_norm + 1e-12:
        report.violations.append(f"max|f| = {report.max_abs_f:.6g} exceeds f_sup_norm = {spec.f_sup_norm:.6g}")
    if report.lipschitz_f > spec.lipschitz_f + 1e-9:
        report.violations.append(f"Lipschitz quotient of f = {report.lipschitz_f:.6g} exceeds {spec.lipschitz_f:.6g}")
    if not min_eig >= spec.nondegeneracy_floor - 1e-12:
        report.violations.append(f"min eig(CC*) = {min_eig:.6g} below floor {spec.nondegeneracy_floor:.6g}")
    if periodicity_error > 1e-9:
        report.violations.append(f"f is not periodic in y (max error {periodicity_error:.3e})")

    for message in report.violations:
        logger.warning(f"System '{spec.name}': {message}")
    return report
