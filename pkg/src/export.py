import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from action import Path
from config import TOOL_VERSION, settings
from hamiltonian import HamiltonianSurface
from model import SystemSpec

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'


def to_jsonable(value: Any) -> Any:
    """numpy scalars/arrays to Python, +-inf to strings and nan to null."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    return value


def write_json(data: Any, path: str) -> str:
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_jsonable(data), f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Saved {path}")
    return path


def write_csv(frame: pd.DataFrame, path: str) -> str:
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    frame.to_csv(path, index=False, float_format=settings.CSV_FLOAT_FORMAT, lineterminator='\n')
    logger.info(f"Saved {len(frame)} rows to {path}")
    return path


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    tool_version: str = TOOL_VERSION
    outputs: List[str] = field(default_factory=list)
    system: Dict[str, Any] = field(default_factory=dict)

    def add(self, path: str):
        self.outputs.append(os.path.basename(path))

    def write(self, out_dir: str) -> str:
        data = {'command': self.command, 'config_hash': self.config_hash, 'seed': self.seed,
                'tool_version': self.tool_version, 'outputs': sorted(self.outputs), 'system': self.system}
        return write_json(data, os.path.join(out_dir, MANIFEST_FILE))


def surface_frame(surface: HamiltonianSurface) -> pd.DataFrame:
    """One row per beta node: beta_k, H, dH_k and the eigenfunction minimum."""
    d = surface.dim
    nodes = surface.beta_grid
    columns: Dict[str, Any] = {f"beta_{k + 1}": nodes[:, k] for k in range(d)}
    columns['H'] = surface.values.ravel()
    gradients = surface.gradients.reshape(-1, d)
    for k in range(d):
        columns[f"dH_{k + 1}"] = gradients[:, k]
    if surface.eigen_min is not None:
        columns['eigen_min'] = np.asarray(surface.eigen_min).ravel()
    else:
        columns['eigen_min'] = np.full(len(nodes), np.nan)
    return pd.DataFrame(columns)


def save_surface(surface: HamiltonianSurface, out_dir: str, stem: str = 'surface') -> List[str]:
    csv_path = write_csv(surface_frame(surface), os.path.join(out_dir, f"{stem}.csv"))
    sidecar = {'x_prime': surface.x_prime, 'x': surface.x, 'grid_n': surface.grid_n,
               'shape': [len(a) for a in surface.axes], 'checks': surface.checks,
               'system': surface.spec.name if surface.spec is not None else None,
               'fingerprint': surface.fingerprint, 'tolerances': surface.tolerances}
    json_path = write_json(sidecar, os.path.join(out_dir, f"{stem}.json"))
    return [csv_path, json_path]


def load_surface(csv_path: str, spec: Optional[SystemSpec] = None) -> HamiltonianSurface:
    """Rebuild a tabulated surface from its CSV and JSON sidecar.

    With a spec, the sidecar fingerprint must match it and the spec is attached.
    """
    frame = pd.read_csv(csv_path)
    beta_cols = [c for c in frame.columns if c.startswith('beta_')]
    d = len(beta_cols)
    axes = tuple(np.unique(frame[c].to_numpy(dtype=float)) for c in beta_cols)
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != len(frame):
        raise ValueError(f"{csv_path} is not a full rectangular beta grid")
    frame = frame.sort_values(beta_cols).reset_index(drop=True)
    values = frame['H'].to_numpy(dtype=float).reshape(shape)
    gradients = frame[[f"dH_{k + 1}" for k in range(d)]].to_numpy(dtype=float).reshape(shape + (d,))
    eigen_min = frame['eigen_min'].to_numpy(dtype=float).reshape(shape) if 'eigen_min' in frame else None

    sidecar_path = os.path.splitext(csv_path)[0] + '.json'
    x_prime = x = np.zeros(d)
    grid_n, checks, fingerprint, tolerances = 0, {}, None, {}
    if os.path.exists(sidecar_path):
        with open(sidecar_path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
        x_prime = np.asarray(meta.get('x_prime', x_prime), dtype=float)
        x = np.asarray(meta.get('x', x), dtype=float)
        grid_n = int(meta.get('grid_n') or 0)
        checks = meta.get('checks') or {}
        fingerprint = meta.get('fingerprint')
        tolerances = meta.get('tolerances') or {}
    if spec is not None:
        if fingerprint is not None and fingerprint != spec.fingerprint:
            raise ValueError(f"{csv_path} was tabulated for another system than '{spec.name}'")
        fingerprint = spec.fingerprint
    return HamiltonianSurface(x_prime=x_prime, x=x, axes=axes, values=values, gradients=gradients,
                              eigen_min=eigen_min, grid_n=grid_n, checks=checks, spec=spec,
                              fingerprint=fingerprint, tolerances=tolerances)


def table_frame(columns: Sequence[str], data: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(data, columns=list(columns))


def path_frame(path: Path) -> pd.DataFrame:
    return pd.DataFrame(path.to_array(), columns=path.columns())


def write_path(path: Path, file_path: str) -> str:
    return write_csv(path_frame(path), file_path)


def read_path(file_path: str) -> Path:
    """Path CSV with a `t` column and x_1..x_d columns on a uniform grid from 0."""
    frame = pd.read_csv(file_path)
    if 't' not in frame.columns:
        raise ValueError(f"{file_path}: missing 't' column")
    value_cols = [c for c in frame.columns if c.startswith('x_')]
    if not value_cols:
        raise ValueError(f"{file_path}: no x_k columns")
    return Path(frame['t'].to_numpy(dtype=float), frame[value_cols].to_numpy(dtype=float))


def rows_frame(rows: Sequence[Dict[str, Any]], vector_keys: Sequence[str] = ()) -> pd.DataFrame:
    """Flatten vector-valued entries (alpha, beta_star, ...) into key_1..key_d columns."""
    flat = []
    for row in rows:
        out: Dict[str, Any] = {}
        for key, value in row.items():
            if key in vector_keys:
                for k, v in enumerate(np.atleast_1d(value)):
                    out[f"{key}_{k + 1}"] = float(v)
            else:
                out[key] = value
        flat.append(out)
    return pd.DataFrame(flat)


def output_dir(out_dir: Optional[str], command: str) -> str:
    base = out_dir or settings.OUT_DIR
    path = os.path.join(base, command)
    os.makedirs(path, exist_ok=True)
    return path
