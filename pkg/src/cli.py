import argparse
import logging
import os
import sys
from dataclasses import asdict
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from action import Path, action, averaged_flow, discretize
from coefficient_parser import compile_time_function
from config import RunConfig, SectionReader, load_run_config, settings
from errors import ConfigError, LdpToolkitError
from export import (RunManifest, output_dir, path_frame, read_path, rows_frame, save_surface,
                    table_frame, write_csv, write_json, write_path)
from fastsim import occupation, simulate_frozen
from hamiltonian import build_surface, h_spectral
from ldp import tube_probability, trend_check
from minpath import MinActionProblem, level_set_distance, minimize_action
from model import SystemSpec, builtin_notes, describe, system_from_config
from rate import RateField, domain_box, interior_slope_check, tabulate_l_curve
from twoscale import SimConfig, TwoScaleSchedule, simulate_coupled, verify_lemma5
from user_settings import OUT_DIR_ENV_VAR

logger = logging.getLogger(__name__)

COMMANDS = ('ham', 'rate', 'action', 'simulate', 'verify-lemma5', 'ldp', 'minpath')
LOG_FILE = 'run.log'


class RunContext:
    """What every command needs: the parsed config, system, output dir and manifest."""

    def __init__(self, run: RunConfig, out_dir: str, jobs: Optional[int]):
        self.run = run
        self.spec: SystemSpec = system_from_config(run.system)
        self.section = SectionReader(run.command, run.section)
        self.out_dir = out_dir
        self.jobs = jobs
        self.manifest = RunManifest(run.command, run.config_hash, run.seed, system=describe(self.spec))

    def out(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def record(self, *paths: str):
        for p in paths:
            self.manifest.add(p)

    def slow_vector(self, key: str) -> np.ndarray:
        return np.array(self.section.vector(key, self.spec.dim_slow))

    def fast_vector(self, key: str) -> np.ndarray:
        return np.array(self.section.vector(key, self.spec.dim_fast))

    def rate_field(self) -> RateField:
        s = self.section
        return RateField(self.spec,
                         box_radius=s.positive('box_radius', settings.SURFACE_BOX_RADIUS),
                         n_per_axis=s.integer('n_per_axis', settings.SURFACE_NODES_PER_AXIS, minimum=5),
                         grid_n=s.integer('grid_n', settings.SPECTRAL_GRID_N, minimum=16),
                         jobs=self.jobs)


def _build_path(ctx: RunContext, start_key: str, rate: Optional[RateField] = None) -> Path:
    """Path from the `path` sub-section: linear, constant, file, flow or expression."""
    spec = ctx.spec
    raw = ctx.section.raw('path', {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{ctx.run.command}.path", "expected an object")
    reader = SectionReader(f"{ctx.run.command}.path", raw)
    kind = reader.raw('type', 'linear')
    if kind == 'file':
        file_name = reader.raw('file')
        if not isinstance(file_name, str):
            raise ConfigError(f"{ctx.run.command}.path.file", "expected a CSV file name")
        try:
            path = read_path(file_name)
        except (OSError, ValueError) as e:
            raise ConfigError(f"{ctx.run.command}.path.file", str(e))
        if path.dim != spec.dim_slow:
            raise ConfigError(f"{ctx.run.command}.path.file", f"expected {spec.dim_slow} x columns")
        return path

    x0 = ctx.slow_vector(start_key)
    T = reader.positive('T', 1.0)
    n = reader.integer('n', 64)
    if kind == 'linear':
        return Path.linear(x0, reader.vector('velocity', spec.dim_slow), T, n)
    if kind == 'constant':
        return Path.constant(x0, T, n)
    if kind == 'flow':
        return averaged_flow(rate or ctx.rate_field(), x0, T, n)
    if kind == 'expression':
        exprs = reader.raw('x')
        if not isinstance(exprs, list) or len(exprs) != spec.dim_slow:
            raise ConfigError(f"{ctx.run.command}.path.x", f"expected {spec.dim_slow} expressions in t")
        return Path.from_function(compile_time_function(exprs, f"{ctx.run.command}.path.x"), T, n)
    raise ConfigError(f"{ctx.run.command}.path.type", "expected linear, constant, file, flow or expression")


def cmd_ham(ctx: RunContext):
    s = ctx.section
    radius = s.positive('box_radius')
    box = [(-radius, radius)] * ctx.spec.dim_slow
    surface = build_surface(ctx.spec, ctx.slow_vector('x_prime'), ctx.slow_vector('x'), box,
                            s.integer('n_per_axis', minimum=5),
                            grid_n=s.integer('grid_n', settings.SPECTRAL_GRID_N, minimum=16), jobs=ctx.jobs)
    ctx.record(*save_surface(surface, ctx.out_dir))


def _alpha_list(ctx: RunContext) -> List[np.ndarray]:
    d = ctx.spec.dim_slow
    if d == 1:
        return [np.array([a]) for a in ctx.section.number_list('alphas')]
    raw = ctx.section.raw('alphas')
    if not isinstance(raw, list) or not raw:
        raise ConfigError('rate.alphas', f"expected a non-empty list of {d}-vectors")
    reader = SectionReader('rate.alphas', {str(i): v for i, v in enumerate(raw)})
    return [np.array(reader.vector(str(i), d)) for i in range(len(raw))]


def cmd_rate(ctx: RunContext):
    x = ctx.slow_vector('x')
    alphas = _alpha_list(ctx)
    bs = ctx.section.number_list('b', allow_null=True)
    surface = ctx.rate_field().surface_at(x)
    rows = tabulate_l_curve(surface, alphas, bs)
    ctx.record(write_csv(rows_frame(rows, vector_keys=('alpha', 'beta_star')), ctx.out('l_curve.csv')))

    box = domain_box(ctx.spec, x)
    slopes = interior_slope_check(surface, box)
    summary = {'x': x, 'averaged_drift': surface.gradient_at_zero(),
               'domain_box': {'directions': box.directions, 'm': box.m, 'M': box.M,
                              'degenerate': box.degenerate},
               'slope_check': asdict(slopes), 'surface_checks': surface.checks}
    ctx.record(write_json(summary, ctx.out('rate_summary.json')))


def cmd_action(ctx: RunContext):
    rate = ctx.rate_field()
    path = _build_path(ctx, 'x', rate)
    m = ctx.section.integer('m')
    a = ctx.section.nonnegative('a')
    continuous = action(path, rate)
    discretized = action(discretize(path, m, a), rate)
    segments = pd.DataFrame({'segment': np.arange(path.n_segments), 't_start': path.times[:-1],
                             'contribution': continuous.per_segment})
    ctx.record(write_path(path, ctx.out('path.csv')),
               write_csv(segments, ctx.out('action_segments.csv')),
               write_json({'action': continuous.to_dict(), 'discretized': discretized.to_dict()},
                          ctx.out('action.json')))


def _sim_config(ctx: RunContext, epsilon: float, T: float, replicas: int) -> SimConfig:
    dt_fast = ctx.section.positive('dt_fast', settings.COUPLED_DT_FAST)
    return SimConfig(epsilon=epsilon, T=T, dt_fast=dt_fast, seed=ctx.run.seed, replicas=replicas)


def cmd_simulate(ctx: RunContext):
    s = ctx.section
    x0, y0 = ctx.slow_vector('x0'), ctx.fast_vector('y0')
    cfg = _sim_config(ctx, s.positive('epsilon'), s.positive('T'), s.integer('replicas'))
    trajectory = simulate_coupled(ctx.spec, x0, y0, cfg, record_every=s.integer('record_every'), jobs=ctx.jobs)
    frame = pd.DataFrame(trajectory.to_array(), columns=trajectory.columns())
    frame['replica'] = frame['replica'].astype(int)
    final = trajectory.final_slow()

    frozen = simulate_frozen(ctx.spec, x0, y0, s.positive('frozen_t_end'),
                             s.positive('frozen_dt', settings.OCCUPATION_DT), ctx.run.seed)
    measure = occupation(frozen, s.integer('bins', minimum=2))
    ctx.record(write_csv(frame, ctx.out('trajectories.csv')),
               write_csv(table_frame(*frozen.to_rows()), ctx.out('frozen_path.csv')),
               write_csv(table_frame(*measure.to_rows()), ctx.out('occupation.csv')),
               write_json({'epsilon': cfg.epsilon, 'T': cfg.T, 'step': cfg.step, 'replicas': cfg.replicas,
                           'final_slow_mean': final.mean(axis=0), 'final_slow_std': final.std(axis=0),
                           'frozen_x': frozen.frozen_x, 'occupation_total_time': measure.total_time},
                          ctx.out('simulate.json')))


def _beta_list(ctx: RunContext) -> List[np.ndarray]:
    d = ctx.spec.dim_slow
    raw = ctx.section.raw('beta')
    if not isinstance(raw, list) or not raw:
        raise ConfigError('verify-lemma5.beta', "expected a non-empty list")
    reader = SectionReader('verify-lemma5.beta', {str(i): v for i, v in enumerate(raw)})
    return [np.array(reader.vector(str(i), d)) for i in range(len(raw))]


def cmd_verify_lemma5(ctx: RunContext):
    s = ctx.section
    epsilon, Delta, nu = s.positive('epsilon'), s.positive('Delta'), s.positive('nu')
    t_eps = s.raw('t_eps')
    schedule = (TwoScaleSchedule.default(epsilon, Delta, nu) if t_eps is None
                else TwoScaleSchedule(Delta, s.positive('t_eps'), nu))
    cfg = _sim_config(ctx, epsilon, Delta, s.integer('replicas'))
    x_prime, x, y0 = ctx.slow_vector('x_prime'), ctx.slow_vector('x'), ctx.fast_vector('y0')
    grid_n = s.integer('grid_n', minimum=16)

    reports = []
    for i, beta in enumerate(_beta_list(ctx)):
        logger.info(f"Progress: {i + 1}/{len(s.raw('beta'))} exponential-moment checks")
        H_ref = h_spectral(ctx.spec, x_prime, x, beta, grid_n=grid_n).eigenvalue
        report = verify_lemma5(ctx.spec, x_prime, x, beta, cfg, schedule, H_ref, y0=y0, jobs=ctx.jobs)
        reports.append(dict(report.to_dict(), H_ref=H_ref))
    ctx.record(write_json({'passed': all(r['passed'] for r in reports), 'reports': reports},
                          ctx.out('lemma5.json')))


def cmd_ldp(ctx: RunContext):
    s = ctx.section
    rate = ctx.rate_field()
    phi = _build_path(ctx, 'x0', rate)
    delta = s.positive('delta')
    replicas = s.integer('replicas')
    extra = s.raw('extra_deltas', [])
    extra_deltas = s.number_list('extra_deltas') if extra else []
    cfgs = [_sim_config(ctx, eps, phi.T, replicas) for eps in s.number_list('epsilons')]
    action_ref = action(phi, rate).value

    estimate = tube_probability(ctx.spec, phi, delta, cfgs, action_ref=action_ref,
                                y0=ctx.fast_vector('y0'), extra_deltas=extra_deltas,
                                checkpoint_dir=ctx.out('checkpoints'), jobs=ctx.jobs)
    rows = []
    for entry in estimate.entries:
        row = asdict(entry)
        for radius, hits in row.pop('hits_by_delta').items():
            row[f"hits_delta_{radius}"] = hits
        rows.append(row)
    report = trend_check(estimate, nu=s.positive('nu'))
    ctx.record(write_path(phi, ctx.out('path.csv')),
               write_csv(pd.DataFrame(rows), ctx.out('ldp.csv')),
               write_json({'delta': delta, 'action_ref': action_ref, 'trend': asdict(report),
                           'all_censored': estimate.all_censored}, ctx.out('ldp.json')))


def cmd_minpath(ctx: RunContext):
    s = ctx.section
    problem = MinActionProblem(
        rate=ctx.rate_field(), x_start=ctx.slow_vector('x_start'), x_end=ctx.slow_vector('x_end'),
        T=s.positive('T'), m=s.integer('m', minimum=2),
        max_iters=s.integer('max_iters', settings.MINPATH_MAX_ITERS),
        tol=s.positive('tol', settings.MINPATH_TOL), quasi_newton=s.flag('quasi_newton'))
    init = s.raw('init')
    if init != 'linear':
        if not isinstance(init, str):
            raise ConfigError('minpath.init', "expected 'linear' or a path CSV file")
        try:
            init = read_path(init)
        except (OSError, ValueError) as e:
            raise ConfigError('minpath.init', str(e))

    result = minimize_action(problem, init)
    summary: Dict[str, Any] = {'result': result.to_dict()}
    level = s.raw('level_set_s')
    if level is not None:
        found = level_set_distance(result.path, s.nonnegative('level_set_s'), problem)
        summary['level_set'] = {'s': level, 'distance': found.distance,
                                'achieved_action': found.achieved_action,
                                'converged': found.converged, 'flag': found.flag}
    ctx.record(write_csv(path_frame(result.path), ctx.out('minpath_path.csv')),
               write_csv(pd.DataFrame({'iteration': np.arange(len(result.per_iter)),
                                       'action': result.per_iter}), ctx.out('minpath_trace.csv')),
               write_json(summary, ctx.out('minpath.json')))


HANDLERS: Dict[str, Callable[[RunContext], None]] = {
    'ham': cmd_ham,
    'rate': cmd_rate,
    'action': cmd_action,
    'simulate': cmd_simulate,
    'verify-lemma5': cmd_verify_lemma5,
    'ldp': cmd_ldp,
    'minpath': cmd_minpath,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='slowfast-ldp',
        description='Large deviations of averaged slow-fast diffusions: Hamiltonians, rates, actions, simulations.')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', required=True, help='JSON run configuration')
    parser.add_argument('--seed', type=int, default=None, help='master seed (overrides the config)')
    parser.add_argument('--jobs', type=int, default=None, help='worker threads')
    parser.add_argument('--out-dir', default=None,
                        help=f"output root (default ${OUT_DIR_ENV_VAR} or '{settings.OUT_DIR}')")
    parser.add_argument('--override', action='append', default=[], metavar='KEY=VALUE',
                        help='edit the loaded config, e.g. ldp.delta=0.2 (repeatable)')
    return parser


def _attach_log_file(out_dir: str) -> logging.Handler:
    handler = logging.FileHandler(os.path.join(out_dir, LOG_FILE), mode='w', encoding='utf-8')
    handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
    logging.getLogger().addHandler(handler)
    return handler


def run(command: str, config_path: str, overrides: Sequence[str] = (), seed: Optional[int] = None,
        jobs: Optional[int] = None, out_dir: Optional[str] = None) -> int:
    """Run one command and return its exit code; outputs go to <out_dir>/<command>/."""
    handler = None
    try:
        run_config = load_run_config(config_path, command, overrides, seed)
        target = output_dir(out_dir, command)
        handler = _attach_log_file(target)
        ctx = RunContext(run_config, target, settings.workers(jobs))
        logger.info(f"Running '{command}' on system '{ctx.spec.name}' with {ctx.jobs} workers")
        notes = builtin_notes(ctx.spec)
        if notes:
            logger.info(f"Reference values: {notes}")
        HANDLERS[command](ctx)
        ctx.manifest.write(target)
        logger.info(f"Finished '{command}'; outputs in {target}")
        return 0
    except LdpToolkitError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception as e:
        logger.error(f"Error in {command}: {str(e)}")
        return 1
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs is not None and args.jobs < 1:
        logger.error("--jobs must be >= 1")
        return 2
    return run(args.command, args.config, args.override, seed=args.seed, jobs=args.jobs,
               out_dir=args.out_dir)


if __name__ == '__main__':
    sys.exit(main())
