"""Command line harness: ``python -m src.cli <simulate|train|sample|distill|verify|sweep>``.

Every subcommand reads ``params.yaml`` (or ``--config``), writes its artifacts under
``<output.dir>/<command>/`` together with a ``manifest.json`` and returns an exit code:
0 pass, 1 check failure, 2 configuration or usage error, 3 internal error.
"""
import argparse
import os
import sys

import numpy as np
import pandas as pd

from config.logging_config import get_logger
from src import __version__
from src.artifacts import RunManifest, ensure_dir, plot_samples, states_frame, write_csv, write_json
from src.distill import StudentModel, distill_multistage, validate_stage_schedule
from src.exceptions import ConfigError, KacFlowError
from src.experiment_config import ExperimentConfig, config_hash, dump_config, load_config
from src.integrate import IntegratorSpec, draw_noise, sample_reverse
from src.kac_core import KacParams, Schedule, sample_states_at_times
from src.metrics import SIGMA_SLACK, SampleCloud, w2
from src.mlp import MLPModel, load_checkpoint, save_checkpoint
from src.telegraph_analytics import second_moment
from src.tracking import log_run
from src.velocity import (GuidanceSpec, GuidedField, MarginalOracleField, MarginalSampler, ParametricField,
                          train_parametric)
from src.verification import SUITES, run_suite

logger = get_logger(__name__)

COMMANDS = ('simulate', 'train', 'sample', 'distill', 'verify', 'sweep')
EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3


def _start_run(cfg: ExperimentConfig, command: str) -> RunManifest:
    out_dir = ensure_dir(os.path.join(cfg.output.dir, command))
    manifest = RunManifest(command=command, config_hash=config_hash(cfg), out_dir=out_dir)
    manifest.add(dump_config(cfg, os.path.join(out_dir, 'config.yaml')))
    logger.info(f'{command}: writing artifacts to {out_dir}')
    return manifest


def _progress() -> bool:
    return sys.stderr.isatty()


def _problem(cfg: ExperimentConfig):
    data = cfg.dataset()
    return data, cfg.kac_params(data.dim), cfg.schedule()


def _load_model(path: str) -> MLPModel:
    try:
        model, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f'checkpoint not found: {path} (run the train command first)')
    return model


def _build_field(cfg: ExperimentConfig, data, params, sched):
    if cfg.integrator.field == 'marginal-oracle':
        return MarginalOracleField(params, sched, data)
    model = _load_model(cfg.model.checkpoint)
    if model.dim != params.d:
        raise ConfigError(f'checkpoint dimension {model.dim} does not match the dataset dimension {params.d}')
    return ParametricField(model, params, sched)


def _w2_to_data(samples: np.ndarray, data, seed, label=None) -> dict:
    reference = data.restrict(label).resample(samples.shape[0], seed)
    report = w2(SampleCloud(samples, 0.0, 'trajectory'), SampleCloud(reference, 0.0, 'dataset'), seed.spawn(1))
    return {'w2_to_data': report.value, 'w2_stderr': report.stderr, 'w2_method': report.method}


def _finish(cfg: ExperimentConfig, manifest: RunManifest, summary: dict, params: dict) -> dict:
    manifest.metadata.update(summary)
    manifest.write()
    metrics = {k: v for k, v in summary.items() if isinstance(v, (int, float)) and not isinstance(v, bool)}
    log_run(cfg.tracking, manifest.command, params, metrics,
            [os.path.join(manifest.out_dir, a['path']) for a in manifest.artifacts])
    return summary


def cmd_simulate(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Sample Kac paths on a time grid; writes ``paths.csv``, ``jumps.csv`` and ``summary.json``."""
    sim = cfg.simulate
    params = cfg.kac_params(sim.d)
    manifest = _start_run(cfg, 'simulate')
    times = np.linspace(0.0, sim.t_end, sim.n_times)
    coords = [f'x{i}' for i in range(sim.d)]
    summary = {'n_paths': sim.n_paths, 't_end': sim.t_end, 'd': sim.d,
               'expected_mean_jumps': params.a * sim.t_end,
               'expected_second_moment': second_moment(params.a, params.c, sim.t_end)}
    with manifest.phase('simulate'):
        if sim.n_paths == 0 or sim.t_end == 0:
            logger.warning('zero-duration or empty run: writing header-only tables')
            paths = pd.DataFrame(columns=['path', 'time', *coords])
            jumps = pd.DataFrame(columns=['path', *[f'jumps_{c}' for c in coords]])
        else:
            states, counts = sample_states_at_times(params, times, sim.n_paths, cfg.seed(1), jobs, return_counts=True)
            flat = states.reshape(times.size * sim.n_paths, sim.d)
            paths = states_frame(flat, {'path': np.tile(np.arange(sim.n_paths), times.size),
                                        'time': np.repeat(times, sim.n_paths)})
            jumps = pd.DataFrame(counts, columns=[f'jumps_{c}' for c in coords])
            jumps.insert(0, 'path', np.arange(sim.n_paths))
            summary.update({
                'mean_jumps': float(counts.mean()),
                'var_jumps': float(counts.var(ddof=1)) if counts.size > 1 else 0.0,
                'mean_position': float(states[-1].mean()),
                'second_moment': float(np.mean(states[-1] ** 2)),
                'max_abs_position': float(np.abs(states).max()),
            })
    write_csv(paths, os.path.join(manifest.out_dir, 'paths.csv'), manifest)
    write_csv(jumps, os.path.join(manifest.out_dir, 'jumps.csv'), manifest)
    write_json(summary, os.path.join(manifest.out_dir, 'summary.json'), manifest)
    logger.info(f'Simulated {sim.n_paths} paths to t={sim.t_end}: mean jumps '
                f'{summary.get("mean_jumps", 0.0):.4f} (expected {summary["expected_mean_jumps"]:.4f})')
    return _finish(cfg, manifest, summary, {**params.describe(), 'n_paths': sim.n_paths, 't_end': sim.t_end})


def cmd_train(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Regress an MLP velocity field; writes the checkpoint and ``loss.csv``."""
    data, params, sched = _problem(cfg)
    manifest = _start_run(cfg, 'train')
    n_classes = data.n_classes if cfg.model.conditional else 0
    if cfg.model.conditional and not n_classes:
        raise ConfigError(f'model.conditional needs a labeled dataset; {data.name} has no labels')
    model = MLPModel(data.dim, n_classes, cfg.model.hidden, cfg.model.activation, seed=cfg.seed(10))
    with manifest.phase('train'):
        model, trace = train_parametric(model, params, sched, data, cfg.optimizer_config(), cfg.seed(11),
                                        cfg.train.exact_noise, _progress())
    manifest.add(save_checkpoint(model, cfg.model.checkpoint, params, sched,
                                 extra={'dataset': data.name, 'iterations': len(trace)}))
    loss = pd.DataFrame({'iteration': np.arange(len(trace)), 'loss': np.asarray(trace, dtype=float)})
    write_csv(loss, os.path.join(manifest.out_dir, 'loss.csv'), manifest)
    summary = {'iterations': len(trace), 'parameters': model.n_parameters, 'fingerprint': model.fingerprint()}
    if trace:
        window = max(1, len(trace) // 10)
        head, tail = float(np.mean(trace[:window])), float(np.mean(trace[-window:]))
        summary.update({'initial_loss': trace[0], 'final_loss': trace[-1], 'loss_decreased': tail < head})
        if tail >= head:
            logger.warning(f'loss did not decrease: {head:.4g} -> {tail:.4g}')
    return _finish(cfg, manifest, summary, {**params.describe(), **cfg.train.model_dump(), 'dataset': data.name})


def cmd_sample(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Reverse-ODE sampling; writes ``samples.csv`` (+ ``samples.svg``) and reports NFE and W2-to-data."""
    data, params, sched = _problem(cfg)
    manifest = _start_run(cfg, 'sample')
    field = _build_field(cfg, data, params, sched)
    label = cfg.guidance.label
    if label is not None or cfg.guidance.w != 0:
        field = GuidedField(GuidanceSpec(cfg.guidance.w, field, field))
    spec = cfg.integrator_spec()
    n = cfg.integrator.n_samples
    with manifest.phase('sample'):
        x1 = draw_noise(params, sched, n, cfg.seed(20), jobs)
        traj = sample_reverse(field, spec, x1, label, jobs)
    samples = traj.endpoint
    write_csv(states_frame(samples), os.path.join(manifest.out_dir, 'samples.csv'), manifest)
    summary = {**spec.describe(), 'n_samples': n, 'field': field.kind, 'guidance_w': cfg.guidance.w, 'label': label,
               'nfe': traj.nfe, 'evaluations': traj.evaluations, 'clamp_events': traj.clamp_events,
               **_w2_to_data(samples, data, cfg.seed(21), label)}
    if cfg.output.plots:
        plot_samples(samples, os.path.join(manifest.out_dir, 'samples.svg'), data.restrict(label).points,
                     title=f'{spec.method}, M={spec.steps}', manifest=manifest)
    write_json(summary, os.path.join(manifest.out_dir, 'summary.json'), manifest)
    logger.info(f'Sampled {n} points with NFE={traj.nfe}: W2 to data {summary["w2_to_data"]:.4f}')
    return _finish(cfg, manifest, summary, {**params.describe(), **spec.describe(), 'field': field.kind})


def cmd_distill(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Staged endpoint distillation; writes one checkpoint per stage and ``stages.csv``."""
    data, params, sched = _problem(cfg)
    schedule = validate_stage_schedule(cfg.distill.stage_schedule)
    dcfg = cfg.distill_config(jobs)
    manifest = _start_run(cfg, 'distill')
    teacher = _build_field(cfg, data, params, sched)
    sampler = MarginalSampler(params, sched, data, exact=True)
    student = None
    if not isinstance(teacher, ParametricField) and len(schedule) > 1:
        model = MLPModel(data.dim, data.n_classes if cfg.model.conditional else 0, cfg.model.hidden,
                         cfg.model.activation, seed=cfg.seed(50))
        student = StudentModel(model, schedule[1], params, sched)
    noise = draw_noise(params, sched, cfg.integrator.n_samples, cfg.seed(51), jobs)

    def evaluate(trained):
        traj = sample_reverse(trained, IntegratorSpec('euler', trained.steps), noise, None, jobs)
        return {'nfe': traj.nfe, **_w2_to_data(traj.endpoint, data, cfg.seed(52))}

    def on_stage(report, trained):
        path = os.path.join(cfg.distill.checkpoint_dir, f'student_stage{report.stage}_{report.to_steps}steps.joblib')
        manifest.add(save_checkpoint(trained.model, path, params, sched,
                                     extra={'steps': report.to_steps, 'stage': report.stage}))

    with manifest.phase('distill'):
        final, reports = distill_multistage(teacher, dcfg, sampler, cfg.seed(53), student, evaluate, on_stage,
                                            _progress())
    columns = ['stage', 'from_steps', 'to_steps', 'substeps', 'teacher_method', 'iterations', 'initial_loss',
               'final_loss', 'smoothed_initial', 'smoothed_final', 'nfe', 'w2_to_data', 'w2_stderr']
    rows = [{**{k: v for k, v in r.as_dict().items() if k != 'metrics'}, **r.metrics} for r in reports]
    write_csv(pd.DataFrame(rows, columns=columns), os.path.join(manifest.out_dir, 'stages.csv'), manifest)
    write_json({'stages': [r.as_dict() for r in reports]}, os.path.join(manifest.out_dir, 'stages.json'), manifest,
               deterministic=False)
    summary = {'schedule': list(schedule), 'stages': len(reports), 'passthrough': not reports,
               'final_fingerprint': final.fingerprint()}
    if reports:
        summary.update({'final_steps': reports[-1].to_steps, 'final_w2_to_data': reports[-1].metrics['w2_to_data']})
    return _finish(cfg, manifest, summary, {**params.describe(), **cfg.distill.model_dump()})


def cmd_verify(cfg: ExperimentConfig, jobs: int = 1, suite: str | None = None, scale: str | None = None) -> dict:
    """Run a verification suite; writes ``report.json`` and ``checks.csv``."""
    suite, scale = suite or cfg.verify.suite, scale or cfg.verify.scale
    manifest = _start_run(cfg, 'verify')
    with manifest.phase(f'verify-{suite}'):
        report = run_suite(suite, scale, cfg.seeds.master, jobs)
    write_json(report.as_dict(), os.path.join(manifest.out_dir, 'report.json'), manifest)
    write_csv(report.to_frame(), os.path.join(manifest.out_dir, 'checks.csv'), manifest)
    failed = [c.name for c in report.checks if c.failed]
    summary = {'suite': suite, 'scale': scale, 'passed': report.passed, 'checks': len(report.checks),
               'failed': failed, 'report_checksum': report.checksum()}
    logger.info(f'verify {suite} ({scale}): {len(report.checks) - len(failed)}/{len(report.checks)} passed, '
                f'checksum {summary["report_checksum"][:12]}')
    return _finish(cfg, manifest, summary, {'suite': suite, 'scale': scale, 'master_seed': cfg.seeds.master})


def cmd_sweep(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Score the oracle sampler over an (a, c, schedule) grid; writes ``leaderboard.csv``."""
    data = cfg.dataset()
    sweep = cfg.sweep
    manifest = _start_run(cfg, 'sweep')
    spec = IntegratorSpec(sweep.method, sweep.steps)
    rows = []
    cells = [(a, c, s) for a in sweep.a for c in sweep.c for s in sweep.schedules]
    with manifest.phase('sweep'):
        for k, (a, c, kind) in enumerate(cells):
            params, sched = KacParams(a, c, data.dim), Schedule.from_name(kind)
            field = MarginalOracleField(params, sched, data)
            values = []
            for r in range(sweep.replicates):
                x1 = draw_noise(params, sched, sweep.n_samples, cfg.seed(40, k, r), jobs)
                traj = sample_reverse(field, spec, x1, None, jobs)
                values.append(_w2_to_data(traj.endpoint, data, cfg.seed(41, k, r))['w2_to_data'])
            values = np.asarray(values)
            rows.append({'a': a, 'c': c, 'schedule': kind, 'w2': float(values.mean()),
                         'w2_stderr': float(values.std(ddof=1) / np.sqrt(values.size)),
                         'replicates': values.size, 'nfe': spec.nfe})
            logger.info(f'cell a={a}, c={c}, {kind}: W2 {rows[-1]["w2"]:.4f} +/- {rows[-1]["w2_stderr"]:.4f}')
    board = pd.DataFrame(rows, columns=['a', 'c', 'schedule', 'w2', 'w2_stderr', 'replicates', 'nfe'])
    board = board.sort_values(['w2', 'a', 'c', 'schedule'], kind='mergesort').reset_index(drop=True)
    board.insert(0, 'rank', np.arange(1, len(board) + 1))
    write_csv(board, os.path.join(manifest.out_dir, 'leaderboard.csv'), manifest)
    best, worst = board.iloc[0], board.iloc[-1]
    spread = float(np.hypot(best.w2_stderr, worst.w2_stderr))
    sigma = float((worst.w2 - best.w2) / spread) if spread > 0 else 0.0
    # a single cell has nothing to separate
    passed = len(board) < 2 or sigma >= SIGMA_SLACK
    if not passed:
        logger.warning(f'best cell beats the worst by {sigma:.2f} sigma; {SIGMA_SLACK:g} required')
    summary = {'cells': len(board), 'best_a': float(best.a), 'best_c': float(best.c), 'best_schedule': best.schedule,
               'best_w2': float(best.w2), 'worst_w2': float(worst.w2), 'best_vs_worst_sigma': sigma,
               'required_sigma': SIGMA_SLACK, 'passed': passed}
    return _finish(cfg, manifest, summary, {**spec.describe(), 'cells': len(board), 'dataset': data.name})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='kacflow', description='Finite-speed Kac-flow generative modeling.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='YAML or flat key=value config (default ./params.yaml)')
    common.add_argument('--jobs', type=int, default=1, help='worker threads for parallel phases')
    common.add_argument('--seed', type=int, default=None, help='master seed (overrides seeds.master)')
    common.add_argument('--out', default=None, help='output root (overrides output.dir)')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='config override, e.g. --set kac.a=25 (repeatable)')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, parents=[common], help=f'run the {name} stage')
        if name == 'verify':
            cmd.add_argument('--suite', choices=SUITES + ('all',), default=None)
            cmd.add_argument('--scale', choices=('quick', 'full'), default=None)
    return parser


def run(args: argparse.Namespace) -> int:
    if args.jobs < 1:
        raise ConfigError(f'--jobs must be >= 1, got {args.jobs}')
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f'seeds.master={args.seed}')
    cfg = load_config(args.config, overrides)
    if args.out is not None:
        cfg = cfg.model_copy(update={'output': cfg.output.model_copy(update={'dir': args.out})})
    if args.command == 'verify':
        summary = cmd_verify(cfg, args.jobs, args.suite, args.scale)
        return EXIT_OK if summary['passed'] else EXIT_CHECK_FAILED
    if args.command == 'sweep':
        return EXIT_OK if cmd_sweep(cfg, args.jobs)['passed'] else EXIT_CHECK_FAILED
    handlers = {'simulate': cmd_simulate, 'train': cmd_train, 'sample': cmd_sample, 'distill': cmd_distill}
    handlers[args.command](cfg, args.jobs)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as e:
        logger.error(f'Configuration error: {e}')
        return EXIT_CONFIG
    except KacFlowError as e:
        logger.error(f'{args.command} failed: {type(e).__name__}: {e}')
        return EXIT_INTERNAL
    except Exception as e:
        logger.exception(f'Unexpected error during {args.command}: {e}')
        return EXIT_INTERNAL


if __name__ == '__main__':
    sys.exit(main())
