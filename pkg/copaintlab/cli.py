import argparse
import logging
import sys
from pathlib import Path
from statistics import median
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from copaintlab import __version__
from copaintlab.artifacts import RunManifest, atomic_write_bytes, read_state, write_csv, write_json, write_pgm, \
    write_state
from copaintlab.baselines import blended_run, ddnm_run, repaint_lite_run
from copaintlab.conditioning import Geometry, Observation, RevealOperator, load_mask, standard_masks
from copaintlab.config import PRESETS, CoPaintConfig, build_config, load_config_file
from copaintlab.copaint import RunRecord, copaint_run, onestep_run, prototype_run, xi_schedule
from copaintlab.datasets import DATASET_NAMES, make_dataset
from copaintlab.denoiser import Denoiser, GaussianDenoiser, TrainingConfig, load_checkpoint, load_world, train_mlp
from copaintlab.errors import CoPaintLabError, ConfigError, FormatError, NumericFailureError
from copaintlab.metrics import MetricReport, calibrate_xi_curve, evaluate, gap_trajectory
from copaintlab.schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS, NoiseSchedule, \
    build_linear_schedule, sampling_schedule

logger = logging.getLogger(__name__)

GAUSSIAN_PREFIX = 'gaussian:'
RUN_COLUMNS = ('method', 'mask', 'seed', *MetricReport.CSV_COLUMNS)
SUMMARY_COLUMNS = ('method', 'mask', 'runs', 'median_constraint_mean_abs', 'median_constraint_max_abs',
                   'median_coherence_error')
WIN_COLUMNS = ('mask', 'method', 'opponent', 'win_rate')
GAP_COLUMNS = ('t', 'gap', 'xi_calibrated', 'xi_surrogate')


def run_method(method: str, schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, config: CoPaintConfig,
               rng: np.random.Generator) -> Tuple[np.ndarray, RunRecord]:
    """ Dispatches a preset name to its sampler. """
    if method in ('copaint', 'copaint-tt', 'copaint-fast'):
        return copaint_run(schedule, denoiser, obs, config, rng, method=method)
    runners = {
        'onestep': onestep_run,
        'prototype': prototype_run,
        'blended': blended_run,
        'ddnm': ddnm_run,
        'repaint-lite': repaint_lite_run,
    }
    if method not in runners:
        raise ConfigError(f'unknown method {method!r}, expected one of {", ".join(PRESETS)}')
    return runners[method](schedule, denoiser, obs, config, rng)


def load_model(source: str, train_schedule: NoiseSchedule) -> Denoiser:
    """
    Loads a denoiser on the training schedule.
    :param source: A CPMLP1 checkpoint path or 'gaussian:<world file>'.
    """
    if source.startswith(GAUSSIAN_PREFIX):
        return GaussianDenoiser(load_world(source[len(GAUSSIAN_PREFIX):]), train_schedule)
    return load_checkpoint(source, train_schedule)


def schedules_for(config: CoPaintConfig, eta: Optional[float] = None) -> Tuple[NoiseSchedule, NoiseSchedule]:
    return sampling_schedule(config.T, config.train_steps, config.beta_start, config.beta_end,
                             config.sigma_eta if eta is None else eta)


def resolve_mask(mask: str, geometry: Geometry, seed: int) -> RevealOperator:
    """ Loads a mask file if the argument names an existing file, otherwise creates a standard mask. """
    if Path(mask).is_file():
        return load_mask(mask, geometry)
    return standard_masks(mask, geometry, seed)


def _parse_projection(text: Optional[str]) -> Any:
    return {'auto': None, 'true': True, 'false': False}[text]


def config_from_args(args: argparse.Namespace, method: str) -> CoPaintConfig:
    """ Combines the method preset, the --config file and the explicit flags, in this order. """
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {name: getattr(args, name, None) for name in
                 ('T', 'G', 'K', 'tau', 'H', 'sigma_eta', 'eta0', 'xi_decay', 'seed', 'train_steps')}
    config = build_config(method, file_values, overrides)
    if getattr(args, 'final_projection', None) is not None:
        config = config.replace(final_projection=_parse_projection(args.final_projection))
    return config


def cmd_train_toy(args: argparse.Namespace) -> Path:
    """ Trains an MLP denoiser on a toy dataset and writes a CPMLP1 checkpoint. """
    file_values = load_config_file(args.config) if args.config else {}
    train_steps = args.train_steps or file_values.get('train_steps', DEFAULT_TRAIN_STEPS)
    schedule = build_linear_schedule(train_steps, file_values.get('beta_start', DEFAULT_BETA_START),
                                     file_values.get('beta_end', DEFAULT_BETA_END))
    seed = args.seed if args.seed is not None else file_values.get('seed', 0)
    world = load_world(args.world) if args.world else None
    dataset = make_dataset(args.dataset, args.samples, args.dim, np.random.default_rng([seed, 1]), world=world,
                           directory=args.images)
    training = TrainingConfig(
        hidden=tuple(int(w) for w in args.hidden.split(',') if w),
        embed_dim=args.embed_dim,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=seed,
    )
    result = train_mlp(dataset, schedule, training)

    out = Path(args.out)
    checkpoint = out / 'model.cpmlp'
    atomic_write_bytes(checkpoint, result.model.to_bytes())
    write_json(out / 'training.json', {
        'dataset': args.dataset,
        'samples': int(dataset.shape[0]),
        'dims': result.model.dims,
        'schedule': schedule.spec.to_dict(),
        'seed': seed,
        'epochs': training.epochs,
        'final_loss': result.final_loss,
        'baseline_loss': result.baseline_loss,
        'history': result.history,
        'identifier': result.model.identifier(),
        'version': __version__,
    })
    print(f'final loss {result.final_loss:.6f}, zero model loss {result.baseline_loss:.6f}')
    print(f'checkpoint written to {checkpoint}')
    return checkpoint


def cmd_inpaint(args: argparse.Namespace) -> Path:
    """ Runs one sampler and writes X_0, the run record, the metrics and the run manifest. """
    if args.manifest:
        manifest = RunManifest.load(args.manifest)
        method = manifest.method
        config = CoPaintConfig.from_dict(manifest.config)
        obs = Observation.from_dict(manifest.observation)
        geometry = Geometry(tuple(manifest.geometry))
        source, input_path, mask = manifest.model['source'], manifest.input, manifest.mask
    else:
        if not args.model or not args.input:
            raise ConfigError('inpaint needs --model and --input, or --manifest')
        method = args.method
        config = config_from_args(args, method)
        x_ref, geometry = read_state(args.input)
        obs = Observation.from_reference(resolve_mask(args.mask, geometry, args.mask_seed), x_ref)
        source, input_path, mask = args.model, str(args.input), args.mask
        manifest = None

    train, schedule = schedules_for(config)
    denoiser = load_model(source, train)
    if manifest is not None and manifest.model.get('identifier') != denoiser.identifier():
        raise FormatError(f'model {source} does not match the manifest identifier {manifest.model.get("identifier")}')

    x0, record = run_method(method, schedule, denoiser, obs, config, np.random.default_rng(config.seed))
    report = evaluate(obs, x0)

    out = Path(args.out)
    written = write_state(out / 'x0', x0, geometry)
    write_csv(out / 'run.csv', RunRecord.CSV_COLUMNS, record.csv_rows())
    write_csv(out / 'metrics.csv', RUN_COLUMNS, [[method, mask, config.seed, *report.csv_row()]])
    RunManifest(
        method=method,
        config=config.to_dict(),
        schedule=schedule.spec.to_dict(),
        model={'source': source, 'identifier': denoiser.identifier()},
        observation=obs.to_dict(),
        seed=config.seed,
        version=__version__,
        geometry=list(geometry.shape),
        input=input_path,
        mask=mask,
    ).save(out / 'manifest.json')
    print(f'{method}: constraint_mean_abs={report.constraint_mean_abs:.3g} '
          f'constraint_max_abs={report.constraint_max_abs:.3g} written to {written}')
    return out


def _coherence_key(report: MetricReport) -> float:
    return report.coherence_error if report.coherence_error is not None else report.constraint_mean_abs


def win_rate(values: Sequence[float], opponents: Sequence[float]) -> float:
    """ Gets the fraction of paired runs with a lower value; ties count one half. """
    if len(values) != len(opponents) or not values:
        raise ValueError('win rates need equally many paired values')
    wins = sum(1.0 if a < b else 0.5 if a == b else 0.0 for a, b in zip(values, opponents))
    return wins / len(values)


def cmd_compare(args: argparse.Namespace) -> Path:
    """
    Runs every method on every mask for n seeds with paired seeds and writes per run metrics, per
    (method, mask) medians and pairwise coherence win rates.
    """
    methods = [m.strip() for m in args.methods.split(',') if m.strip()]
    masks = [m.strip() for m in args.masks.split(',') if m.strip()]
    if not methods or not masks:
        raise ConfigError('compare needs at least one method and one mask')
    if args.n_seeds < 1:
        raise ConfigError(f'n-seeds must be positive, got {args.n_seeds}')
    configs = {method: config_from_args(args, method) for method in methods}
    base_seed = args.seed if args.seed is not None else 0

    denoisers: Dict[tuple, Tuple[Denoiser, NoiseSchedule]] = {}
    for method, config in configs.items():
        key = (config.T, config.sigma_eta, config.train_steps, config.beta_start, config.beta_end)
        if key not in denoisers:
            train, schedule = schedules_for(config)
            denoisers[key] = (load_model(args.model, train), schedule)

    reference, geometry, world = None, None, None
    if args.input:
        reference, geometry = read_state(args.input)
    elif args.model.startswith(GAUSSIAN_PREFIX):
        world = load_world(args.model[len(GAUSSIAN_PREFIX):])
        geometry = Geometry((world.dim,))
    else:
        raise ConfigError('compare needs --input unless the model is a gaussian world')

    reports: Dict[Tuple[str, str], List[MetricReport]] = {(m, k): [] for m in methods for k in masks}
    rows = []
    with tqdm(total=args.n_seeds * len(masks) * len(methods), disable=args.quiet, desc='compare') as progress:
        for index in range(args.n_seeds):
            run_seed = base_seed + index
            x_ref = reference if world is None else world.sample(np.random.default_rng([run_seed, 1]), 1)[0]
            for mask in masks:
                obs = Observation.from_reference(resolve_mask(mask, geometry, args.mask_seed), x_ref)
                for method in methods:
                    config = configs[method].replace(seed=run_seed)
                    key = (config.T, config.sigma_eta, config.train_steps, config.beta_start, config.beta_end)
                    denoiser, schedule = denoisers[key]
                    x0, _ = run_method(method, schedule, denoiser, obs, config, np.random.default_rng(run_seed))
                    report = evaluate(obs, x0)
                    reports[(method, mask)].append(report)
                    rows.append([method, mask, run_seed, *report.csv_row()])
                    progress.update(1)

    summary, wins = [], []
    for mask in masks:
        for method in methods:
            runs = reports[(method, mask)]
            coherence = [r.coherence_error for r in runs if r.coherence_error is not None]
            summary.append([method, mask, len(runs),
                            repr(median(r.constraint_mean_abs for r in runs)),
                            repr(median(r.constraint_max_abs for r in runs)),
                            repr(median(coherence)) if coherence else ''])
            for opponent in methods:
                rate = win_rate([_coherence_key(r) for r in runs],
                                [_coherence_key(r) for r in reports[(opponent, mask)]])
                wins.append([mask, method, opponent, repr(rate)])

    out = Path(args.out)
    write_csv(out / 'runs.csv', RUN_COLUMNS, rows)
    write_csv(out / 'compare.csv', SUMMARY_COLUMNS, summary)
    write_csv(out / 'wins.csv', WIN_COLUMNS, wins)
    write_json(out / 'compare.json', {
        'methods': methods,
        'masks': masks,
        'mask_seed': args.mask_seed,
        'seeds': [base_seed + i for i in range(args.n_seeds)],
        'configs': {m: c.to_dict() for m, c in configs.items()},
        'model': args.model,
        'input': args.input,
        'version': __version__,
    })
    for row in summary:
        print(f'{row[0]:>14} {row[1]:>8}  median constraint {float(row[3]):.3g}  '
              f'median coherence {row[5] or "n/a"}')
    return out


def gap_raster(values: Sequence[float], height: int = 64) -> Tuple[np.ndarray, Geometry]:
    """ Draws a curve as black points on white, one column per value, the largest value at the top. """
    values = np.asarray(values, dtype=np.float64)
    top = values.max() if values.size and values.max() > 0.0 else 1.0
    image = np.ones((height, values.shape[0]))
    rows = (height - 1) - np.rint(np.clip(values / top, 0.0, 1.0) * (height - 1)).astype(int)
    image[rows, np.arange(values.shape[0])] = -1.0
    return image.ravel(), Geometry((height, values.shape[0]))


def cmd_gap_plot(args: argparse.Namespace) -> Path:
    """ Writes the one-step gap curve with the calibrated and geometric constraint variances, plus a raster. """
    if args.n_runs < 1:
        raise ConfigError(f'n-runs must be positive, got {args.n_runs}')
    config = config_from_args(args, 'copaint')
    train, schedule = schedules_for(config, eta=0.0)
    denoiser = load_model(args.model, train)
    seed = config.seed

    curve = gap_trajectory(schedule, denoiser, args.n_runs, np.random.default_rng(seed))
    operator = resolve_mask(args.mask, Geometry((denoiser.dim,)), args.mask_seed)
    obs = Observation(np.zeros(operator.output_dim), operator)
    calibrated = calibrate_xi_curve(schedule, denoiser, obs, args.n_runs, np.random.default_rng([seed, 1]))

    rows = [[t, repr(gap), repr(xi), repr(xi_schedule(config, t))] for (t, gap), (_, xi) in zip(curve, calibrated)]
    out = Path(args.out)
    write_csv(out / 'gap.csv', GAP_COLUMNS, rows)
    pixels, geometry = gap_raster([gap for _, gap in curve])
    write_pgm(out / 'gap.pgm', pixels, geometry)
    if len(curve) >= 2 and curve[-2][1] > 0.0:
        print(f'gap(T) / gap(2) = {curve[0][1] / curve[-2][1]:.3f}')
    print(f'gap curve written to {out / "gap.csv"}')
    return out


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='flat key = value file with CoPaintConfig fields')
    common.add_argument('--seed', type=int, help='run seed (u64)')
    common.add_argument('--out', default='.', help='output directory')
    common.add_argument('--quiet', action='store_true', help='only log warnings and hide progress bars')
    return common


def _sampler_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('sampler hyperparameters (override preset and config file)')
    group.add_argument('--T', type=int, help='sampling steps')
    group.add_argument('--G', type=int, help='gradient steps per visit')
    group.add_argument('--K', type=int, help='time travel frequency')
    group.add_argument('--tau', type=int, help='time travel interval')
    group.add_argument('--H', type=int, help='steps of the X_0 estimate')
    group.add_argument('--sigma-eta', dest='sigma_eta', type=float, help='DDIM variance knob in [0, 1]')
    group.add_argument('--eta0', type=float, help='base learning rate')
    group.add_argument('--xi-decay', dest='xi_decay', type=float, help='geometric base of the constraint variance')
    group.add_argument('--train-steps', dest='train_steps', type=int, help='steps of the training schedule')
    group.add_argument('--final-projection', dest='final_projection', choices=('auto', 'true', 'false'))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='copaintlab',
        description='Diffusion inpainting samplers checked against exact Gaussian posteriors.',
        epilog=f'Metric CSV columns: {", ".join(RUN_COLUMNS)}. Exit codes: 0 success, 2 usage error, '
               f'3 numeric failure.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', required=True)
    common = _common_arguments()

    train = subparsers.add_parser('train-toy', parents=[common], help='train an MLP denoiser')
    train.add_argument('--dataset', choices=DATASET_NAMES, default='mirror')
    train.add_argument('--dim', type=int, default=16)
    train.add_argument('--samples', type=int, default=2048, help='size of generated datasets')
    train.add_argument('--epochs', type=int, default=200)
    train.add_argument('--hidden', default='64,64', help='comma separated hidden widths')
    train.add_argument('--embed-dim', dest='embed_dim', type=int, default=8)
    train.add_argument('--batch-size', dest='batch_size', type=int, default=128)
    train.add_argument('--lr', type=float, default=2e-3)
    train.add_argument('--train-steps', dest='train_steps', type=int)
    train.add_argument('--world', help='gaussian world file of gaussian-sample')
    train.add_argument('--images', help='PGM directory of image-dir')
    train.set_defaults(handler=cmd_train_toy)

    inpaint = subparsers.add_parser('inpaint', parents=[common], help='run one sampler')
    inpaint.add_argument('--model', help="CPMLP1 checkpoint or 'gaussian:<world file>'")
    inpaint.add_argument('--input', help='reference vector (vec) or image (pgm) file')
    inpaint.add_argument('--mask', default='half', help='standard mask name or mask file')
    inpaint.add_argument('--mask-seed', dest='mask_seed', type=int, default=0)
    inpaint.add_argument('--method', choices=tuple(PRESETS), default='copaint-tt')
    inpaint.add_argument('--manifest', help='repeat the run of a manifest')
    _sampler_arguments(inpaint)
    inpaint.set_defaults(handler=cmd_inpaint)

    compare = subparsers.add_parser('compare', parents=[common], help='paired comparison of methods')
    compare.add_argument('--model', required=True)
    compare.add_argument('--input', help='reference file; gaussian models draw a reference per seed otherwise')
    compare.add_argument('--methods', default='copaint,blended', help='comma separated presets')
    compare.add_argument('--masks', default='half', help='comma separated masks')
    compare.add_argument('--mask-seed', dest='mask_seed', type=int, default=0)
    compare.add_argument('--n-seeds', dest='n_seeds', type=int, default=32)
    _sampler_arguments(compare)
    compare.set_defaults(handler=cmd_compare)

    gap = subparsers.add_parser('gap-plot', parents=[common], help='one-step gap along unconditional runs')
    gap.add_argument('--model', required=True)
    gap.add_argument('--n-runs', dest='n_runs', type=int, default=32)
    gap.add_argument('--mask', default='half', help='mask of the constraint variance calibration')
    gap.add_argument('--mask-seed', dest='mask_seed', type=int, default=0)
    _sampler_arguments(gap)
    gap.set_defaults(handler=cmd_gap_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        args.handler(args)
    except NumericFailureError as e:
        logger.error('numeric failure: %s', e)
        return 3
    except (CoPaintLabError, ValueError, OSError) as e:
        logger.error('%s', e)
        print(f'error: {e}', file=sys.stderr)
        return 2
    return 0
