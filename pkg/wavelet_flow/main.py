"""
main.py

Command-line interface for wavelet_flow: multi-scale normalizing-flow density models of images.

Subcommands:
    transform   write the wavelet pyramid of an image as viewable images
    train       train one level (or all levels) and write per-level checkpoints
    eval        bits per dimension of a dataset, per level and in total
    sample      draw images, directly or with annealed MCMC, at one or more temperatures
    superres    sample the missing detail of a low-resolution image
    synth       write a synthetic train/val corpus
    info        parameter counts and configuration summary

Results are printed to standard output as JSON; logs go to standard error and to wavelet_flow.log.

Usage:
    - From the command line (if installed by pip):
        `wavelet_flow train --config config.yml --level all`
    - From python:
        `python -m wavelet_flow.main eval --config config.yml --data data/val`
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from wavelet_flow import checkpoint as ckpt
from wavelet_flow import model as wf
from wavelet_flow.autodiff import DomainError, ShapeError
from wavelet_flow.config import RunConfig, resolve_seed
from wavelet_flow.data import (dequantized_images, level_dataset, load_image_dir, quantized_level_dataset,
                               save_image_dir, synthetic_corpus)
from wavelet_flow.image_io import ImageFormatError, read_image, write_image
from wavelet_flow.mcmc import AnnealSpec, DivergenceError, annealed_sample_model
from wavelet_flow.train import NonFiniteGradientError, train_level
from wavelet_flow.utils import bytescale, open_yml_file, setup_logging, write_history_csv
from wavelet_flow.wavelet import ORIENTATIONS, build_pyramid, image_level

logger = logging.getLogger(__name__)

HANDLED_ERRORS = (
    ValueError, FileNotFoundError, RuntimeError, FloatingPointError, KeyError, OSError,
    ShapeError, DomainError, ImageFormatError, ckpt.CheckpointError, NonFiniteGradientError, DivergenceError,
)
EVAL_BATCH = 64


def emit(result: Dict[str, Any]):
    """Prints a result record as JSON on standard output."""
    print(json.dumps(result, indent=2, sort_keys=True))


def load_config(path: Optional[str]) -> RunConfig:
    return RunConfig.from_dict(open_yml_file(path))


# ---------------------------------------------------------------------------------------------------------------------
# transform


def cmd_transform(args, config: Optional[RunConfig], seed: int) -> Dict[str, Any]:
    image = read_image(args.image)
    n = image_level(image)
    k = args.level
    if not 0 <= k <= n:
        raise ValueError(f"--level {k} outside [0, {n}] for a {2 ** n}x{2 ** n} image")
    pyr = build_pyramid(image.astype(np.float64))
    os.makedirs(args.out, exist_ok=True)
    written = []

    low = pyr.lows[k]
    low_path = os.path.join(args.out, f"low_{k}.{'pgm' if image.shape[-1] == 1 else 'ppm'}")
    # I_k is 2^(n-k) times a box average, so dividing restores the 8-bit scale
    write_image(low / 2.0 ** (n - k), low_path)
    written.append({'file': low_path, 'plane': f"I{k}", 'scale': 2.0 ** (k - n)})

    for i in range(k, n):
        detail = pyr.details[i]
        for c in range(image.shape[-1]):
            for o, orientation in enumerate(ORIENTATIONS):
                plane = detail[:, :, 3 * c + o]
                lo, hi = float(plane.min()), float(plane.max())
                path = os.path.join(args.out, f"detail_{i}_c{c}_{orientation}.pgm")
                write_image(bytescale(plane)[:, :, None], path)
                logger.info(f"D{i} channel {c} {orientation}: [{lo:.4g}, {hi:.4g}] mapped to [0, 255]")
                written.append({'file': path, 'plane': f"D{i}", 'channel': c, 'orientation': orientation,
                                'low': lo, 'high': hi})
    return {'image': args.image, 'level': k, 'planes': written}


# ---------------------------------------------------------------------------------------------------------------------
# train


def model_metadata(config: RunConfig) -> Dict[str, Any]:
    return {'model': config.to_dict()['model']}


def initial_model(config: RunConfig, seed: int) -> wf.WaveletFlowModel:
    """Freshly initialized model; each level's initial weights depend only on the config and seed."""
    return wf.build_model(config.n, config.channels, config.levels, rng=np.random.default_rng([seed, 0]),
                          metadata=model_metadata(config))


def train_one_level(config: RunConfig, level: int, seed: int, train_u8: np.ndarray,
                    val_images: Optional[np.ndarray], out_dir: str) -> Dict[str, Any]:
    """
    Trains and checkpoints one level.

    :param config: Run configuration.
    :param level: Level index.
    :param seed: Run seed.
    :param train_u8: 8-bit training images, dequantized afresh for every batch.
    :param val_images: Continuous validation images or None to hold out 10% of the training set.
    :param out_dir: Checkpoint directory.
    :return: dict summary of the run.
    """
    started = time.perf_counter()
    flow = initial_model(config, seed).level_flow(level)
    dataset = quantized_level_dataset(train_u8, level, config.n)
    val = level_dataset(val_images, level, config.n) if val_images is not None else 0.1
    train_config = dataclasses.replace(config.train, batch_size=config.level_batch_size(level), seed=seed)
    logger.info(f"Training level {level}: {len(dataset)} pairs of shape {dataset.plane_shape}, "
                f"{flow.num_parameters()} parameters")
    best, history = train_level(flow, dataset, val, train_config, patch_size=config.levels[level].patch_size,
                                level=level)
    best_epoch = history[-1]['best_epoch'] if history else 0
    best_val = min(r['val_nll'] for r in history) if history else float('nan')
    info = {'best_epoch': best_epoch, 'val_nll': best_val, 'epochs': len(history), 'seed': seed}
    path = os.path.join(out_dir, ckpt.LEVEL_FILE.format(level))
    ckpt.save_level(path, best, level, config.n, config.channels, model_metadata(config), info)
    csv_path = os.path.join(out_dir, f"history_level_{level}.csv")
    write_history_csv(history, csv_path)
    return {'level': level, 'checkpoint': path, 'history': csv_path, 'seconds': time.perf_counter() - started,
            **info}


def _train_job(payload):
    config_dict, level, seed, train_u8, val_images, out_dir = payload
    return train_one_level(RunConfig.from_dict(config_dict), level, seed, train_u8, val_images, out_dir)


def cmd_train(args, config: RunConfig, seed: int) -> Dict[str, Any]:
    train_dir = args.data or config.paths.train_dir
    val_dir = args.val or config.paths.val_dir
    out_dir = args.checkpoint_dir or config.paths.checkpoint_dir
    train_u8 = load_image_dir(train_dir, channels=config.channels)
    if image_level(train_u8) < config.n:
        raise ValueError(f"Training images are {train_u8.shape[1]}x{train_u8.shape[2]}, the model needs "
                         f"{2 ** config.n}x{2 ** config.n}")
    val_images = None
    if val_dir and os.path.isdir(val_dir):
        val_images = dequantized_images(load_image_dir(val_dir, channels=config.channels),
                                        np.random.default_rng([seed, 2]))
    else:
        logger.warning(f"No validation directory ({val_dir}); holding out 10% of the training images")

    if args.level == 'all':
        levels = list(range(config.n + 1))
    else:
        levels = [int(args.level)]
        if not 0 <= levels[0] <= config.n:
            raise ValueError(f"--level {levels[0]} outside [0, {config.n}]")

    if args.parallel and len(levels) > 1:
        payloads = [(config.to_dict(), j, seed, train_u8, val_images, out_dir) for j in levels]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_train_job, payloads))
    else:
        results = [train_one_level(config, j, seed, train_u8, val_images, out_dir) for j in levels]
    return {'checkpoint_dir': out_dir, 'levels': results}


# ---------------------------------------------------------------------------------------------------------------------
# eval


def evaluate(model: wf.WaveletFlowModel, images: np.ndarray, batch_size: int = EVAL_BATCH) -> Dict[str, Any]:
    """
    Mean per-level log-likelihoods and bits per dimension of continuous images.

    :param model: The model.
    :param images: Continuous images matching the model's resolution.
    :param batch_size: Evaluation batch size.
    :return: dict with total and per-level log_prob (nats per image) and bpd.
    """
    totals, terms = [], []
    for start in range(0, len(images), batch_size):
        total, per_level = wf.log_prob(model, images[start:start + batch_size])
        totals.append(total)
        terms.append(np.stack(per_level, axis=1))
    totals = np.concatenate(totals)
    terms = np.concatenate(terms)
    scale = -1.0 / (model.num_dims * wf.LN2)
    return {
        'num_images': int(len(images)),
        'log_prob': float(totals.mean()),
        'per_level_log_prob': terms.mean(axis=0).tolist(),
        'bpd': float(totals.mean() * scale),
        'per_level_bpd': (terms.mean(axis=0) * scale).tolist(),
    }


def cmd_eval(args, config: RunConfig, seed: int) -> Dict[str, Any]:
    model = ckpt.load_model(args.checkpoint_dir or config.paths.checkpoint_dir)
    data_dir = args.data or config.paths.val_dir
    images_u8 = load_image_dir(data_dir, channels=model.channels)
    if image_level(images_u8) != model.n:
        raise ValueError(f"Images are {images_u8.shape[1]}x{images_u8.shape[2]}, the model covers "
                         f"{2 ** model.n}x{2 ** model.n}")
    rng = np.random.default_rng([seed, 3])
    level = model.n
    if args.truncate is not None:
        level = args.truncate
        model = wf.truncate(model, level)
    filtered = not args.plain_dequant
    images = dequantized_images(images_u8, rng, level=level, filtered=filtered)
    result = {'data': data_dir, 'level': level, 'filtered_dequant': filtered, **evaluate(model, images)}
    # truncated models score level-k images on a 2^(n - k) intensity scale
    result['bpd_8bit'] = result['bpd'] - wf.intensity_scale_bits(model)

    if args.baseline:
        train_dir = config.paths.train_dir
        if train_dir and os.path.isdir(train_dir):
            train_u8 = load_image_dir(train_dir, channels=model.channels)
            train_images = dequantized_images(train_u8, np.random.default_rng([seed, 4]), level=level,
                                              filtered=filtered)
        else:
            logger.warning("No training directory; fitting the Gaussian baseline on the evaluation images")
            train_images = images
        result['baseline_bpd'] = wf.gaussian_baseline_bpd(train_images, images)
    if args.histograms:
        result['histograms'] = wf.detail_histograms(images)
    return result


# ---------------------------------------------------------------------------------------------------------------------
# sample / superres


def cmd_sample(args, config: RunConfig, seed: int) -> Dict[str, Any]:
    model = ckpt.load_model(args.checkpoint_dir or config.paths.checkpoint_dir)
    temperatures = args.temperature or [config.sample.temperature]
    sampler = 'mcmc' if args.mcmc else 'direct' if args.direct else config.sample.sampler
    runs = []
    for t_index, temperature in enumerate(temperatures):
        rng = np.random.default_rng([seed, 5, t_index])
        out_dir = os.path.join(args.out, f"T{temperature:g}")
        diagnostics: List[Dict[str, Any]] = []
        if sampler == 'mcmc':
            images = annealed_sample_model(model, AnnealSpec.from_temperature(temperature),
                                           config.sample.nuts, rng, num_samples=args.num,
                                           diagnostics=diagnostics)
        else:
            images = wf.sample_direct(model, rng, temperature, num_samples=args.num)
        # samples live on the dequantized scale [0, 256); flooring recovers 8-bit values
        paths = save_image_dir(np.floor(images), out_dir, prefix='sample')
        approximate = sampler == 'direct' and not wf.direct_sampling_is_exact(model, temperature)
        run = {'temperature': temperature, 'sampler': sampler, 'approximate': approximate, 'out': out_dir,
               'images': len(paths)}
        with open(os.path.join(out_dir, 'metadata.json'), 'w') as f:
            json.dump({k: run[k] for k in ('temperature', 'sampler', 'approximate')}, f, indent=2)
        if sampler == 'mcmc':
            diag_path = os.path.join(out_dir, 'diagnostics.json')
            with open(diag_path, 'w') as f:
                json.dump(diagnostics, f, indent=2)
            run['diagnostics'] = diagnostics
            run['diagnostics_file'] = diag_path
        logger.info(f"Wrote {len(paths)} samples at T={temperature} to {out_dir}")
        runs.append(run)
    return {'runs': runs}


def cmd_superres(args, config: RunConfig, seed: int) -> Dict[str, Any]:
    image = read_image(args.input)
    k, j = args.from_level, args.to_level
    if image_level(image) != k:
        raise ValueError(f"Input is {image.shape[0]}x{image.shape[1]}, --from {k} needs {2 ** k}x{2 ** k}")
    if j < k:
        raise ValueError(f"--to {j} must not be below --from {k}")
    if j == k:
        write_image(image, args.out)
        return {'input': args.input, 'output': args.out, 'from': k, 'to': j, 'diagnostics': []}

    model = ckpt.load_model(args.checkpoint_dir or config.paths.checkpoint_dir)
    if j > model.n:
        raise ValueError(f"--to {j} exceeds the model depth {model.n}")
    rng = np.random.default_rng([seed, 6])
    # the model's level-i images carry a factor 2^(n - i) relative to 8-bit intensities
    low = image.astype(np.float64) * 2.0 ** (model.n - k)
    diagnostics: List[Dict[str, Any]] = []
    high = wf.super_resolve(model, low, j, sampler_mode='mcmc' if args.mcmc else 'direct',
                            temperature=args.temperature, rng=rng, nuts_config=config.sample.nuts,
                            diagnostics=diagnostics)
    write_image(np.floor(high / 2.0 ** (model.n - j)), args.out)
    return {'input': args.input, 'output': args.out, 'from': k, 'to': j, 'diagnostics': diagnostics}


# ---------------------------------------------------------------------------------------------------------------------
# synth / info


def cmd_synth(args, config: Optional[RunConfig], seed: int) -> Dict[str, Any]:
    rng = np.random.default_rng([seed, 7])
    train = synthetic_corpus(args.num_train, args.n, args.channels, rng)
    val = synthetic_corpus(args.num_val, args.n, args.channels, rng)
    train_dir, val_dir = os.path.join(args.out, 'train'), os.path.join(args.out, 'val')
    save_image_dir(train, train_dir)
    save_image_dir(val, val_dir)
    return {'train_dir': train_dir, 'val_dir': val_dir, 'num_train': len(train), 'num_val': len(val),
            'shape': list(train.shape[1:])}


def cmd_info(args, config: RunConfig, seed: int) -> Dict[str, Any]:
    directory = args.checkpoint_dir or config.paths.checkpoint_dir
    if directory and os.path.isfile(os.path.join(directory, ckpt.LEVEL_FILE.format(0))):
        model = ckpt.load_model(directory)
        source = directory
    else:
        model = initial_model(config, seed)
        source = 'config'
    levels = []
    for j in range(model.n + 1):
        flow = model.level_flow(j)
        levels.append({'level': j, 'input_shape': list(flow.input_shape), 'steps': len(flow.steps),
                       'coupling': flow.coupling_kind, 'parameters': flow.num_parameters()})
    return {'source': source, 'n': model.n, 'channels': model.channels, 'dims': model.num_dims,
            'parameters': sum(entry['parameters'] for entry in levels), 'levels': levels,
            'config': config.to_dict()}


# ---------------------------------------------------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='wavelet_flow', description=__doc__.split('\n\n')[1])
    parser.add_argument('--config', help='YAML or JSON run configuration (defaults to the bundled config.yml)')
    parser.add_argument('--seed', type=int, default=None, help='overrides WAVELETFLOW_SEED and train.seed')
    parser.add_argument('--log-dir', default=None, help='directory for wavelet_flow.log (defaults to paths.log_dir)')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug output on standard error')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('transform', help='write the wavelet pyramid of an image')
    p.add_argument('image')
    p.add_argument('--level', type=int, default=0, help='coarsest level to write')
    p.add_argument('--out', default='pyramid')
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser('train', help='train levels and write checkpoints')
    p.add_argument('--level', default='all', help="level index or 'all'")
    p.add_argument('--data', default=None, help='training image directory (defaults to paths.train_dir)')
    p.add_argument('--val', default=None, help='validation image directory (defaults to paths.val_dir)')
    p.add_argument('--checkpoint-dir', default=None)
    p.add_argument('--parallel', action='store_true', help='train levels in separate processes')
    p.add_argument('--workers', type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='bits per dimension of a dataset')
    p.add_argument('--data', default=None, help='image directory (defaults to paths.val_dir)')
    p.add_argument('--checkpoint-dir', default=None)
    p.add_argument('--truncate', type=int, default=None, help='evaluate the embedded model of this level')
    dequant = p.add_mutually_exclusive_group()
    dequant.add_argument('--filtered-dequant', action='store_true',
                         help='low-pass full-resolution dequantization noise with the images (the default)')
    dequant.add_argument('--plain-dequant', action='store_true',
                         help='with --truncate, quantize the low-resolution images to 8 bits before adding noise')
    p.add_argument('--baseline', action='store_true', help='also report the per-pixel Gaussian baseline')
    p.add_argument('--histograms', action='store_true', help='also report detail coefficient histograms')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('sample', help='draw images')
    p.add_argument('-n', '--num', type=int, default=16)
    p.add_argument('-T', '--temperature', type=float, action='append', default=None,
                   help='sampling temperature in (0, 1]; repeat for a sweep')
    group = p.add_mutually_exclusive_group()
    group.add_argument('--mcmc', action='store_true', help='annealed NUTS sampling')
    group.add_argument('--direct', action='store_true', help='push scaled noise through the inverse flows')
    p.add_argument('--checkpoint-dir', default=None)
    p.add_argument('--out', default='samples')
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser('superres', help='sample the detail missing from a low-resolution image')
    p.add_argument('--input', required=True)
    p.add_argument('--from', dest='from_level', type=int, required=True)
    p.add_argument('--to', dest='to_level', type=int, required=True)
    p.add_argument('-T', '--temperature', type=float, default=1.0)
    p.add_argument('--mcmc', action='store_true')
    p.add_argument('--checkpoint-dir', default=None)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_superres)

    p = sub.add_parser('synth', help='write a synthetic corpus')
    p.add_argument('--out', required=True)
    p.add_argument('-n', type=int, default=4, help='images are 2^n x 2^n')
    p.add_argument('-C', '--channels', type=int, default=1)
    p.add_argument('--num-train', type=int, default=2000)
    p.add_argument('--num-val', type=int, default=200)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('info', help='parameter counts and configuration')
    p.add_argument('--checkpoint-dir', default=None)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parses arguments, sets up logging and runs a subcommand.

    :param argv: Arguments (defaults to sys.argv[1:]).
    :return: int exit status; 0 on success, 1 on a reported error (argparse exits with 2 on usage errors).
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    config = None
    if args.command != 'synth' or args.config is not None:
        try:
            config = load_config(args.config)
        except HANDLED_ERRORS as e:
            setup_logging(args.log_dir, args.verbose)
            logger.exception(f"Invalid configuration: {e}")
            return 1
    log_dir = args.log_dir or (config.paths.log_dir if config is not None else None)
    setup_logging(log_dir, args.verbose)

    try:
        if args.command == 'sample' and args.temperature:
            for t in args.temperature:
                if not 0 < t <= 1:
                    parser.error(f"temperature must lie in (0, 1], got {t}")
        seed = resolve_seed(args.seed, config)
        logger.debug(f"Running '{args.command}' with seed {seed}")
        result = args.func(args, config, seed)
    except HANDLED_ERRORS as e:
        logger.exception(f"'{args.command}' failed: {e}")
        return 1
    emit(result)
    return 0


if __name__ == '__main__':
    sys.exit(main())
