"""
utils.py

Utility module for the wavelet_flow package.

This module provides:

1. Default configuration file creation and management.
2. YAML file loading (JSON configs load through the same call).
3. Logging setup.
4. Image rescaling for viewing, dataset file discovery and CSV export of training histories.

Functions:
    create_default_config() -> dict
    open_yml_file(config_path: str) -> dict
    setup_logging(log_out_path: str, verbose: bool) -> logging.Logger
    bytescale(arr: np.ndarray, low: float = None, high: float = None, a: float = 0, b: float = 255) -> np.ndarray
    find_relative_image_path(base_path: str, extensions: Collection[str]) -> List[str]
    write_history_csv(history: List[dict], path: str) -> pd.DataFrame
"""

import glob
import logging
import os
import sys
from logging import FileHandler, StreamHandler
from typing import Any, Collection, Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

resource_dir = os.path.normpath(os.path.dirname(os.path.realpath(__file__)))

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%d/%m/%Y %H:%M:%S'
IMAGE_EXTENSIONS = ('pgm', 'ppm')


class ConsoleFormatter(logging.Formatter):
    """Console format without tracebacks; the log file keeps the full exception."""

    def format(self, record: logging.LogRecord) -> str:
        saved = record.exc_info, record.exc_text
        record.exc_info, record.exc_text = None, None
        try:
            return super().format(record)
        finally:
            record.exc_info, record.exc_text = saved


def create_default_config() -> Dict[str, Any]:
    """
    Creates a default config file in the wavelet_flow directory.

    :return: dict, the default configuration data.
    """
    default_config = {
        'model': {
            'n': 4,
            'channels': 1,
            'steps': [4, 4, 4, 4, 4],
            'conv_channels': [32, 32, 32, 32, 32],
            'residual_blocks': 1,
            'coupling': 'affine',
            'patch_size': [None, None, None, None, None],
            'batch_size': [64, 32, 32, 16, 16],
        },
        'train': {
            'learning_rate': 1e-3,
            'beta1': 0.9,
            'beta2': 0.999,
            'batch_size': 16,
            'epochs': 50,
            'early_stop_patience': 10,
            'seed': 0,
        },
        'sample': {
            'temperature': 1.0,
            'sampler': 'direct',
            'nuts': {
                'min_steps': 30,
                'adapt_steps': 10,
                'target_accept': 0.8,
                'max_tree_depth': 10,
                'initial_step_size': 0.1,
            },
        },
        'paths': {
            'train_dir': os.path.normpath(os.path.expanduser('~/wavelet_flow/data/train')),
            'val_dir': os.path.normpath(os.path.expanduser('~/wavelet_flow/data/val')),
            'checkpoint_dir': os.path.normpath(os.path.expanduser('~/wavelet_flow/checkpoints')),
            'log_dir': os.path.normpath(os.path.expanduser('~/wavelet_flow/logs')),
        },
    }

    save_path = os.path.normpath(os.path.join(resource_dir, 'config.yml'))
    try:
        with open(save_path, 'w') as f:
            yaml.safe_dump(default_config, f, sort_keys=False)
    except OSError as e:
        logging.getLogger(__name__).warning(f"Could not write default config to {save_path}: {e}")

    return default_config


def open_yml_file(config_path: Optional[str]) -> Dict[str, Any]:
    """
    Opens a config .yml (or .json) file and returns the data. If the file does not exist, it will look for the default
    config file, otherwise, it will create a new default config file.

    :param config_path: str, the path to the config file.
    :return: dict, the loaded configuration data.
    """
    logger = logging.getLogger(__name__)
    default_path = os.path.normpath(os.path.join(resource_dir, 'config.yml'))

    if config_path is None or not os.path.isfile(os.path.normpath(config_path)):
        if config_path is not None:
            logger.warning(f"Could not find config file at {os.path.normpath(config_path)}")
        if os.path.isfile(default_path):
            logger.info(f"Using default config file at {default_path}")
            with open(default_path, 'r') as f:
                config_data = yaml.safe_load(f)
        else:
            logger.info(f"Creating a new default config file at {default_path}")
            config_data = create_default_config()
    else:
        with open(os.path.normpath(config_path), 'r') as f:
            config_data = yaml.safe_load(f)

    return config_data


def setup_logging(log_out_path: Optional[str], verbose: bool = False) -> logging.Logger:
    """
    Sets up the package logger 'wavelet_flow'. Everything from DEBUG up goes to a file, and the console handler
    writes to standard error (standard output is kept for results).

    :param log_out_path: The directory where wavelet_flow.log is written; None skips the file handler.
    :param verbose: Show DEBUG messages on the console as well.
    :return: The package logger.
    """
    file_logger = logging.getLogger('wavelet_flow')
    file_logger.setLevel(logging.DEBUG)
    for handler in list(file_logger.handlers):
        file_logger.removeHandler(handler)
        handler.close()

    if log_out_path is not None:
        full_log_file_path = os.path.normpath(os.path.expanduser(os.path.join(log_out_path, "wavelet_flow.log")))
        os.makedirs(os.path.dirname(full_log_file_path), exist_ok=True)
        fileHandler = FileHandler(full_log_file_path, mode='a')
        fileHandler.setLevel(logging.DEBUG)
        fileHandler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        file_logger.addHandler(fileHandler)

    consoleHandler = StreamHandler(sys.stderr)
    consoleHandler.setLevel(logging.DEBUG if verbose else logging.INFO)
    consoleHandler.setFormatter(ConsoleFormatter('%(asctime)s - %(levelname)s - %(message)s', datefmt=DATE_FORMAT))
    file_logger.addHandler(consoleHandler)
    file_logger.propagate = False
    return file_logger


def bytescale(
        arr: np.ndarray,
        low: Optional[float] = None,
        high: Optional[float] = None,
        a: float = 0,
        b: float = 255
) -> np.ndarray:
    """
    Maps the range of a detail plane (or any array) linearly onto [a, b] as uint8, for viewing.

    :param arr: Values to map.
    :param low: Optional lower clip applied first.
    :param high: Optional upper clip applied first.
    :param a: Output value of the minimum.
    :param b: Output value of the maximum.
    :return: np.ndarray of uint8; constant inputs map to a.
    """
    values = np.asarray(arr, dtype=float)
    if low is not None or high is not None:
        values = np.clip(values, low, high)
    lo, hi = values.min(), values.max()
    if np.isclose(lo, hi):
        return np.full(values.shape, a, dtype=np.uint8)
    return np.rint(a + (b - a) * (values - lo) / (hi - lo)).astype(np.uint8)


def find_relative_image_path(base_path: str, extensions: Collection[str] = IMAGE_EXTENSIONS) -> List[str]:
    """
    Dataset files below a directory, as paths relative to it, sorted so datasets load in a fixed order.

    :param base_path: Dataset directory.
    :param extensions: File extensions to include.
    :return: list of relative paths.
    """
    found = set()
    for ext in extensions:
        pattern = os.path.join(glob.escape(base_path), '**', f'*.{ext}')
        found.update(os.path.relpath(p, start=base_path) for p in glob.glob(pattern, recursive=True))
    return sorted(found)


def write_history_csv(history: List[Dict[str, Any]], path: str) -> pd.DataFrame:
    """
    Writes a training history (one dict per epoch) to CSV.

    :param history: Records with epoch, train_nll, val_nll and seconds.
    :param path: Output .csv path.
    :return: The written DataFrame.
    """
    df = pd.DataFrame.from_records(history)
    columns = [c for c in ('level', 'epoch', 'train_nll', 'val_nll', 'seconds', 'best_epoch') if c in df.columns]
    df = df[columns]
    parent = os.path.dirname(os.path.normpath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    df.to_csv(path, index=False)
    return df
