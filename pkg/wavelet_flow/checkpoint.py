"""
checkpoint.py

Per-level checkpoint files, so that levels trained in separate processes or on separate machines assemble into one
model by directory.

File layout:

    b'WFLOWCKP' | header length (8 bytes, little-endian) | JSON header (UTF-8) | payload

The header holds the format version, the model description shared by all levels (depth, channels, metadata), the level
index, the level's structure, its actnorm initialization flags and a manifest mapping every parameter and buffer name
to its shape and byte offset in the payload. The payload is the concatenation of those arrays as little-endian float64.

Functions:
    save_level(path, flow, level, n, channels, metadata, info)
    load_level(path) -> Tuple[LevelFlow, dict]
    save_model(model, directory) -> List[str]
    load_model(directory) -> WaveletFlowModel
    save_checkpoint(obj, path)
    load_checkpoint(path)
"""

import dataclasses
import json
import logging
import os
import struct
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from wavelet_flow import flow as fl

logger = logging.getLogger(__name__)

MAGIC = b'WFLOWCKP'
FORMAT_VERSION = 1
LEVEL_FILE = 'level_{}.ckpt'


class CheckpointError(ValueError):
    """Raised for unreadable, inconsistent or incomplete checkpoints."""


def level_structure(flow: fl.LevelFlow) -> Dict[str, Any]:
    """
    Describes the architecture of a flow so that build_level_flow can recreate it.

    :param flow: The flow.
    :return: dict of build_level_flow keyword arguments.
    """
    couplings = [s.coupling for s in flow.steps if s.coupling is not None]
    if couplings:
        network = couplings[0].network
        conv_channels = int(network[0].kernel.shape[-1])
        residual_blocks = (len(network) - 2) // 2
    else:
        conv_channels, residual_blocks = 1, 0
    return {
        'input_shape': [int(d) for d in flow.input_shape],
        'num_steps': len(flow.steps),
        'conv_channels': conv_channels,
        'residual_blocks': residual_blocks,
        'coupling': flow.coupling_kind,
        'cond_channels': int(flow.cond_channels),
        'cond_scale': float(flow.cond_scale),
    }


def _json_normalized(value: Any) -> Any:
    return json.loads(json.dumps(value, sort_keys=True))


def _header_bytes(header: Dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')


def save_level(
        path: str,
        flow: fl.LevelFlow,
        level: int,
        n: int,
        channels: int,
        metadata: Optional[Dict[str, Any]] = None,
        info: Optional[Dict[str, Any]] = None,
):
    """
    Writes one level's flow.

    :param path: Destination file; written to a temporary name first and then moved into place.
    :param flow: The level's flow.
    :param level: Level index (0 = base).
    :param n: Depth of the model the level belongs to.
    :param channels: Image channels of that model.
    :param metadata: Model metadata shared by all levels.
    :param info: Level-specific record (training history summary, ...).
    """
    arrays = {name: t.data for name, t in fl.named_parameters(flow).items()}
    arrays.update(fl.named_buffers(flow))
    manifest = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        values = np.ascontiguousarray(arrays[name], dtype='<f8')
        manifest[name] = {'shape': list(values.shape), 'offset': offset}
        chunks.append(values.tobytes())
        offset += values.nbytes
    header = {
        'format_version': FORMAT_VERSION,
        'model': {'n': int(n), 'channels': int(channels), 'metadata': _json_normalized(metadata or {})},
        'level': int(level),
        'level_config': level_structure(flow),
        'actnorm_initialized': [bool(s.actnorm.initialized) for s in flow.steps],
        'info': _json_normalized(info or {}),
        'manifest': manifest,
    }
    blob = _header_bytes(header)

    path = os.path.normpath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp_path = f"{path}.tmp{os.getpid()}"
    with open(tmp_path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<Q', len(blob)))
        f.write(blob)
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp_path, path)
    logger.info(f"Saved level {level} ({offset // 8} values) to {path}")


def _read_header(data: bytes, path: str) -> Tuple[Dict[str, Any], int]:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    start = len(MAGIC) + 8
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    (length,) = struct.unpack('<Q', data[len(MAGIC):start])
    if len(data) < start + length:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    version = header.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    return header, start + length


def load_level(path: str) -> Tuple[fl.LevelFlow, Dict[str, Any]]:
    """
    Reads one level's flow.

    :param path: Checkpoint file.
    :return: (flow, header).
    """
    path = os.path.normpath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, 'rb') as f:
        data = f.read()
    header, payload_start = _read_header(data, path)
    payload = data[payload_start:]

    try:
        structure = dict(header['level_config'])
        manifest = header['manifest']
        flags = header['actnorm_initialized']
    except KeyError as e:
        raise CheckpointError(f"{path}: header lacks {e}") from e
    structure['input_shape'] = tuple(structure['input_shape'])
    template = fl.build_level_flow(mix_init='identity', rng=np.random.default_rng(0), **structure)
    expected = set(fl.named_parameters(template)) | set(fl.named_buffers(template))
    if set(manifest) != expected:
        missing, extra = sorted(expected - set(manifest)), sorted(set(manifest) - expected)
        raise CheckpointError(f"{path}: manifest does not match the level structure "
                              f"(missing {missing}, unexpected {extra})")

    total = sum(int(np.prod(entry['shape'])) for entry in manifest.values()) * 8
    if total != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest describes {total}")
    values = {}
    for name, entry in manifest.items():
        count = int(np.prod(entry['shape']))
        offset = int(entry['offset'])
        if offset < 0 or offset + 8 * count > len(payload):
            raise CheckpointError(f"{path}: entry '{name}' lies outside the payload")
        values[name] = np.frombuffer(payload, dtype='<f8', count=count, offset=offset).astype(np.float64).reshape(
            entry['shape'])

    try:
        flow = fl.replace_parameters(template, values)
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from e
    if len(flags) != len(flow.steps):
        raise CheckpointError(f"{path}: {len(flags)} actnorm flags for {len(flow.steps)} steps")
    flow = _apply_actnorm_flags(flow, flags)
    logger.debug(f"Loaded level {header['level']} from {path}")
    return flow, header


def _apply_actnorm_flags(flow: fl.LevelFlow, flags: List[bool]) -> fl.LevelFlow:
    steps = tuple(dataclasses.replace(s, actnorm=dataclasses.replace(s.actnorm, initialized=bool(flag)))
                  for s, flag in zip(flow.steps, flags))
    return dataclasses.replace(flow, steps=steps)


def save_model(model, directory: str, infos: Optional[Dict[int, Dict[str, Any]]] = None) -> List[str]:
    """
    Writes all n + 1 levels of a model as level_{j}.ckpt files.

    :param model: A WaveletFlowModel.
    :param directory: Destination directory.
    :param infos: Optional level-specific records keyed by level index.
    :return: list of written paths.
    """
    infos = infos or {}
    metadata = {k: v for k, v in model.metadata.items() if k != 'levels'}
    paths = []
    for j in range(model.n + 1):
        path = os.path.join(directory, LEVEL_FILE.format(j))
        save_level(path, model.level_flow(j), j, model.n, model.channels, metadata, infos.get(j))
        paths.append(path)
    return paths


def load_model(directory: str):
    """
    Assembles a model from the level files of a directory.

    :param directory: Directory holding level_0.ckpt ... level_n.ckpt.
    :return: WaveletFlowModel; metadata['levels'] maps each level index to its stored info.
    """
    from wavelet_flow.model import WaveletFlowModel

    first_path = os.path.join(directory, LEVEL_FILE.format(0))
    if not os.path.isfile(first_path):
        raise CheckpointError(f"missing level 0 in {directory}")
    base, header = load_level(first_path)
    shared = header['model']
    n, channels = int(shared['n']), int(shared['channels'])

    flows, infos = [base], {0: header.get('info', {})}
    for j in range(1, n + 1):
        path = os.path.join(directory, LEVEL_FILE.format(j))
        if not os.path.isfile(path):
            raise CheckpointError(f"missing level {j} in {directory}")
        level_flow, level_header = load_level(path)
        if level_header['model'] != shared:
            raise CheckpointError(f"Level {j} was saved for a different model than level 0 "
                                  f"({level_header['model']} vs {shared})")
        if level_header['level'] != j:
            raise CheckpointError(f"{path} holds level {level_header['level']}, expected {j}")
        flows.append(level_flow)
        infos[j] = level_header.get('info', {})

    metadata = dict(shared['metadata'])
    metadata['levels'] = infos
    try:
        model = WaveletFlowModel(n=n, channels=channels, base_flow=flows[0], detail_flows=tuple(flows[1:]),
                                 metadata=metadata)
    except ValueError as e:
        raise CheckpointError(f"Levels in {directory} do not form a model: {e}") from e
    logger.info(f"Loaded a depth-{n} model with {channels} channels from {directory}")
    return model


def save_checkpoint(obj, path: str, **kwargs) -> Union[str, List[str]]:
    """
    Saves a whole model (into the directory `path`) or a single LevelFlow (into the file `path`, which then needs the
    level, n and channels keyword arguments of save_level).
    """
    if isinstance(obj, fl.LevelFlow):
        save_level(path, obj, **kwargs)
        return path
    return save_model(obj, path, **kwargs)


def load_checkpoint(path: str):
    """Loads a model from a directory or a (flow, header) pair from a level file."""
    if os.path.isdir(path):
        return load_model(path)
    return load_level(path)
