"""
flow.py

Normalizing-flow building blocks and the per-level flow of a Wavelet Flow model.

A LevelFlow is a sequence of steps, each an actnorm, an invertible 1x1 channel mixing and a coupling layer. Flows are
fully convolutional and work on channels-last batches (N, H, W, C); unbatched (H, W, C) inputs are accepted as well
and give scalar log-determinants. Conditional flows concatenate a rescaled low-resolution image to the input of every
coupling network.

Parameters are held as Tensors inside frozen dataclasses. To differentiate, `bind` swaps every parameter for a leaf on
a Tape; `replace_parameters` builds an updated flow after an optimizer step.

Classes:
    ActnormParams
    Mix1x1Params
    ConvParams
    CouplingParams
    FlowStep
    LevelFlow

Functions:
    build_level_flow(...) -> LevelFlow
    actnorm_forward / actnorm_inverse
    mix1x1_forward / mix1x1_inverse
    coupling_forward / coupling_inverse
    level_forward(flow, x, cond=None) -> (z, logdet)
    level_inverse(flow, z, cond=None) -> x
    level_log_prob(flow, x, cond=None) -> Tensor
    initialize(flow, x, cond=None) -> LevelFlow
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import linalg as la

from wavelet_flow import autodiff as ad
from wavelet_flow.autodiff import ShapeError, Tape, Tensor

logger = logging.getLogger(__name__)

COUPLING_KINDS = ('affine', 'additive')
MIX_INITS = ('orthogonal', 'identity')
INIT_STD = 0.05


@dataclass(frozen=True)
class ActnormParams:
    """Per-channel y = exp(log_scale) * (x + bias)."""
    log_scale: Tensor
    bias: Tensor
    initialized: bool = False


@dataclass(frozen=True)
class Mix1x1Params:
    """
    W = P L (U + diag(diag_sign * exp(log_diag))), applied per pixel as y = x W^T.

    Only the strictly lower part of L and the strictly upper part of U are used, so W stays invertible.
    """
    P: np.ndarray
    L: Tensor
    U: Tensor
    log_diag: Tensor
    diag_sign: np.ndarray


@dataclass(frozen=True)
class ConvParams:
    kernel: Tensor
    bias: Tensor


@dataclass(frozen=True)
class CouplingParams:
    """
    Coupling layer over a contiguous channel split.

    The first `split` channels form one part and the rest the other. Without `swap` the first part conditions (A) and
    the second is transformed (B); `swap` exchanges the roles. `network` holds the stem, two convolutions per
    residual block and the zero-initialized output layer.
    """
    kind: str
    network: Tuple[ConvParams, ...]
    split: int
    swap: bool = False


@dataclass(frozen=True)
class FlowStep:
    actnorm: ActnormParams
    mix: Mix1x1Params
    coupling: Optional[CouplingParams]


@dataclass(frozen=True)
class LevelFlow:
    """
    One (possibly conditional) normalizing flow mapping a level's coefficients to a standard normal.

    :param steps: The flow steps, applied in order by level_forward.
    :param conditional: Whether coupling networks receive a conditioning image.
    :param cond_channels: Channels of the conditioning image (0 when unconditional).
    :param input_shape: (extent, extent, channels) of the modelled plane.
    :param cond_scale: Conditioning images are mapped to cond * cond_scale - 1 before use.
    :param coupling_kind: The configured coupling kind, kept when a single-channel plane has no couplings.
    """
    steps: Tuple[FlowStep, ...]
    conditional: bool
    cond_channels: int
    input_shape: Tuple[int, int, int]
    cond_scale: float = 1.0
    coupling_kind: str = 'affine'

    @property
    def channels(self) -> int:
        return self.input_shape[-1]

    @property
    def constant_jacobian(self) -> bool:
        """True when no step has an input-dependent log-determinant."""
        return all(s.coupling is None or s.coupling.kind == 'additive' for s in self.steps)

    def num_parameters(self) -> int:
        return sum(t.size for t in named_parameters(self).values())


# ---------------------------------------------------------------------------------------------------------------------
# parameter plumbing


def _walk(obj, prefix: str, kind) -> Iterator[Tuple[str, object]]:
    if isinstance(obj, kind):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, kind)
    elif isinstance(obj, tuple):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}" if prefix else str(i), kind)


def named_parameters(flow: LevelFlow) -> Dict[str, Tensor]:
    """
    Returns every trainable tensor of a flow keyed by a stable dotted name.

    :param flow: The flow.
    :return: dict name -> Tensor, in construction order.
    """
    return dict(_walk(flow.steps, 'steps', Tensor))


def named_buffers(flow: LevelFlow) -> Dict[str, np.ndarray]:
    """Fixed arrays (permutations and diagonal signs) keyed like named_parameters."""
    return dict(_walk(flow.steps, 'steps', np.ndarray))


def _rebuild(obj, prefix: str, values: Mapping[str, object]):
    if isinstance(obj, (Tensor, np.ndarray)):
        return values.get(prefix, obj)
    if dataclasses.is_dataclass(obj):
        changes = {}
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            old = getattr(obj, f.name)
            new = _rebuild(old, name, values)
            if new is not old:
                changes[f.name] = new
        return dataclasses.replace(obj, **changes) if changes else obj
    if isinstance(obj, tuple):
        items = tuple(_rebuild(item, f"{prefix}.{i}" if prefix else str(i), values) for i, item in enumerate(obj))
        return obj if all(a is b for a, b in zip(items, obj)) else items
    return obj


def replace_parameters(flow: LevelFlow, values: Mapping[str, Union[Tensor, np.ndarray]]) -> LevelFlow:
    """
    Builds a flow with some parameters or buffers swapped out.

    :param flow: The original flow (unchanged).
    :param values: dict name -> new value; parameters given as arrays are wrapped into Tensors.
    :return: LevelFlow, the updated flow.
    """
    params = named_parameters(flow)
    buffers = named_buffers(flow)
    prepared = {}
    for name, value in values.items():
        if name in params:
            value = value if isinstance(value, Tensor) else Tensor(value)
            if value.shape != params[name].shape:
                raise ShapeError(f"Parameter {name} has shape {params[name].shape}, got {value.shape}")
        elif name in buffers:
            value = np.array(value.data if isinstance(value, Tensor) else value)
        else:
            raise KeyError(f"Unknown parameter '{name}'")
        prepared[name] = value
    return dataclasses.replace(flow, steps=_rebuild(flow.steps, 'steps', prepared))


def bind(flow: LevelFlow, tape: Tape) -> LevelFlow:
    """
    Returns a copy of the flow whose parameters are leaves on the tape.

    :param flow: The flow to differentiate.
    :param tape: The tape to record on.
    :return: LevelFlow, sharing values with the input.
    """
    return replace_parameters(flow, {name: tape.leaf(t) for name, t in named_parameters(flow).items()})


def set_actnorm_initialized(flow: LevelFlow, initialized: bool = True) -> LevelFlow:
    steps = tuple(dataclasses.replace(s, actnorm=dataclasses.replace(s.actnorm, initialized=initialized))
                  for s in flow.steps)
    return dataclasses.replace(flow, steps=steps)


# ---------------------------------------------------------------------------------------------------------------------
# construction


def _conv(rng: np.random.Generator, k: int, cin: int, cout: int, zero: bool = False) -> ConvParams:
    if zero:
        kernel = np.zeros((k, k, cin, cout))
    else:
        kernel = rng.normal(0.0, INIT_STD, size=(k, k, cin, cout))
    return ConvParams(kernel=Tensor(kernel), bias=Tensor(np.zeros(cout)))


def _mix(rng: np.random.Generator, c: int, mix_init: str) -> Mix1x1Params:
    if mix_init == 'identity':
        p, lower, upper = np.eye(c), np.eye(c), np.eye(c)
    else:
        q, _ = np.linalg.qr(rng.normal(size=(c, c)))
        p, lower, upper = la.lu(q)
    diag = np.diag(upper)
    return Mix1x1Params(
        P=np.array(p),
        L=Tensor(np.tril(lower, -1)),
        U=Tensor(np.triu(upper, 1)),
        log_diag=Tensor(np.log(np.abs(diag))),
        diag_sign=np.sign(diag),
    )


def build_level_flow(
        input_shape: Tuple[int, int, int],
        num_steps: int = 4,
        conv_channels: int = 32,
        residual_blocks: int = 1,
        coupling: str = 'affine',
        cond_channels: int = 0,
        cond_scale: float = 1.0,
        mix_init: str = 'orthogonal',
        rng: Optional[np.random.Generator] = None,
) -> LevelFlow:
    """
    Creates a LevelFlow whose couplings start at the identity (zero-initialized output layers).

    Flows over 1x1 planes use 1x1 convolutions in their coupling networks, larger planes 3x3.

    :param input_shape: (extent, extent, channels) of the modelled plane.
    :param num_steps: Number of (actnorm, 1x1 mix, coupling) steps.
    :param conv_channels: Width of the coupling networks.
    :param residual_blocks: Residual blocks per coupling network.
    :param coupling: 'affine' or 'additive'.
    :param cond_channels: Channels of the conditioning image; 0 for an unconditional flow.
    :param cond_scale: Scale applied to conditioning images (they are then shifted by -1).
    :param mix_init: 'orthogonal' seeds the 1x1 mixing with a random rotation, 'identity' with W = I.
    :param rng: Source of randomness for initial weights.
    :return: LevelFlow, the new flow.
    """
    if coupling not in COUPLING_KINDS:
        raise ValueError(f"Unknown coupling kind '{coupling}', expected one of {COUPLING_KINDS}")
    if mix_init not in MIX_INITS:
        raise ValueError(f"Unknown 1x1 initialisation '{mix_init}', expected one of {MIX_INITS}")
    if num_steps < 1 or conv_channels < 1 or residual_blocks < 0:
        raise ValueError("num_steps and conv_channels must be positive, residual_blocks non-negative")
    rng = np.random.default_rng() if rng is None else rng
    extent, _, c = input_shape
    k = 1 if extent == 1 else 3
    split = (c + 1) // 2
    steps = []
    for s in range(num_steps):
        actnorm = ActnormParams(log_scale=Tensor(np.zeros(c)), bias=Tensor(np.zeros(c)))
        mix = _mix(rng, c, mix_init)
        coupling_params = None
        if c > 1:
            swap = s % 2 == 1
            n_a = c - split if swap else split
            n_b = c - n_a
            n_out = 2 * n_b if coupling == 'affine' else n_b
            layers = [_conv(rng, k, n_a + cond_channels, conv_channels)]
            for _ in range(residual_blocks):
                layers.append(_conv(rng, k, conv_channels, conv_channels))
                layers.append(_conv(rng, k, conv_channels, conv_channels))
            layers.append(_conv(rng, k, conv_channels, n_out, zero=True))
            coupling_params = CouplingParams(kind=coupling, network=tuple(layers), split=split, swap=swap)
        steps.append(FlowStep(actnorm=actnorm, mix=mix, coupling=coupling_params))
    return LevelFlow(
        steps=tuple(steps),
        conditional=cond_channels > 0,
        cond_channels=cond_channels,
        input_shape=tuple(input_shape),
        cond_scale=float(cond_scale),
        coupling_kind=coupling,
    )


# ---------------------------------------------------------------------------------------------------------------------
# layers


def _batched(x) -> Tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), False
    if x.ndim != 4:
        raise ShapeError(f"Expected (H, W, C) or (N, H, W, C), got {x.shape}")
    return x, True


def _unbatched(x: Tensor, logdet: Tensor, batched: bool) -> Tuple[Tensor, Tensor]:
    if batched:
        return x, logdet
    return ad.reshape(x, x.shape[1:]), ad.reshape(logdet, ())


def _per_sample(value: Tensor, n: int) -> Tensor:
    return ad.broadcast_to(ad.reshape(value, (1,)), (n,))


def _channel_vector(v: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return ad.broadcast_to(ad.reshape(v, (1, 1, 1, v.shape[0])), shape)


def actnorm_forward(params: ActnormParams, x: Tensor) -> Tuple[Tensor, Tensor]:
    """
    y = exp(log_scale) * (x + bias) per channel, logdet = H * W * sum(log_scale).

    :param params: Actnorm parameters.
    :param x: Batch (N, H, W, C).
    :return: (y, per-sample logdet of shape (N,)).
    """
    n, h, w, c = x.shape
    y = ad.mul(ad.add(x, _channel_vector(params.bias, x.shape)), ad.exp(_channel_vector(params.log_scale, x.shape)))
    logdet = ad.mul(ad.sum_(params.log_scale), float(h * w))
    return y, _per_sample(logdet, n)


def actnorm_inverse(params: ActnormParams, y: Tensor) -> Tuple[Tensor, Tensor]:
    n, h, w, c = y.shape
    x = ad.sub(ad.mul(y, ad.exp(ad.neg(_channel_vector(params.log_scale, y.shape)))),
               _channel_vector(params.bias, y.shape))
    logdet = ad.mul(ad.sum_(params.log_scale), -float(h * w))
    return x, _per_sample(logdet, n)


def actnorm_initialize(params: ActnormParams, x: np.ndarray) -> ActnormParams:
    """
    Data-dependent initialization: the transformed batch gets zero mean and unit variance per channel.

    :param params: Parameters to initialize (returned unchanged when already initialized).
    :param x: Batch (N, H, W, C) of activations entering the actnorm.
    :return: ActnormParams, initialized.
    """
    if params.initialized:
        return params
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    if np.any(std <= 1e-12):
        raise ValueError(f"Degenerate batch for actnorm initialization: zero variance in channels "
                         f"{np.flatnonzero(std <= 1e-12).tolist()}")
    return ActnormParams(log_scale=Tensor(-np.log(std)), bias=Tensor(-mean), initialized=True)


def mix_matrix(params: Mix1x1Params) -> Tensor:
    """
    Reconstructs W = P L (U + diag(sign * exp(log_diag))) differentiably.

    :param params: Mixing parameters.
    :return: Tensor (c, c).
    """
    c = params.P.shape[0]
    eye = np.eye(c)
    lower = ad.add(ad.mul(params.L, Tensor(np.tril(np.ones((c, c)), -1))), Tensor(eye))
    diag_values = ad.mul(ad.exp(params.log_diag), Tensor(params.diag_sign))
    diag = ad.mul(ad.broadcast_to(ad.reshape(diag_values, (1, c)), (c, c)), Tensor(eye))
    upper = ad.add(ad.mul(params.U, Tensor(np.triu(np.ones((c, c)), 1))), diag)
    return ad.matmul(ad.matmul(Tensor(params.P), lower), upper)


def _apply_channel_matrix(x: Tensor, matrix_t: Tensor) -> Tensor:
    n, h, w, c = x.shape
    flat = ad.reshape(x, (n * h * w, c))
    return ad.reshape(ad.matmul(flat, matrix_t), (n, h, w, c))


def mix1x1_forward(params: Mix1x1Params, x: Tensor) -> Tuple[Tensor, Tensor]:
    """
    y = x W^T per pixel, logdet = H * W * sum(log_diag).

    :param params: Mixing parameters.
    :param x: Batch (N, H, W, C).
    :return: (y, per-sample logdet).
    """
    n, h, w, c = x.shape
    if params.P.shape[0] != c:
        raise ShapeError(f"1x1 mixing expects {params.P.shape[0]} channels, got {c}")
    y = _apply_channel_matrix(x, ad.transpose(mix_matrix(params)))
    logdet = ad.mul(ad.sum_(params.log_diag), float(h * w))
    return y, _per_sample(logdet, n)


def mix1x1_inverse(params: Mix1x1Params, y: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Solves the triangular systems of the PLU factors; the result is linear in y with fixed weights.

    :param params: Mixing parameters (treated as constants).
    :param y: Batch (N, H, W, C).
    :return: (x, per-sample logdet of the inverse).
    """
    n, h, w, c = y.shape
    if params.P.shape[0] != c:
        raise ShapeError(f"1x1 mixing expects {params.P.shape[0]} channels, got {c}")
    eye = np.eye(c)
    lower = np.tril(params.L.data, -1) + eye
    upper = np.triu(params.U.data, 1) + np.diag(params.diag_sign * np.exp(params.log_diag.data))
    # W^-1 = U^-1 L^-1 P^T
    inv = la.solve_triangular(upper, la.solve_triangular(lower, params.P.T, lower=True, unit_diagonal=True))
    x = _apply_channel_matrix(y, Tensor(inv.T))
    logdet = ad.mul(ad.sum_(params.log_diag), -float(h * w))
    return x, _per_sample(logdet, n)


def _conv_layer(p: ConvParams, x: Tensor) -> Tensor:
    y = ad.conv2d(x, p.kernel, stride=1, pad='same')
    return ad.add(y, _channel_vector(p.bias, y.shape))


def coupling_network(params: CouplingParams, inputs: Tensor) -> Tensor:
    """
    Residual convolutional network: stem, residual blocks (conv, relu, conv, skip), zero-initialized output conv.

    :param params: Coupling parameters.
    :param inputs: Conditioning half, already concatenated with the conditioning image.
    :return: Tensor with the raw scale and shift channels (shift only for additive couplings).
    """
    layers = params.network
    h = ad.relu(_conv_layer(layers[0], inputs))
    for b in range((len(layers) - 2) // 2):
        r = ad.relu(_conv_layer(layers[1 + 2 * b], h))
        h = ad.add(h, _conv_layer(layers[2 + 2 * b], r))
    return _conv_layer(layers[-1], h)


def _split(params: CouplingParams, x: Tensor) -> Tuple[Tensor, Tensor]:
    c = x.shape[-1]
    first, second = ad.take(x, 0, params.split), ad.take(x, params.split, c)
    return (second, first) if params.swap else (first, second)


def _join(params: CouplingParams, part_a: Tensor, part_b: Tensor) -> Tensor:
    return ad.concat([part_b, part_a] if params.swap else [part_a, part_b], axis=-1)


def _network_input(part_a: Tensor, cond: Optional[Tensor]) -> Tensor:
    return part_a if cond is None else ad.concat([part_a, cond], axis=-1)


def _scale_shift(params: CouplingParams, h: Tensor, n_b: int) -> Tuple[Optional[Tensor], Tensor]:
    if params.kind == 'additive':
        return None, h
    return ad.tanh(ad.take(h, 0, n_b)), ad.take(h, n_b, 2 * n_b)


def coupling_forward(params: CouplingParams, x: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """
    Affine: y_B = exp(tanh(raw_s)) * x_B + t; additive: y_B = x_B + t. The A part passes through unchanged.

    :param params: Coupling parameters.
    :param x: Batch (N, H, W, C).
    :param cond: Normalized conditioning batch (N, H, W, Cc) or None.
    :return: (y, per-sample logdet).
    """
    part_a, part_b = _split(params, x)
    log_s, t = _scale_shift(params, coupling_network(params, _network_input(part_a, cond)), part_b.shape[-1])
    n = x.shape[0]
    if log_s is None:
        return _join(params, part_a, ad.add(part_b, t)), Tensor(np.zeros(n))
    y_b = ad.add(ad.mul(ad.exp(log_s), part_b), t)
    return _join(params, part_a, y_b), ad.sum_(log_s, axes=(1, 2, 3))


def coupling_inverse(params: CouplingParams, y: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    part_a, part_b = _split(params, y)
    log_s, t = _scale_shift(params, coupling_network(params, _network_input(part_a, cond)), part_b.shape[-1])
    n = y.shape[0]
    if log_s is None:
        return _join(params, part_a, ad.sub(part_b, t)), Tensor(np.zeros(n))
    x_b = ad.mul(ad.sub(part_b, t), ad.exp(ad.neg(log_s)))
    return _join(params, part_a, x_b), ad.neg(ad.sum_(log_s, axes=(1, 2, 3)))


# ---------------------------------------------------------------------------------------------------------------------
# whole level


def normalize_condition(flow: LevelFlow, cond, n: int, spatial: Tuple[int, int]) -> Optional[Tensor]:
    """
    Checks and rescales the conditioning image of a conditional flow.

    :param flow: The flow.
    :param cond: Conditioning image batch, or None for unconditional flows.
    :param n: Batch size of the modelled plane.
    :param spatial: (H, W) of the modelled plane.
    :return: Tensor (N, H, W, Cc) mapped to cond * cond_scale - 1, or None.
    """
    if not flow.conditional:
        if cond is not None:
            raise ShapeError("Unconditional flow given a conditioning image")
        return None
    if cond is None:
        raise ShapeError("Conditional flow needs a conditioning image")
    cond, _ = _batched(cond)
    if cond.shape[0] != n or cond.shape[1:3] != tuple(spatial) or cond.shape[3] != flow.cond_channels:
        raise ShapeError(f"Conditioning shape {cond.shape} does not fit a ({n}, {spatial[0]}, {spatial[1]}, "
                         f"{flow.cond_channels}) batch")
    return ad.add(ad.mul(cond, flow.cond_scale), -1.0)


def _check_input(flow: LevelFlow, x: Tensor):
    if x.shape[-1] != flow.channels:
        raise ShapeError(f"Flow models {flow.channels} channels, got {x.shape[-1]}")
    if x.shape[1] != x.shape[2]:
        raise ShapeError(f"Flow inputs must be square, got {x.shape[1]}x{x.shape[2]}")


def level_forward(flow: LevelFlow, x, cond=None) -> Tuple[Tensor, Tensor]:
    """
    Maps data to the base space: z = f(x | cond).

    :param flow: The flow.
    :param x: Plane (H, W, C) or batch (N, H, W, C); any spatial extent works since the flow is fully convolutional.
    :param cond: Conditioning image matching x spatially, required for conditional flows.
    :return: (z, logdet) with logdet per sample, or a scalar for unbatched input.
    """
    x, batched = _batched(x)
    _check_input(flow, x)
    cond = normalize_condition(flow, cond, x.shape[0], x.shape[1:3])
    total = Tensor(np.zeros(x.shape[0]))
    for step in flow.steps:
        x, ld = actnorm_forward(step.actnorm, x)
        total = ad.add(total, ld)
        x, ld = mix1x1_forward(step.mix, x)
        total = ad.add(total, ld)
        if step.coupling is not None:
            x, ld = coupling_forward(step.coupling, x, cond)
            total = ad.add(total, ld)
    return _unbatched(x, total, batched)


def level_inverse(flow: LevelFlow, z, cond=None, return_logdet: bool = False):
    """
    Maps base samples to data: x = g(z | cond), applying the steps in reverse.

    :param flow: The flow.
    :param z: Base-space plane or batch.
    :param cond: Conditioning image, required for conditional flows.
    :param return_logdet: Also return log|det dg/dz| per sample.
    :return: x, or (x, logdet_inverse) when return_logdet is set.
    """
    z, batched = _batched(z)
    _check_input(flow, z)
    cond = normalize_condition(flow, cond, z.shape[0], z.shape[1:3])
    total = Tensor(np.zeros(z.shape[0]))
    for step in reversed(flow.steps):
        if step.coupling is not None:
            z, ld = coupling_inverse(step.coupling, z, cond)
            total = ad.add(total, ld)
        z, ld = mix1x1_inverse(step.mix, z)
        total = ad.add(total, ld)
        z, ld = actnorm_inverse(step.actnorm, z)
        total = ad.add(total, ld)
    x, total = _unbatched(z, total, batched)
    return (x, total) if return_logdet else x


def level_log_prob(flow: LevelFlow, x, cond=None) -> Tensor:
    """
    log p(x | cond) = sum_j log N(z_j; 0, 1) + logdet.

    :param flow: The flow.
    :param x: Plane or batch.
    :param cond: Conditioning image, required for conditional flows.
    :return: Tensor of per-sample log densities (scalar for unbatched input).
    """
    z, logdet = level_forward(flow, x, cond)
    axes = tuple(range(z.ndim - 3, z.ndim))
    return ad.add(ad.standard_normal_log_density(z, axes), logdet)


def initialize(flow: LevelFlow, x, cond=None) -> LevelFlow:
    """
    Runs the data-dependent actnorm initialization step by step on a batch.

    :param flow: Flow whose uninitialized actnorms are set from the batch statistics.
    :param x: Batch (N, H, W, C).
    :param cond: Conditioning batch for conditional flows.
    :return: LevelFlow with every actnorm initialized.
    """
    x, _ = _batched(x)
    _check_input(flow, x)
    norm_cond = normalize_condition(flow, cond, x.shape[0], x.shape[1:3])
    x = x.detach()
    steps = []
    for step in flow.steps:
        actnorm = actnorm_initialize(step.actnorm, x.data)
        x, _ = actnorm_forward(actnorm, x)
        x, _ = mix1x1_forward(step.mix, x)
        if step.coupling is not None:
            x, _ = coupling_forward(step.coupling, x, norm_cond)
        steps.append(dataclasses.replace(step, actnorm=actnorm))
    logger.debug(f"Initialized actnorm of a {flow.input_shape} flow on a batch of {x.shape[0]}")
    return dataclasses.replace(flow, steps=tuple(steps))
