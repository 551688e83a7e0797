"""
model.py

The Wavelet Flow density: p(In) = p(I0) * prod_i p(Di | Ii).

A WaveletFlowModel holds one unconditional flow for the 1x1 base image I0 and one conditional flow per detail level.
Because the Haar transform has unit Jacobian determinant, the log-likelihood of an image is exactly the sum of the
per-level flow log-likelihoods of its pyramid. Level terms are indexed 0 ... n with index 0 the base flow and index
i + 1 the flow of detail plane Di.

Intensities stay on their raw scale [0, 256) throughout, so a model that is uniform over that cube scores exactly 8 bits
per dimension.

Classes:
    WaveletFlowModel

Functions:
    build_model(n, channels, levels, rng) -> WaveletFlowModel
    log_prob(model, image) -> Tuple[total, per_level]
    bits_per_dim(model, image_u8, rng) -> float
    truncate(model, k) -> WaveletFlowModel
    intensity_scale_bits(model) -> float
    sample_direct(model, rng, temperature) -> np.ndarray
    super_resolve(model, image, target_level, sampler_mode, temperature) -> np.ndarray
    gaussian_baseline_bpd(train, test) -> float
    detail_histograms(images, n, bins) -> dict
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from wavelet_flow import flow as fl
from wavelet_flow.wavelet import build_pyramid, haar_synthesize, image_level

logger = logging.getLogger(__name__)

LN2 = np.log(2.0)


@dataclass(frozen=True)
class WaveletFlowModel:
    """
    :param n: Depth; the model covers 2^n x 2^n images.
    :param channels: Image channels C.
    :param base_flow: Flow over the 1x1xC base image I0.
    :param detail_flows: detail_flows[i] models Di (extent 2^i, 3C channels) given Ii.
    :param metadata: Free-form provenance (config, per-level early-stop epochs, ...).
    """
    n: int
    channels: int
    base_flow: fl.LevelFlow
    detail_flows: Tuple[fl.LevelFlow, ...] = ()
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.detail_flows) != self.n:
            raise ValueError(f"Model of depth {self.n} needs {self.n} detail flows, got {len(self.detail_flows)}")
        for i, f in enumerate(self.detail_flows):
            if f.input_shape != (2 ** i, 2 ** i, 3 * self.channels):
                raise ValueError(f"Detail flow {i} has input shape {f.input_shape}, "
                                 f"expected {(2 ** i, 2 ** i, 3 * self.channels)}")

    @property
    def num_dims(self) -> int:
        return self.channels * 4 ** self.n

    def level_flow(self, level: int) -> fl.LevelFlow:
        """Flow of level index `level` (0 = base, i + 1 = detail plane i)."""
        if not 0 <= level <= self.n:
            raise ValueError(f"Level index {level} outside [0, {self.n}]")
        return self.base_flow if level == 0 else self.detail_flows[level - 1]

    def with_level(self, level: int, level_flow: fl.LevelFlow) -> 'WaveletFlowModel':
        """Returns a model with one level's flow replaced; every other level is shared unchanged."""
        if level == 0:
            return dataclasses.replace(self, base_flow=level_flow)
        details = list(self.detail_flows)
        details[level - 1] = level_flow
        return dataclasses.replace(self, detail_flows=tuple(details))

    @property
    def constant_jacobian(self) -> bool:
        return all(self.level_flow(j).constant_jacobian for j in range(self.n + 1))


def cond_scale(level: int, n: int) -> float:
    """
    Scale applied to the conditioning image of detail level `level` in an n-level model.

    Ii lives in [0, 256 * 2^(n - i)); scaling by 2^(i - n) / 128 and shifting by -1 maps it to roughly [-1, 1).
    """
    return 2.0 ** (level - n) / 128.0


def build_model(
        n: int,
        channels: int,
        levels: Sequence[Any],
        rng: Optional[np.random.Generator] = None,
        mix_init: str = 'orthogonal',
        metadata: Optional[Dict[str, Any]] = None,
) -> WaveletFlowModel:
    """
    Creates a freshly initialized model.

    :param n: Depth.
    :param channels: Image channels.
    :param levels: n + 1 per-level settings with attributes steps, conv_channels, residual_blocks and coupling
        (see config.LevelConfig); index 0 is the base flow.
    :param rng: Source of randomness.
    :param mix_init: Initialisation of the 1x1 mixing layers.
    :param metadata: Provenance stored on the model.
    :return: WaveletFlowModel.
    """
    if len(levels) != n + 1:
        raise ValueError(f"Need {n + 1} level settings for a depth-{n} model, got {len(levels)}")
    rng = np.random.default_rng() if rng is None else rng
    base = fl.build_level_flow(
        (1, 1, channels), levels[0].steps, levels[0].conv_channels, levels[0].residual_blocks,
        levels[0].coupling, mix_init=mix_init, rng=rng,
    )
    details = []
    for i in range(n):
        lc = levels[i + 1]
        details.append(fl.build_level_flow(
            (2 ** i, 2 ** i, 3 * channels), lc.steps, lc.conv_channels, lc.residual_blocks, lc.coupling,
            cond_channels=channels, cond_scale=cond_scale(i, n), mix_init=mix_init, rng=rng,
        ))
    return WaveletFlowModel(n=n, channels=channels, base_flow=base, detail_flows=tuple(details),
                            metadata=dict(metadata or {}))


def _check_resolution(model: WaveletFlowModel, image) -> None:
    k = image_level(image)
    if k != model.n:
        raise ValueError(f"Model covers {2 ** model.n}x{2 ** model.n} images, got {2 ** k}x{2 ** k}")
    if image.shape[-1] != model.channels:
        raise ValueError(f"Model covers {model.channels}-channel images, got {image.shape[-1]}")


def _value(t) -> Union[float, np.ndarray]:
    data = t.data
    return float(data) if data.ndim == 0 else np.array(data)


def log_prob(model: WaveletFlowModel, image: np.ndarray) -> Tuple[Union[float, np.ndarray], List]:
    """
    Exact log-likelihood of continuous images as the sum of per-level terms.

    :param model: The model.
    :param image: Dequantized image (2^n, 2^n, C) or batch (N, 2^n, 2^n, C).
    :return: (total, per_level) where per_level[0] is the base term and per_level[i + 1] the term of detail plane i;
        floats for a single image, arrays of shape (N,) for a batch. total is the left-to-right sum of per_level.
    """
    image = np.asarray(image, dtype=np.float64)
    _check_resolution(model, image)
    pyr = build_pyramid(image)
    per_level = [_value(fl.level_log_prob(model.base_flow, pyr.base))]
    for i, detail_flow in enumerate(model.detail_flows):
        per_level.append(_value(fl.level_log_prob(detail_flow, pyr.details[i], cond=pyr.lows[i])))
    total = per_level[0]
    for term in per_level[1:]:
        total = total + term
    return total, per_level


def bits_per_dim(
        model: WaveletFlowModel,
        image_u8: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        noise: Optional[np.ndarray] = None,
        per_level: bool = False,
):
    """
    Negative log2-likelihood per dimension of 8-bit images under uniform dequantization.

    :param model: The model.
    :param image_u8: Integer intensities, one image or a batch.
    :param rng: Dequantization noise source, used when `noise` is not given.
    :param noise: Explicit dequantization noise in [0, 1) (e.g. zeros, or low-pass filtered noise).
    :param per_level: Also return the per-level contributions, which sum to the total.
    :return: bpd (float, or array for a batch), or (bpd, per-level bpd list) when per_level is set.
    """
    from wavelet_flow.train import dequantize

    if noise is None:
        values = dequantize(image_u8, rng)
    else:
        values = np.asarray(image_u8, dtype=np.float64) + noise
    total, terms = log_prob(model, values)
    scale = -1.0 / (model.num_dims * LN2)
    bpd = total * scale
    if per_level:
        return bpd, [t * scale for t in terms]
    return bpd


def truncate(model: WaveletFlowModel, k: int) -> WaveletFlowModel:
    """
    The embedded model of 2^k x 2^k images: p(Ik) = p(I0) * prod_{i<k} p(Di | Ii).

    :param model: The full model.
    :param k: Target depth, 0 <= k <= n.
    :return: WaveletFlowModel sharing the first k detail flows.
    """
    if not 0 <= k <= model.n:
        raise ValueError(f"Cannot truncate a depth-{model.n} model to level {k}")
    if k == model.n:
        return model
    metadata = dict(model.metadata)
    metadata['truncated_from'] = model.metadata.get('truncated_from', model.n)
    return WaveletFlowModel(n=k, channels=model.channels, base_flow=model.base_flow,
                            detail_flows=tuple(model.detail_flows[:k]), metadata=metadata)


def intensity_scale_bits(model: WaveletFlowModel) -> float:
    """
    Bits per dimension separating a truncated model's scale from 8-bit intensities.

    A model truncated from depth n to k scores level-k images, which are 2^(n - k) times the 8-bit box average, so
    its BPD on the 8-bit scale is its raw BPD minus (n - k). Zero for models that were never truncated.
    """
    return float(model.metadata.get('truncated_from', model.n) - model.n)


def direct_sampling_is_exact(model: WaveletFlowModel, temperature: float) -> bool:
    """Scaling the base standard deviation samples the annealed density only for constant-Jacobian flows."""
    return temperature == 1.0 or model.constant_jacobian


def sample_detail_direct(level_flow: fl.LevelFlow, cond: Optional[np.ndarray], shape: Tuple[int, ...],
                         rng: np.random.Generator, temperature: float) -> np.ndarray:
    """
    Draws one plane from a level flow by pushing N(0, T^2) noise through its inverse.

    :param level_flow: The level's flow.
    :param cond: Conditioning batch or None.
    :param shape: Batch shape (N, H, W, C) of the plane.
    :param rng: Noise source.
    :param temperature: Standard deviation of the base noise.
    :return: np.ndarray of the given shape.
    """
    z = temperature * rng.standard_normal(shape)
    return fl.level_inverse(level_flow, z, cond).numpy()


def sample_direct(model: WaveletFlowModel, rng: np.random.Generator, temperature: float = 1.0,
                  num_samples: Optional[int] = None) -> np.ndarray:
    """
    Ancestral sampling: I0 from the base flow, then Di ~ p(Di | Ii) and I(i+1) = h^-1(Ii, Di).

    With temperature T the base noise has standard deviation T. This is exact annealing only for constant-Jacobian
    (additive) models; for affine models it is an approximation and a warning is logged.

    :param model: The model.
    :param rng: Noise source.
    :param temperature: Base standard deviation T >= 0.
    :param num_samples: Batch size; None draws a single unbatched image.
    :return: np.ndarray image(s) of extent 2^n.
    """
    if temperature < 0:
        raise ValueError(f"Temperature must be non-negative, got {temperature}")
    if not direct_sampling_is_exact(model, temperature):
        logger.warning(f"Direct sampling at T={temperature} with affine couplings only approximates the annealed "
                       f"density; use MCMC sampling for the exact target")
    n_batch = 1 if num_samples is None else num_samples
    c = model.channels
    image = sample_detail_direct(model.base_flow, None, (n_batch, 1, 1, c), rng, temperature)
    for i, detail_flow in enumerate(model.detail_flows):
        detail = sample_detail_direct(detail_flow, image, (n_batch, 2 ** i, 2 ** i, 3 * c), rng, temperature)
        image = haar_synthesize(image, detail)
    return image if num_samples is not None else image[0]


def super_resolve(
        model: WaveletFlowModel,
        image: np.ndarray,
        target_level: int,
        sampler_mode: str = 'direct',
        temperature: float = 1.0,
        rng: Optional[np.random.Generator] = None,
        nuts_config=None,
        diagnostics: Optional[List[Dict[str, Any]]] = None,
) -> np.ndarray:
    """
    Probabilistic super-resolution: samples the missing detail planes of a low-resolution image.

    Only detail planes are sampled, so low-passing the output back to the input level returns the input.

    :param model: The model (depth >= target_level).
    :param image: Continuous image of extent 2^k, unbatched or batched.
    :param target_level: Output level j with k <= j <= n.
    :param sampler_mode: 'direct' (noise pushed through the inverse flows) or 'mcmc' (annealed NUTS per level).
    :param temperature: Annealing temperature T.
    :param rng: Randomness source.
    :param nuts_config: mcmc.NutsConfig for sampler_mode 'mcmc'.
    :param diagnostics: If given, per-level sampler diagnostics are appended to it.
    :return: np.ndarray of extent 2^target_level.
    """
    if sampler_mode not in ('direct', 'mcmc'):
        raise ValueError(f"Unknown sampler mode '{sampler_mode}'")
    image = np.asarray(image, dtype=np.float64)
    k = image_level(image)
    if image.shape[-1] != model.channels:
        raise ValueError(f"Model covers {model.channels}-channel images, got {image.shape[-1]}")
    if not k <= target_level <= model.n:
        raise ValueError(f"Cannot super-resolve from level {k} to {target_level} with a depth-{model.n} model")
    if rng is None:
        rng = np.random.default_rng(None if nuts_config is None else nuts_config.seed)
    batched = image.ndim == 4
    current = image if batched else image[None]
    c = model.channels
    for i in range(k, target_level):
        shape = (current.shape[0], 2 ** i, 2 ** i, 3 * c)
        if sampler_mode == 'direct':
            detail = sample_detail_direct(model.detail_flows[i], current, shape, rng, temperature)
        else:
            from wavelet_flow import mcmc
            detail, info = mcmc.annealed_sample_level(
                model.detail_flows[i], current, shape, mcmc.AnnealSpec.from_temperature(temperature),
                nuts_config, rng, level=i + 1,
            )
            if diagnostics is not None:
                diagnostics.extend(info)
        current = haar_synthesize(current, detail)
    return current if batched else current[0]


def gaussian_baseline_bpd(train: np.ndarray, test: np.ndarray) -> float:
    """
    Bits per dimension of an independent per-pixel Gaussian fitted to training data.

    :param train: Dequantized training images (N, H, W, C).
    :param test: Dequantized evaluation images (M, H, W, C).
    :return: float, mean bpd over the evaluation images.
    """
    mean = train.mean(axis=0)
    var = train.var(axis=0) + 1e-12
    log_p = -0.5 * (np.log(2 * np.pi * var) + (test - mean) ** 2 / var)
    dims = int(np.prod(test.shape[1:]))
    return float(-log_p.reshape(len(test), -1).sum(axis=1).mean() / (dims * LN2))


def detail_histograms(images: np.ndarray, bins: int = 51, limit: Optional[float] = None) -> Dict[str, Any]:
    """
    Marginal histograms of detail coefficients per level, for comparing samples against data.

    Coefficients of level i are divided by 2^(n - i - 1) so that all levels share the intensity scale.

    :param images: Batch (N, 2^n, 2^n, C).
    :param bins: Number of bins.
    :param limit: Histogram range [-limit, limit]; defaults to the largest normalized magnitude.
    :return: dict with 'edges' and per-level 'counts' (densities) keyed by detail level.
    """
    images = np.asarray(images, dtype=np.float64)
    pyr = build_pyramid(images)
    normalized = [d / 2.0 ** (pyr.n - i - 1) for i, d in enumerate(pyr.details)]
    if limit is None:
        limit = max((float(np.abs(d).max()) for d in normalized), default=1.0) or 1.0
    edges = np.linspace(-limit, limit, bins + 1)
    counts = {}
    for i, d in enumerate(normalized):
        hist, _ = np.histogram(d, bins=edges, density=True)
        counts[str(i)] = hist.tolist()
    return {'edges': edges.tolist(), 'counts': counts}
