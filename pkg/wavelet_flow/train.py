"""
train.py

Independent maximum-likelihood training of the levels of a Wavelet Flow.

Each level's flow is trained on its own (detail, conditioning image) pairs with an Adamax optimizer, optionally on
aligned random patches, and stopped early when the validation negative log-likelihood per dimension stops improving.
Levels share no state, so they can be trained in any order or in separate processes.

Classes:
    NonFiniteGradientError
    TrainConfig
    OptimizerState
    LevelData
    QuantizedLevelData

Functions:
    dequantize(image_u8, rng) -> np.ndarray
    dequantize_filtered(image, k, n, rng) -> np.ndarray
    extract_patches(detail, cond, patch_size, rng) -> Tuple[np.ndarray, Optional[np.ndarray]]
    adamax_step(state, params, grads, config) -> Dict[str, np.ndarray]
    train_level(flow, dataset, val_split, config) -> Tuple[LevelFlow, List[dict]]
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from wavelet_flow import autodiff as ad
from wavelet_flow import flow as fl
from wavelet_flow.wavelet import lowpass_to_level

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient contains NaN or Inf; training aborts rather than skipping the step."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 50
    early_stop_patience: int = 10
    seed: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"beta1 and beta2 must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1 or self.epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, epochs and early_stop_patience must be positive")


@dataclass
class OptimizerState:
    """Adamax moments: first-moment estimate m and infinity-norm accumulator u per parameter."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    u: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class LevelData:
    """
    Training pairs of one level.

    :param x: Modelled planes (N, H, W, C): I0 for the base level, Di for detail levels.
    :param cond: Conditioning images (N, H, W, Cc) or None for the base level.
    """
    x: np.ndarray
    cond: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.x)

    @property
    def plane_shape(self) -> Tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, index) -> 'LevelData':
        return LevelData(self.x[index], None if self.cond is None else self.cond[index])

    def materialize(self, rng: np.random.Generator) -> 'LevelData':
        return self


@dataclass
class QuantizedLevelData:
    """
    Training pairs of one level kept as 8-bit images and dequantized on demand, so every draw sees fresh noise.

    :param images_u8: Integer images (N, 2^m, 2^m, C) at full resolution.
    :param pairs: Maps continuous full-resolution images to the level's LevelData.
    """
    images_u8: np.ndarray
    pairs: Callable[[np.ndarray], LevelData]

    def __len__(self) -> int:
        return len(self.images_u8)

    @property
    def plane_shape(self) -> Tuple[int, ...]:
        return self.pairs(np.zeros(self.images_u8[:1].shape)).plane_shape

    def subset(self, index) -> 'QuantizedLevelData':
        return QuantizedLevelData(self.images_u8[index], self.pairs)

    def materialize(self, rng: np.random.Generator) -> LevelData:
        """Dequantizes at full resolution (U[0, 1) per pixel) and forms the level's pairs."""
        return self.pairs(dequantize(self.images_u8, rng))


def dequantize(image_u8: np.ndarray, rng: Optional[np.random.Generator] = None,
               noise: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Uniform dequantization v + u with u ~ U[0, 1) i.i.d., giving values in [0, 256).

    :param image_u8: Integer intensities.
    :param rng: Noise source (ignored when noise is given).
    :param noise: Explicit noise of the image's shape.
    :return: np.ndarray of float64.
    """
    values = np.asarray(image_u8, dtype=np.float64)
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = rng.random(values.shape)
    return values + noise


def dequantize_filtered(image: np.ndarray, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Dequantizes a low-pass image with noise that went through the same low-pass filter.

    A level-k image of an n-level dataset is the low-pass of an 8-bit image, so the matching noise is the level-k
    low-pass of U[0, 1) noise at full resolution (mean 0.5 * 2^(n - k) per coefficient).

    :param image: Level-k image (2^k, 2^k, C), unbatched or batched.
    :param n: Level of the original dataset images.
    :param rng: Noise source.
    :return: np.ndarray, the dequantized image.
    """
    image = np.asarray(image, dtype=np.float64)
    k = int(image.shape[-3]).bit_length() - 1
    if k > n:
        raise ValueError(f"Image level {k} exceeds dataset level {n}")
    rng = np.random.default_rng() if rng is None else rng
    full_shape = image.shape[:-3] + (2 ** n, 2 ** n, image.shape[-1])
    return image + lowpass_to_level(rng.random(full_shape), k)


def extract_patches(
        detail: np.ndarray,
        cond: Optional[np.ndarray],
        patch_size: int,
        rng: np.random.Generator,
        return_offsets: bool = False,
):
    """
    Crops aligned random patches from detail planes and their conditioning images.

    Offsets are drawn uniformly per sample from the patch grid {0, p, 2p, ...}, identically for both tensors.

    :param detail: Batch (N, H, W, C).
    :param cond: Batch (N, H, W, Cc) or None.
    :param patch_size: Patch extent p, dividing H.
    :param rng: Offset source.
    :param return_offsets: Also return the (N, 2) array of (row, column) offsets.
    :return: (detail_patch, cond_patch[, offsets]).
    """
    extent = detail.shape[1]
    if patch_size > extent:
        raise ValueError(f"Patch size {patch_size} larger than plane extent {extent}")
    if extent % patch_size:
        raise ValueError(f"Patch size {patch_size} does not divide plane extent {extent}")
    cells = extent // patch_size
    offsets = rng.integers(0, cells, size=(len(detail), 2)) * patch_size
    d_out = np.empty((len(detail), patch_size, patch_size, detail.shape[-1]))
    c_out = None if cond is None else np.empty((len(cond), patch_size, patch_size, cond.shape[-1]))
    for b, (oy, ox) in enumerate(offsets):
        d_out[b] = detail[b, oy:oy + patch_size, ox:ox + patch_size]
        if cond is not None:
            c_out[b] = cond[b, oy:oy + patch_size, ox:ox + patch_size]
    if return_offsets:
        return d_out, c_out, offsets
    return d_out, c_out


def adamax_step(
        state: OptimizerState,
        params: Dict[str, np.ndarray],
        grads: Dict[str, np.ndarray],
        config: TrainConfig,
) -> Dict[str, np.ndarray]:
    """
    One Adamax update of a set of parameters, in place on the optimizer state.

    m <- b1 m + (1 - b1) g;  u <- max(b2 u, |g|);  theta <- theta - lr / (1 - b1^t) * m / (u + eps)

    :param state: Moments and step counter, updated.
    :param params: dict name -> current values.
    :param grads: dict name -> gradient of the loss.
    :param config: Learning rate, betas and epsilon.
    :return: dict name -> updated values.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"Non-finite gradient for '{name}' at step {state.step + 1}")
    state.step += 1
    correction = config.learning_rate / (1.0 - config.beta1 ** state.step)
    updated = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != value.shape:
            raise ValueError(f"Gradient of '{name}' has shape {g.shape}, parameter {value.shape}")
        m = config.beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - config.beta1) * g
        u = np.maximum(config.beta2 * state.u.get(name, np.zeros_like(value)), np.abs(g))
        state.m[name], state.u[name] = m, u
        updated[name] = value - correction * m / (u + config.epsilon)
    return updated


def nll_per_dim(flow: fl.LevelFlow, data: LevelData, batch_size: int = 256) -> float:
    """
    Mean negative log-likelihood per dimension of a level dataset.

    :param flow: The flow.
    :param data: Planes and conditioning images.
    :param batch_size: Evaluation chunk size.
    :return: float.
    """
    total = 0.0
    dims = int(np.prod(data.x.shape[1:]))
    for start in range(0, len(data), batch_size):
        chunk = data.subset(slice(start, start + batch_size))
        total += float(np.sum(fl.level_log_prob(flow, chunk.x, chunk.cond).data))
    return -total / (len(data) * dims)


def loss_and_grads(flow: fl.LevelFlow, x: np.ndarray, cond: Optional[np.ndarray]
                   ) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean NLL per dimension of a batch and its gradient with respect to every parameter.

    :param flow: The flow.
    :param x: Batch of planes.
    :param cond: Conditioning batch or None.
    :return: (loss, dict name -> gradient).
    """
    tape = ad.Tape()
    bound = fl.bind(flow, tape)
    log_p = fl.level_log_prob(bound, x, cond)
    dims = int(np.prod(x.shape[1:]))
    loss = ad.mul(ad.mean(log_p), -1.0 / dims)
    grads = ad.backward(tape, loss)
    named = fl.named_parameters(bound)
    return loss.item(), {name: grads[t.tape_id].data for name, t in named.items()}


TrainingData = Union[LevelData, QuantizedLevelData]


def _split_validation(dataset: TrainingData, val_split: Union[TrainingData, float, None], rng: np.random.Generator
                      ) -> Tuple[TrainingData, Optional[LevelData]]:
    if isinstance(val_split, (LevelData, QuantizedLevelData)):
        return dataset, val_split.materialize(rng)
    if not val_split:
        return dataset, None
    n_val = max(1, int(round(len(dataset) * float(val_split))))
    if n_val >= len(dataset):
        raise ValueError(f"Validation fraction {val_split} leaves no training data")
    return (dataset.subset(slice(0, len(dataset) - n_val)),
            dataset.subset(slice(len(dataset) - n_val, None)).materialize(rng))


def train_level(
        flow: fl.LevelFlow,
        dataset: TrainingData,
        val_split: Union[TrainingData, float, None],
        config: TrainConfig,
        patch_size: Optional[int] = None,
        level: int = 0,
        callback: Optional[Callable[[Dict], None]] = None,
) -> Tuple[fl.LevelFlow, List[Dict]]:
    """
    Trains one level's flow by minimizing the negative log-likelihood per dimension.

    The first training batch initializes every actnorm. Quantized training data is dequantized with fresh noise for
    every batch. After each epoch the validation NLL per dimension is measured on fixed data; training stops after
    `early_stop_patience` epochs without improvement and the parameters of the best epoch are returned.

    :param flow: The flow to train (not modified).
    :param dataset: Training pairs, continuous or quantized.
    :param val_split: Validation pairs (quantized ones are dequantized once), a fraction of the dataset to hold out,
        or None to select on training NLL.
    :param config: Optimizer and schedule settings.
    :param patch_size: Train on random aligned patches of this extent; None uses whole planes.
    :param level: Level index, mixed into the seed so that levels draw independent randomness.
    :param callback: Called with each epoch's history record.
    :return: (best flow, history) where history holds one dict per epoch.
    """
    if len(dataset) == 0:
        raise ValueError(f"Empty dataset for level {level}")
    train_data, val_data = _split_validation(dataset, val_split, np.random.default_rng([config.seed, level, 1]))
    extent = train_data.plane_shape[0]
    if patch_size is not None and patch_size >= extent:
        patch_size = None
    rng = np.random.default_rng([config.seed, level])
    state = OptimizerState()

    best_flow, best_val, best_epoch = flow, np.inf, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_data))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = train_data.subset(order[start:start + config.batch_size]).materialize(rng)
            x, cond = batch.x, batch.cond
            if patch_size is not None:
                x, cond = extract_patches(x, cond, patch_size, rng)
            if not all(s.actnorm.initialized for s in flow.steps):
                flow = fl.initialize(flow, x, cond)
                if epoch == 1 and start == 0:
                    best_flow = flow
            loss, grads = loss_and_grads(flow, x, cond)
            params = {name: t.data for name, t in fl.named_parameters(flow).items()}
            flow = fl.replace_parameters(flow, adamax_step(state, params, grads, config))
            losses.append(loss)

        train_nll = float(np.mean(losses))
        val_nll = nll_per_dim(flow, val_data, config.eval_batch_size) if val_data is not None else train_nll
        record = {'level': level, 'epoch': epoch, 'train_nll': train_nll, 'val_nll': val_nll,
                  'seconds': time.perf_counter() - started}
        history.append(record)
        logger.info(f"Level {level} epoch {epoch}: train NLL/dim {train_nll:.4f}, val NLL/dim {val_nll:.4f}")
        if callback is not None:
            callback(record)

        if val_nll < best_val:
            best_flow, best_val, best_epoch = flow, val_nll, epoch
        elif epoch - best_epoch >= config.early_stop_patience:
            logger.info(f"Level {level}: early stopping at epoch {epoch}, best epoch {best_epoch} "
                        f"(val NLL/dim {best_val:.4f})")
            break

    for record in history:
        record['best_epoch'] = best_epoch
    return best_flow, history
