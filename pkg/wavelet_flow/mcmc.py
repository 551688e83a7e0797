"""
mcmc.py

Annealed sampling from a Wavelet Flow with the No-U-Turn sampler.

Sampling p(x)^gamma with gamma = 1/T^2 is done in the base space of each level's flow, where the tempered density is

    log pi(z) = gamma * sum_j log N(z_j; 0, 1) + (1 - gamma) * logdet_H(z)

with H the inverse flow x = g(z). At T = 1 this is the standard normal; for constant-Jacobian (additive) flows it is a
normal of standard deviation T. Chains run per level: the base image first, then each detail plane conditioned on the
image synthesized from the planes already drawn.

The sampler is the multinomial NUTS variant with identity mass matrix. Step sizes are tuned by dual averaging during
the first adapt_steps transitions and then frozen.

Classes:
    DivergenceError
    AnnealSpec
    NutsConfig
    AnnealedTarget

Functions:
    annealed_log_density(target, z) -> Tuple[float, np.ndarray]
    leapfrog(z, r, grad, step_size, log_density) -> Tuple[z, r, value, grad]
    nuts_sample(target, z_init, config, rng) -> Tuple[List[np.ndarray], dict]
    annealed_sample_level(level_flow, cond, shape, anneal, config, rng) -> Tuple[np.ndarray, List[dict]]
    annealed_sample_model(model, anneal, config, rng) -> np.ndarray
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from wavelet_flow import autodiff as ad
from wavelet_flow import flow as fl

logger = logging.getLogger(__name__)

# Dual averaging constants
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75

DIVERGENCE_THRESHOLD = 1000.0
MIN_STEP_SIZE = 1e-10
MAX_EXTRA_TRANSITIONS = 1000


class DivergenceError(RuntimeError):
    """Raised when the annealed density is not finite or step-size adaptation collapses."""


@dataclass(frozen=True)
class AnnealSpec:
    T: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not 0 < self.T <= 1:
            raise ValueError(f"Temperature must lie in (0, 1], got {self.T}")
        if not np.isclose(self.gamma, 1.0 / self.T ** 2, rtol=1e-12, atol=0.0):
            raise ValueError(f"gamma must equal 1/T^2 = {1.0 / self.T ** 2}, got {self.gamma}")

    @classmethod
    def from_temperature(cls, temperature: float) -> 'AnnealSpec':
        if not 0 < temperature <= 1:
            raise ValueError(f"Temperature must lie in (0, 1], got {temperature}")
        return cls(T=float(temperature), gamma=1.0 / float(temperature) ** 2)


@dataclass
class NutsConfig:
    min_steps: int = 30
    adapt_steps: int = 10
    target_accept: float = 0.8
    max_tree_depth: int = 10
    initial_step_size: float = 0.1
    seed: Optional[int] = None

    def __post_init__(self):
        if self.min_steps < self.adapt_steps:
            raise ValueError(f"min_steps ({self.min_steps}) must be at least adapt_steps ({self.adapt_steps})")
        if self.adapt_steps < 0 or self.max_tree_depth < 1:
            raise ValueError("adapt_steps must be non-negative and max_tree_depth positive")
        if not 0 < self.target_accept < 1:
            raise ValueError(f"target_accept must lie in (0, 1), got {self.target_accept}")
        if self.initial_step_size <= 0:
            raise ValueError(f"initial_step_size must be positive, got {self.initial_step_size}")


@dataclass(frozen=True, eq=False)
class AnnealedTarget:
    """
    The tempered density of one level in base space.

    :param flow: The level's flow.
    :param cond: Conditioning image of a single sample (H, W, Cc), None for the base level.
    :param gamma: Annealing exponent 1/T^2.
    """
    flow: fl.LevelFlow
    cond: Optional[np.ndarray]
    gamma: float

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.flow.input_shape)

    def log_density(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        return annealed_log_density(self, z)

    def transform(self, z: np.ndarray) -> np.ndarray:
        """Maps a base-space point to the level's data space."""
        return fl.level_inverse(self.flow, z, self.cond).numpy()


def annealed_log_density(target: AnnealedTarget, z: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Evaluates gamma * log N(z) + (1 - gamma) * logdet_H(z) and its gradient in z.

    :param target: The annealed target.
    :param z: Base-space point of the flow's input shape.
    :return: (value, gradient) with the gradient shaped like z.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != target.shape:
        raise ValueError(f"Point has shape {z.shape}, the flow expects {target.shape}")
    tape = ad.Tape()
    z_t = tape.leaf(z)
    value = ad.mul(ad.standard_normal_log_density(z_t), target.gamma)
    if target.gamma != 1.0:
        _, logdet_h = fl.level_inverse(target.flow, z_t, target.cond, return_logdet=True)
        value = ad.add(value, ad.mul(logdet_h, 1.0 - target.gamma))
    grad = ad.backward(tape, value)[z_t.tape_id].data
    result = value.item()
    if not np.isfinite(result) or not np.all(np.isfinite(grad)):
        raise DivergenceError(f"Non-finite annealed log density ({result}) or gradient")
    return result, grad


LogDensity = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def leapfrog(z: np.ndarray, r: np.ndarray, grad: np.ndarray, step_size: float, log_density: LogDensity
             ) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """
    One leapfrog step with identity mass matrix.

    :param z: Position.
    :param r: Momentum.
    :param grad: Gradient of the log density at z.
    :param step_size: Signed step size.
    :param log_density: Function returning (value, gradient).
    :return: (z', r', value at z', gradient at z').
    """
    r_half = r + 0.5 * step_size * grad
    z_new = z + step_size * r_half
    value, grad_new = log_density(z_new)
    return z_new, r_half + 0.5 * step_size * grad_new, value, grad_new


def hamiltonian(value: float, r: np.ndarray) -> float:
    """Total energy -log pi(z) + |r|^2 / 2."""
    return -value + 0.5 * float(np.dot(r, r))


class _Tree:
    """
    A trajectory segment built by NUTS: both end points, the multinomially selected state, the log of the summed
    trajectory weights and the running momentum sum used by the U-turn check.
    """

    def __init__(self, z, r, value, grad, log_weight, alpha, n_alpha, divergent):
        self.z_minus = self.z_plus = self.z = z
        self.r_minus = self.r_plus = r
        self.grad_minus = self.grad_plus = self.grad = grad
        self.value_minus = self.value_plus = self.value = value
        self.r_sum = np.copy(r)
        self.log_weight = log_weight
        self.alpha = alpha
        self.n_alpha = n_alpha
        self.divergent = divergent
        self.keep_going = not divergent

    def merge(self, other: '_Tree', direction: int, root: bool, rng: np.random.Generator):
        """
        Appends `other` on the `direction` side.

        At the root the proposal is chosen with probability min(1, w_other / w_self) (biased progressive sampling);
        inside a subtree in proportion to the weights.
        """
        if direction < 0:
            r_inner_self, r_inner_other = self.r_minus, other.r_plus
            self.z_minus, self.r_minus = other.z_minus, other.r_minus
            self.value_minus, self.grad_minus = other.value_minus, other.grad_minus
        else:
            r_inner_self, r_inner_other = self.r_plus, other.r_minus
            self.z_plus, self.r_plus = other.z_plus, other.r_plus
            self.value_plus, self.grad_plus = other.value_plus, other.grad_plus

        self.alpha += other.alpha
        self.n_alpha += other.n_alpha
        self.divergent |= other.divergent
        self.keep_going = self.keep_going and other.keep_going
        if not self.keep_going:
            return

        if root:
            accept = min(1.0, np.exp(other.log_weight - self.log_weight))
            self.log_weight = np.logaddexp(self.log_weight, other.log_weight)
        else:
            self.log_weight = np.logaddexp(self.log_weight, other.log_weight)
            accept = np.exp(other.log_weight - self.log_weight)
        if rng.uniform() < accept:
            self.z, self.value, self.grad = other.z, other.value, other.grad

        r_sum_self = self.r_sum
        self.r_sum = self.r_sum + other.r_sum
        # U-turn on the merged trajectory and across the two halves
        self.keep_going = (
            _no_u_turn(self.r_sum, self.r_minus, self.r_plus)
            and _no_u_turn(r_sum_self + r_inner_other, self.r_minus if direction > 0 else r_inner_other,
                           r_inner_other if direction > 0 else self.r_plus)
            and _no_u_turn(other.r_sum + r_inner_self, r_inner_self if direction > 0 else self.r_minus,
                           self.r_plus if direction > 0 else r_inner_self)
        )


def _no_u_turn(r_sum: np.ndarray, r_minus: np.ndarray, r_plus: np.ndarray) -> bool:
    return float(np.dot(r_sum, r_minus)) > 0 and float(np.dot(r_sum, r_plus)) > 0


def _build_tree(tree: _Tree, direction: int, depth: int, step_size: float, energy0: float,
                log_density: LogDensity, rng: np.random.Generator) -> _Tree:
    if depth == 0:
        if direction < 0:
            z, r, grad = tree.z_minus, tree.r_minus, tree.grad_minus
        else:
            z, r, grad = tree.z_plus, tree.r_plus, tree.grad_plus
        try:
            z_new, r_new, value, grad_new = leapfrog(z, r, grad, direction * step_size, log_density)
            delta = energy0 - hamiltonian(value, r_new)
        except DivergenceError:
            z_new, r_new, value, grad_new = z, r, -np.inf, grad
            delta = -np.inf
        if np.isnan(delta):
            delta = -np.inf
        divergent = -delta > DIVERGENCE_THRESHOLD
        alpha = 0.0 if divergent else min(1.0, float(np.exp(delta)))
        return _Tree(z_new, r_new, value, grad_new, delta, alpha, 0 if divergent else 1, divergent)

    subtree = _build_tree(tree, direction, depth - 1, step_size, energy0, log_density, rng)
    if subtree.keep_going:
        second = _build_tree(subtree, direction, depth - 1, step_size, energy0, log_density, rng)
        subtree.merge(second, direction, root=False, rng=rng)
    return subtree


def nuts_transition(z: np.ndarray, value: float, grad: np.ndarray, step_size: float, max_tree_depth: int,
                    log_density: LogDensity, rng: np.random.Generator) -> Tuple[np.ndarray, float, np.ndarray, Dict]:
    """
    One NUTS transition from z.

    :return: (z', value', grad', info) where info holds the mean acceptance statistic, the tree depth and whether
        the trajectory diverged.
    """
    r0 = rng.standard_normal(z.shape)
    energy0 = hamiltonian(value, r0)
    tree = _Tree(z, r0, value, grad, 0.0, 0.0, 0, False)
    depth = 0
    while depth < max_tree_depth:
        direction = 1 if rng.uniform() < 0.5 else -1
        subtree = _build_tree(tree, direction, depth, step_size, energy0, log_density, rng)
        tree.merge(subtree, direction, root=True, rng=rng)
        depth += 1
        if not tree.keep_going:
            break
    accept = tree.alpha / tree.n_alpha if tree.n_alpha else 0.0
    return tree.z, tree.value, tree.grad, {'accept_stat': accept, 'tree_depth': depth, 'divergent': tree.divergent}


def nuts_sample(
        target: Any,
        z_init: np.ndarray,
        config: NutsConfig,
        rng: Optional[np.random.Generator],
        until_moved: bool = False,
) -> Tuple[List[np.ndarray], Dict[str, Any]]:
    """
    Runs a NUTS chain with dual-averaging step-size adaptation.

    :param target: Object with `log_density(z) -> (value, gradient)`.
    :param z_init: Finite starting point (any shape).
    :param config: Sampler controls; the chain takes config.min_steps transitions.
    :param rng: Randomness source; None seeds one from config.seed.
    :param until_moved: After the minimum number of transitions, keep going until a transition changes the state.
    :return: (chain, diagnostics) with chain[t] the state after transition t + 1.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    z = np.array(z_init, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("Initial point must be finite")
    shape = z.shape

    def log_density(flat):
        value, grad = target.log_density(flat.reshape(shape))
        return value, np.ravel(grad)

    z = z.ravel()
    value, grad = log_density(z)
    step_size = config.initial_step_size
    mu = np.log(10 * step_size)
    h_bar, log_step_bar = 0.0, 0.0

    chain, depths, accepts, step_sizes = [], [], [], []
    divergences = 0
    t = 0
    while True:
        t += 1
        z_new, value_new, grad_new, info = nuts_transition(z, value, grad, step_size, config.max_tree_depth,
                                                           log_density, rng)
        moved = not np.array_equal(z_new, z)
        z, value, grad = z_new, value_new, grad_new
        chain.append(z.reshape(shape))
        depths.append(info['tree_depth'])
        accepts.append(info['accept_stat'])
        step_sizes.append(step_size)
        divergences += int(info['divergent'])

        if t <= config.adapt_steps:
            eta = 1.0 / (t + DA_T0)
            h_bar = (1 - eta) * h_bar + eta * (config.target_accept - info['accept_stat'])
            log_step = mu - np.sqrt(t) / DA_GAMMA * h_bar
            weight = t ** -DA_KAPPA
            log_step_bar = weight * log_step + (1 - weight) * log_step_bar
            step_size = float(np.exp(log_step))
            if t == config.adapt_steps:
                step_size = float(np.exp(log_step_bar))
            if step_size < MIN_STEP_SIZE:
                raise DivergenceError(f"Step size adaptation collapsed to {step_size:.3g} after {t} transitions "
                                      f"({divergences} divergent)")

        if t >= config.min_steps:
            if not until_moved or moved:
                break
            if t - config.min_steps >= MAX_EXTRA_TRANSITIONS:
                logger.warning(f"Chain did not move in {MAX_EXTRA_TRANSITIONS} transitions after the minimum; "
                               f"returning the current state")
                break

    diagnostics = {
        'step_size': step_size,
        'divergences': divergences,
        'tree_depths': depths,
        'step_sizes': step_sizes,
        'mean_tree_depth': float(np.mean(depths)),
        'mean_accept_stat': float(np.mean(accepts)),
        'transitions': t,
    }
    return chain, diagnostics


def annealed_sample_level(
        level_flow: fl.LevelFlow,
        cond: Optional[np.ndarray],
        shape: Tuple[int, ...],
        anneal: AnnealSpec,
        config: Optional[NutsConfig],
        rng: Optional[np.random.Generator],
        level: int = 0,
) -> Tuple[np.ndarray, List[Dict[str, Any]]]:
    """
    Draws a batch of planes of one level from the annealed density, one NUTS chain per sample.

    Each chain starts from N(0, T^2) in base space and its final state is mapped through the inverse flow.

    :param level_flow: The level's flow.
    :param cond: Conditioning batch (N, H, W, Cc) or None for the base level.
    :param shape: Batch shape (N, H, W, C) of the planes.
    :param anneal: Temperature and exponent.
    :param config: Sampler controls (defaults when None).
    :param rng: Randomness source.
    :param level: Level index reported in the diagnostics.
    :return: (planes, [diagnostics record of this level]).
    """
    config = NutsConfig() if config is None else config
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if tuple(shape[1:]) != tuple(level_flow.input_shape):
        raise ValueError(f"Plane shape {tuple(shape[1:])} does not match the flow's {level_flow.input_shape}")
    planes = np.empty(shape)
    step_sizes, divergences, depths = [], 0, []
    for b in range(shape[0]):
        target = AnnealedTarget(level_flow, None if cond is None else np.asarray(cond[b], dtype=np.float64),
                                anneal.gamma)
        z0 = anneal.T * rng.standard_normal(target.shape)
        chain, diag = nuts_sample(target, z0, config, rng, until_moved=True)
        planes[b] = target.transform(chain[-1])
        step_sizes.append(diag['step_size'])
        divergences += diag['divergences']
        depths.extend(diag['tree_depths'])
    record = {
        'level': level,
        'step_size': float(np.mean(step_sizes)),
        'divergences': divergences,
        'mean_tree_depth': float(np.mean(depths)),
        'chains': int(shape[0]),
    }
    logger.debug(f"Annealed level {level} at T={anneal.T}: {record}")
    return planes, [record]


def annealed_sample_model(
        model,
        anneal: AnnealSpec,
        config: Optional[NutsConfig],
        rng: Optional[np.random.Generator],
        num_samples: Optional[int] = None,
        diagnostics: Optional[List[Dict[str, Any]]] = None,
) -> np.ndarray:
    """
    Levelwise annealed sampling: the base image from its tempered density, then each detail plane conditioned on the
    image synthesized from the planes drawn so far.

    :param model: A WaveletFlowModel.
    :param anneal: Temperature and exponent.
    :param config: Sampler controls.
    :param rng: Randomness source; None seeds one from config.seed.
    :param num_samples: Batch size; None draws a single unbatched image.
    :param diagnostics: If given, one record per level is appended to it.
    :return: np.ndarray image(s) of extent 2^n.
    """
    from wavelet_flow.model import super_resolve

    config = NutsConfig() if config is None else config
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n_batch = 1 if num_samples is None else num_samples
    records = []
    base, info = annealed_sample_level(model.base_flow, None, (n_batch, 1, 1, model.channels), anneal, config, rng,
                                       level=0)
    records.extend(info)
    image = super_resolve(model, base, model.n, sampler_mode='mcmc', temperature=anneal.T, rng=rng,
                          nuts_config=config, diagnostics=records)
    if diagnostics is not None:
        diagnostics.extend(records)
    return image if num_samples is not None else image[0]
