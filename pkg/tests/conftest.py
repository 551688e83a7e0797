import numpy as np
import pytest

from wavelet_flow import autodiff as ad
from wavelet_flow import flow as fl
from wavelet_flow.config import LevelConfig
from wavelet_flow.model import build_model


def perturb_flow(flow, rng, scale=0.1):
    """Moves every parameter off its initial value so couplings stop being identities."""
    values = {name: t.data + scale * rng.standard_normal(t.shape) for name, t in fl.named_parameters(flow).items()}
    return fl.replace_parameters(flow, values)


def numeric_gradients(fn, arrays, eps=1e-6):
    """Central differences of a scalar function of several arrays."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            g[idx] = (float(fn(*plus)) - float(fn(*minus))) / (2 * eps)
        grads.append(g)
    return grads


def tape_gradients(fn, arrays):
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(*leaves)
    grads = ad.backward(tape, out)
    return out, [grads[leaf.tape_id].data for leaf in leaves]


@pytest.fixture
def rng():
    return np.random.default_rng(20231019)


@pytest.fixture
def random_flow(rng):
    def make(input_shape=(2, 2, 3), coupling='affine', cond_channels=0, num_steps=2, conv_channels=4,
             residual_blocks=1, scale=0.1, cond_scale=1.0 / 128):
        flow = fl.build_level_flow(input_shape, num_steps, conv_channels, residual_blocks, coupling,
                                   cond_channels=cond_channels, cond_scale=cond_scale, rng=rng)
        return perturb_flow(flow, rng, scale)
    return make


@pytest.fixture
def tiny_model(rng):
    def make(n=2, channels=1, coupling='affine', steps=2, conv_channels=4, scale=0.1, mix_init='orthogonal'):
        levels = [LevelConfig(steps=steps, conv_channels=conv_channels, residual_blocks=1, coupling=coupling)
                  for _ in range(n + 1)]
        model = build_model(n, channels, levels, rng=rng, mix_init=mix_init)
        if scale:
            for j in range(n + 1):
                model = model.with_level(j, perturb_flow(model.level_flow(j), rng, scale))
        return model
    return make


@pytest.fixture
def gradient_tools():
    return numeric_gradients, tape_gradients
