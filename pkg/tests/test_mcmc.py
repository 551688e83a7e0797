import numpy as np
import pytest
from scipy import stats

from wavelet_flow import autodiff as ad
from wavelet_flow import flow as fl
from wavelet_flow.mcmc import (AnnealSpec, AnnealedTarget, DivergenceError, NutsConfig, annealed_log_density,
                               annealed_sample_level, annealed_sample_model, hamiltonian, leapfrog, nuts_sample)
from wavelet_flow.model import sample_direct


class GaussianTarget:
    """Isotropic normal of variance 1/gamma."""

    def __init__(self, gamma=1.0):
        self.gamma = gamma

    def log_density(self, z):
        return -0.5 * self.gamma * float(np.sum(z * z)), -self.gamma * z


class BoxedGaussianTarget(GaussianTarget):
    def log_density(self, z):
        if np.max(np.abs(z)) > 1.5:
            raise DivergenceError("outside the box")
        return super().log_density(z)


class BimodalTarget:
    """Equal mixture of N(-mu, s^2) and N(mu, s^2) in every coordinate."""

    def __init__(self, mu=1.5, s=0.7):
        self.mu, self.s = mu, s

    def log_density(self, z):
        right = -0.5 * ((z - self.mu) / self.s) ** 2
        left = -0.5 * ((z + self.mu) / self.s) ** 2
        total = np.logaddexp(right, left)
        weight = np.exp(right - total)
        grad = -(weight * (z - self.mu) + (1 - weight) * (z + self.mu)) / self.s ** 2
        return float(np.sum(total)), grad


class FrozenTarget:
    """Every point except the start is invalid."""

    def __init__(self, z0):
        self.z0 = z0

    def log_density(self, z):
        if not np.array_equal(z, self.z0):
            raise DivergenceError("moved")
        return 0.0, np.zeros_like(z)


def test_anneal_spec():
    spec = AnnealSpec.from_temperature(0.5)
    assert spec.gamma == pytest.approx(4.0)
    assert AnnealSpec().gamma == 1.0
    with pytest.raises(ValueError):
        AnnealSpec.from_temperature(1.5)
    with pytest.raises(ValueError):
        AnnealSpec.from_temperature(0.0)
    with pytest.raises(ValueError):
        AnnealSpec(T=0.5, gamma=2.0)


def test_nuts_config_validation():
    with pytest.raises(ValueError):
        NutsConfig(min_steps=5, adapt_steps=10)
    with pytest.raises(ValueError):
        NutsConfig(target_accept=1.0)
    with pytest.raises(ValueError):
        NutsConfig(initial_step_size=0.0)


def test_untempered_density_is_standard_normal(rng, random_flow):
    target = AnnealedTarget(random_flow(cond_channels=1, scale=0.3), rng.uniform(0, 256, size=(2, 2, 1)), 1.0)
    z = rng.normal(size=(2, 2, 3))
    value, grad = annealed_log_density(target, z)
    assert value == pytest.approx(ad.standard_normal_log_density(ad.Tensor(z)).item(), abs=1e-12)
    np.testing.assert_allclose(grad, -z, atol=1e-12)


def test_additive_flow_gives_tempered_normal(rng, random_flow):
    gamma = 1 / 0.7 ** 2
    target = AnnealedTarget(random_flow(coupling='additive', cond_channels=1, scale=0.3),
                            rng.uniform(0, 256, size=(2, 2, 1)), gamma)
    offsets = []
    for _ in range(5):
        z = rng.normal(size=(2, 2, 3))
        value, _ = target.log_density(z)
        offsets.append(value - gamma * ad.standard_normal_log_density(ad.Tensor(z)).item())
    np.testing.assert_allclose(offsets, offsets[0], atol=1e-9)


def test_reparameterization_identity(rng, random_flow):
    flow = random_flow(cond_channels=1, scale=0.3)
    cond = rng.uniform(0, 256, size=(2, 2, 1))
    gamma = 4.0
    target = AnnealedTarget(flow, cond, gamma)
    for _ in range(10):
        z = rng.normal(size=(2, 2, 3))
        x, logdet_h = fl.level_inverse(flow, z, cond, return_logdet=True)
        z_again, logdet_f = fl.level_forward(flow, x, cond)
        lhs = (gamma * ad.standard_normal_log_density(z_again).item() + gamma * logdet_f.item()
               + logdet_h.item())
        rhs, _ = annealed_log_density(target, z)
        assert abs(lhs - rhs) < 1e-8


def test_annealed_gradient(rng, random_flow, gradient_tools):
    numeric_gradients, _ = gradient_tools
    target = AnnealedTarget(random_flow(cond_channels=1, scale=0.3), rng.uniform(0, 256, size=(2, 2, 1)), 4.0)
    z = rng.normal(size=(2, 2, 3))
    _, grad = target.log_density(z)
    numeric, = numeric_gradients(lambda p: target.log_density(p)[0], [z])
    assert np.max(np.abs(grad - numeric)) <= 1e-4 * max(1.0, np.max(np.abs(numeric)))


def test_target_checks_shape(rng, random_flow):
    target = AnnealedTarget(random_flow(), None, 1.0)
    assert target.shape == (2, 2, 3)
    with pytest.raises(ValueError):
        target.log_density(np.zeros((1, 1, 3)))


def test_leapfrog_conserves_energy(rng):
    target = GaussianTarget(2.0)
    z, r = rng.normal(size=16), rng.normal(size=16)
    value, grad = target.log_density(z)
    energy0 = hamiltonian(value, r)
    for _ in range(100):
        z, r, value, grad = leapfrog(z, r, grad, 1e-4, target.log_density)
    assert abs(hamiltonian(value, r) - energy0) < 1e-6


def test_leapfrog_is_reversible(rng):
    target = GaussianTarget()
    z0, r0 = rng.normal(size=4), rng.normal(size=4)
    _, g0 = target.log_density(z0)
    z1, r1, _, g1 = leapfrog(z0, r0, g0, 0.3, target.log_density)
    z2, r2, _, _ = leapfrog(z1, r1, g1, -0.3, target.log_density)
    np.testing.assert_allclose(z2, z0, atol=1e-12)
    np.testing.assert_allclose(r2, r0, atol=1e-12)


def test_step_size_is_frozen_after_adaptation(rng):
    config = NutsConfig(min_steps=60, adapt_steps=20)
    chain, diag = nuts_sample(GaussianTarget(), np.zeros(4), config, rng)
    assert len(chain) == 60 == diag['transitions']
    frozen = diag['step_sizes'][20:]
    assert all(s == frozen[0] for s in frozen)
    assert diag['step_size'] == frozen[0]
    assert diag['step_sizes'][0] == config.initial_step_size
    assert 1 <= diag['mean_tree_depth'] <= config.max_tree_depth


def test_chain_keeps_shape_and_moves(rng):
    chain, diag = nuts_sample(GaussianTarget(), np.zeros((2, 2, 1)), NutsConfig(min_steps=5, adapt_steps=5), rng,
                              until_moved=True)
    assert chain[-1].shape == (2, 2, 1)
    assert len(chain) >= 5
    assert not np.array_equal(chain[-1], chain[-2])


def test_seeded_config_replays_chain():
    config = NutsConfig(min_steps=10, adapt_steps=5, seed=42)
    first, _ = nuts_sample(GaussianTarget(), np.zeros(3), config, None)
    second, _ = nuts_sample(GaussianTarget(), np.zeros(3), config, None)
    np.testing.assert_array_equal(np.array(first), np.array(second))


def test_divergent_trajectories_are_contained(rng):
    chain, diag = nuts_sample(BoxedGaussianTarget(0.1), np.zeros(3), NutsConfig(min_steps=100, adapt_steps=20,
                                                                               initial_step_size=1.0), rng)
    states = np.array(chain)
    assert np.all(np.abs(states) <= 1.5)
    assert diag['divergences'] > 0


def test_collapsing_step_size_raises(rng):
    with pytest.raises(DivergenceError, match="collapsed"):
        nuts_sample(FrozenTarget(np.zeros(2)), np.zeros(2), NutsConfig(min_steps=50, adapt_steps=50), rng)


def test_non_finite_start_is_rejected(rng):
    with pytest.raises(ValueError):
        nuts_sample(GaussianTarget(), np.array([np.nan, 0.0]), NutsConfig(), rng)


def test_tempered_normal_spread(rng):
    chain, _ = nuts_sample(GaussianTarget(4.0), np.zeros(4), NutsConfig(min_steps=3000, adapt_steps=200), rng)
    samples = np.array(chain[200:])
    assert samples.std() == pytest.approx(0.5, rel=0.05)


@pytest.mark.slow
def test_standard_normal_moments(rng):
    chain, _ = nuts_sample(GaussianTarget(), np.zeros(16), NutsConfig(min_steps=10000, adapt_steps=500), rng)
    samples = np.array(chain[500:])
    assert np.all(np.abs(samples.mean(axis=0)) < 0.05)
    assert np.all((samples.var(axis=0) > 0.9) & (samples.var(axis=0) < 1.1))


@pytest.mark.slow
def test_identity_flow_target_is_tempered_normal(rng):
    flow = fl.build_level_flow((1, 1, 3), num_steps=2, conv_channels=4, mix_init='identity', rng=rng)
    target = AnnealedTarget(flow, None, 4.0)
    chain, _ = nuts_sample(target, np.zeros((1, 1, 3)), NutsConfig(min_steps=4000, adapt_steps=200), rng)
    samples = np.array(chain[200:]).reshape(-1, 3)
    assert samples.std() == pytest.approx(0.5, rel=0.05)


def test_annealed_sample_level(rng, random_flow):
    flow = random_flow(cond_channels=1, scale=0.2)
    cond = rng.uniform(0, 256, size=(3, 2, 2, 1))
    planes, info = annealed_sample_level(flow, cond, (3, 2, 2, 3), AnnealSpec.from_temperature(0.8),
                                         NutsConfig(min_steps=5, adapt_steps=3), rng, level=4)
    assert planes.shape == (3, 2, 2, 3)
    assert np.all(np.isfinite(planes))
    record, = info
    assert record['level'] == 4 and record['chains'] == 3
    assert record['step_size'] > 0 and record['divergences'] >= 0
    with pytest.raises(ValueError):
        annealed_sample_level(flow, cond, (3, 4, 4, 3), AnnealSpec(), NutsConfig(min_steps=5, adapt_steps=3), rng)


def test_annealed_sample_model(rng, tiny_model):
    model = tiny_model(n=2, channels=1)
    diagnostics = []
    images = annealed_sample_model(model, AnnealSpec.from_temperature(0.9), NutsConfig(min_steps=4, adapt_steps=2),
                                   rng, num_samples=2, diagnostics=diagnostics)
    assert images.shape == (2, 4, 4, 1)
    assert [d['level'] for d in diagnostics] == [0, 1, 2]
    single = annealed_sample_model(model, AnnealSpec(), NutsConfig(min_steps=4, adapt_steps=2), rng)
    assert single.shape == (4, 4, 1)


@pytest.mark.slow
def test_additive_model_mcmc_matches_direct_sampling(rng, tiny_model):
    model = tiny_model(n=1, channels=1, coupling='additive', scale=0.3)
    count = 2000
    direct = sample_direct(model, rng, temperature=0.7, num_samples=count).reshape(count, -1)
    mcmc = annealed_sample_model(model, AnnealSpec.from_temperature(0.7), NutsConfig(), rng,
                                 num_samples=count).reshape(count, -1)
    mean_se = np.sqrt(direct.var(axis=0) / count + mcmc.var(axis=0) / count)
    assert np.all(np.abs(direct.mean(axis=0) - mcmc.mean(axis=0)) < 3 * mean_se)
    var_se = np.sqrt(sample_variance_error(direct) + sample_variance_error(mcmc))
    assert np.all(np.abs(direct.var(axis=0) - mcmc.var(axis=0)) < 3 * var_se)


def sample_variance_error(samples):
    centred = samples - samples.mean(axis=0)
    return (np.mean(centred ** 4, axis=0) - samples.var(axis=0) ** 2) / len(samples)


@pytest.mark.slow
def test_bimodal_target_histogram(rng):
    target = BimodalTarget()
    chain, _ = nuts_sample(target, np.zeros(1), NutsConfig(min_steps=30000, adapt_steps=1000), rng)
    samples = np.array(chain[1000:]).ravel()
    edges = np.linspace(-4.5, 4.5, 19)
    observed = np.histogram(np.clip(samples, -4.49, 4.49), edges)[0] / len(samples)
    open_edges = edges.copy()
    open_edges[0], open_edges[-1] = -np.inf, np.inf
    cdf = 0.5 * (stats.norm.cdf(open_edges, -target.mu, target.s) + stats.norm.cdf(open_edges, target.mu, target.s))
    assert 0.5 * np.sum(np.abs(observed - np.diff(cdf))) < 0.05
    # both modes are visited
    assert 0.4 < np.mean(samples > 0) < 0.6


@pytest.mark.slow
def test_untempered_mcmc_matches_direct_sampling_of_affine_model(rng, tiny_model):
    model = tiny_model(n=1, channels=1, coupling='affine', scale=0.3)
    count = 1000
    direct = sample_direct(model, rng, temperature=1.0, num_samples=count).reshape(count, -1)
    mcmc = annealed_sample_model(model, AnnealSpec(), NutsConfig(), rng, num_samples=count).reshape(count, -1)
    mean_se = np.sqrt(direct.var(axis=0) / count + mcmc.var(axis=0) / count)
    assert np.all(np.abs(direct.mean(axis=0) - mcmc.mean(axis=0)) < 3.5 * mean_se)
    var_se = np.sqrt(sample_variance_error(direct) + sample_variance_error(mcmc))
    assert np.all(np.abs(direct.var(axis=0) - mcmc.var(axis=0)) < 3.5 * var_se)


@pytest.mark.slow
def test_identity_affine_model_tempered_pixel_spread(rng, tiny_model):
    model = tiny_model(n=1, channels=1, coupling='affine', scale=0, mix_init='identity')
    images = annealed_sample_model(model, AnnealSpec.from_temperature(0.5), NutsConfig(min_steps=10, adapt_steps=5),
                                   rng, num_samples=500)
    # orthonormal Haar of independent N(0, T^2) coefficients: pixels are N(0, T^2)
    assert images.std() == pytest.approx(0.5, rel=0.05)
    assert abs(images.mean()) < 0.05
