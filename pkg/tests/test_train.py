import numpy as np
import pytest
from scipy import stats

from wavelet_flow import flow as fl
from wavelet_flow.config import LevelConfig
from wavelet_flow.data import dequantized_images, level_dataset, quantized_level_dataset, synthetic_corpus
from wavelet_flow.model import LN2, WaveletFlowModel, build_model, gaussian_baseline_bpd, log_prob, truncate
from wavelet_flow.train import (LevelData, NonFiniteGradientError, OptimizerState, TrainConfig, adamax_step,
                                dequantize, dequantize_filtered, extract_patches, loss_and_grads, nll_per_dim,
                                train_level)
from wavelet_flow.wavelet import build_pyramid, haar_synthesize, lowpass_to_level


def gaussian_level_data(rng, count, mean=3.0, std=0.5):
    return LevelData(x=mean + std * rng.standard_normal((count, 1, 1, 1)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_dequantize(rng):
    image = rng.integers(0, 256, size=(4, 4, 1)).astype(np.uint8)
    np.testing.assert_array_equal(dequantize(image, noise=np.zeros((4, 4, 1))), image.astype(np.float64))
    values = dequantize(image, rng)
    assert np.all(values >= image) and np.all(values < image.astype(np.float64) + 1.0)
    assert values.dtype == np.float64


def test_filtered_dequantization_noise_statistics(rng):
    image = np.zeros((4000, 1, 1, 1))
    noisy = dequantize_filtered(image, 3, rng)
    # 64 uniforms summed and divided by 8
    assert noisy.mean() == pytest.approx(0.5 * 2 ** 3, abs=0.02)
    assert noisy.var() == pytest.approx(64 / 12 / 64, rel=0.1)
    assert dequantize_filtered(np.zeros((4, 4, 2)), 2, rng).shape == (4, 4, 2)
    with pytest.raises(ValueError):
        dequantize_filtered(np.zeros((8, 8, 1)), 2, rng)


def test_patches_are_aligned(rng):
    images = rng.uniform(0, 256, size=(6, 16, 16, 1))
    pyr = build_pyramid(images)
    detail, cond = pyr.details[3], pyr.lows[3]
    d_patch, c_patch, offsets = extract_patches(detail, cond, 2, rng, return_offsets=True)
    assert d_patch.shape == (6, 2, 2, 3) and c_patch.shape == (6, 2, 2, 1)
    assert np.all(offsets % 2 == 0)
    synthesized = haar_synthesize(c_patch, d_patch)
    for b, (oy, ox) in enumerate(offsets):
        crop = images[b, 2 * oy:2 * oy + 4, 2 * ox:2 * ox + 4]
        np.testing.assert_allclose(synthesized[b], crop, atol=1e-10)


def test_patch_offsets_are_uniform(rng):
    detail = np.zeros((20000, 8, 8, 3))
    _, _, offsets = extract_patches(detail, None, 2, rng, return_offsets=True)
    cells = (offsets[:, 0] // 2) * 4 + offsets[:, 1] // 2
    counts = np.bincount(cells, minlength=16)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_patch_size_checks(rng):
    with pytest.raises(ValueError):
        extract_patches(np.zeros((1, 4, 4, 3)), None, 8, rng)
    with pytest.raises(ValueError):
        extract_patches(np.zeros((1, 8, 8, 3)), None, 3, rng)


def test_adamax_step(rng):
    config = TrainConfig(learning_rate=0.01)
    params = {'w': rng.normal(size=3)}
    state = OptimizerState()
    unchanged = adamax_step(state, params, {'w': np.zeros(3)}, config)
    np.testing.assert_array_equal(unchanged['w'], params['w'])

    state = OptimizerState()
    g = np.array([0.5, -2.0, 1e-3])
    updated = adamax_step(state, params, {'w': g}, config)
    np.testing.assert_allclose(updated['w'], params['w'] - 0.01 * g / (np.abs(g) + config.epsilon), atol=1e-14)
    assert state.step == 1


def test_adamax_rejects_non_finite_gradients(rng):
    state = OptimizerState()
    params = {'good': np.zeros(2), 'bad': np.zeros(2)}
    with pytest.raises(NonFiniteGradientError, match="'bad'"):
        adamax_step(state, params, {'good': np.ones(2), 'bad': np.array([1.0, np.nan])}, TrainConfig())
    assert state.step == 0


def test_loss_matches_nll(rng, random_flow):
    flow = random_flow(cond_channels=1, scale=0.2)
    x = rng.normal(size=(5, 2, 2, 3))
    cond = rng.uniform(0, 256, size=(5, 2, 2, 1))
    loss, grads = loss_and_grads(flow, x, cond)
    assert loss == pytest.approx(nll_per_dim(flow, LevelData(x, cond), batch_size=2), rel=1e-12)
    assert set(grads) == set(fl.named_parameters(flow))


def test_training_reduces_nll_and_is_deterministic(rng):
    base = rng.normal(size=(128, 2, 2, 1))
    # strongly correlated channels leave room to improve on a per-channel normalization
    data = LevelData(x=np.concatenate([base, base + 0.1 * rng.normal(size=base.shape),
                                         0.1 * rng.normal(size=base.shape) - base], axis=-1))
    template = fl.build_level_flow((2, 2, 3), num_steps=2, conv_channels=4, rng=np.random.default_rng(0))
    config = TrainConfig(learning_rate=1e-2, batch_size=16, epochs=4, seed=5)
    before = nll_per_dim(fl.initialize(template, data.x), data)
    trained, history = train_level(template, data, None, config, level=2)
    assert [r['epoch'] for r in history] == [1, 2, 3, 4]
    assert all(r['level'] == 2 for r in history)
    assert nll_per_dim(trained, data) < before
    again, _ = train_level(template, data, None, config, level=2)
    for name, t in fl.named_parameters(trained).items():
        np.testing.assert_array_equal(t.data, fl.named_parameters(again)[name].data)


def test_best_epoch_is_returned(rng):
    data = gaussian_level_data(rng, 256)
    flow = fl.build_level_flow((1, 1, 1), num_steps=1, conv_channels=2, rng=rng)
    seen = []
    best, history = train_level(flow, data, 0.25, TrainConfig(learning_rate=0.05, batch_size=32, epochs=6,
                                                              early_stop_patience=2), callback=seen.append)
    assert seen == history
    val_nll = [r['val_nll'] for r in history]
    best_epoch = history[0]['best_epoch']
    assert val_nll[best_epoch - 1] == min(val_nll)
    val_data = data.subset(slice(192, None))
    assert nll_per_dim(best, val_data) == val_nll[best_epoch - 1]


def test_patch_training_runs(rng):
    images = rng.uniform(0, 256, size=(8, 8, 8, 1))
    pyr = build_pyramid(images)
    data = LevelData(x=pyr.details[2], cond=pyr.lows[2])
    flow = fl.build_level_flow((4, 4, 3), num_steps=1, conv_channels=4, cond_channels=1, cond_scale=1 / 256,
                               rng=rng)
    trained, history = train_level(flow, data, None, TrainConfig(batch_size=4, epochs=1), patch_size=2, level=3)
    assert len(history) == 1
    assert trained.input_shape == (4, 4, 3)


def test_empty_dataset(rng):
    flow = fl.build_level_flow((1, 1, 1), num_steps=1, rng=rng)
    with pytest.raises(ValueError, match="Empty"):
        train_level(flow, LevelData(x=np.zeros((0, 1, 1, 1))), None, TrainConfig())


def test_validation_fraction_must_leave_training_data(rng):
    flow = fl.build_level_flow((1, 1, 1), num_steps=1, rng=rng)
    with pytest.raises(ValueError):
        train_level(flow, gaussian_level_data(rng, 4), 1.0, TrainConfig())


def test_quantized_training_data_is_dequantized_every_epoch(rng, monkeypatch):
    images = rng.integers(0, 256, size=(4, 4, 4, 1)).astype(np.uint8)
    seen = []

    def record(flow, x, cond):
        seen.append(np.sort(x.ravel()))
        return 0.0, {name: np.zeros(t.shape) for name, t in fl.named_parameters(flow).items()}

    monkeypatch.setattr('wavelet_flow.train.loss_and_grads', record)
    flow = fl.build_level_flow((2, 2, 3), num_steps=1, conv_channels=4, cond_channels=1, rng=rng)
    config = TrainConfig(batch_size=4, epochs=2, early_stop_patience=5)
    train_level(flow, quantized_level_dataset(images, 2), None, config, level=2)
    first, second = seen
    assert not np.allclose(first, second)

    seen.clear()
    train_level(flow, level_dataset(dequantize(images, rng), 2), None, config, level=2)
    first, second = seen
    np.testing.assert_array_equal(first, second)


def test_quantized_validation_data_is_dequantized_once(rng, monkeypatch):
    images = rng.integers(0, 256, size=(8, 4, 4, 1)).astype(np.uint8)
    seen = []

    def record(flow, data, batch_size):
        seen.append(data.x.copy())
        return nll_per_dim(flow, data, batch_size)

    monkeypatch.setattr('wavelet_flow.train.nll_per_dim', record)
    flow = fl.build_level_flow((2, 2, 3), num_steps=1, conv_channels=4, cond_channels=1, rng=rng)
    train_level(flow, quantized_level_dataset(images[:4], 2), quantized_level_dataset(images[4:], 2),
                TrainConfig(batch_size=4, epochs=3, early_stop_patience=5), level=2)
    assert len(seen) == 3
    for x in seen[1:]:
        np.testing.assert_array_equal(x, seen[0])


def untrained_model(n, steps=1, conv_channels=4):
    levels = [LevelConfig(steps=steps, conv_channels=conv_channels, residual_blocks=1)] * (n + 1)
    return build_model(n, 1, levels, rng=np.random.default_rng(0))


def mean_bits_per_dim(model, images):
    total, _ = log_prob(model, images)
    return -float(np.mean(total)) / (model.num_dims * LN2)


def test_retraining_one_level_changes_only_its_term(rng):
    images_u8 = synthetic_corpus(48, 2, rng=rng)
    template = untrained_model(2)
    model = template
    config = TrainConfig(learning_rate=1e-2, batch_size=16, epochs=2, seed=1)
    for j in range(3):
        best, _ = train_level(template.level_flow(j), quantized_level_dataset(images_u8, j), None, config, level=j)
        model = model.with_level(j, best)
    retrained, _ = train_level(template.level_flow(1), quantized_level_dataset(images_u8, 1), None,
                               TrainConfig(learning_rate=1e-2, batch_size=16, epochs=2, seed=2), level=1)

    images = dequantized_images(synthetic_corpus(16, 2, rng=rng), rng)
    _, before = log_prob(model, images)
    _, after = log_prob(model.with_level(1, retrained), images)
    np.testing.assert_array_equal(after[0], before[0])
    np.testing.assert_array_equal(after[2], before[2])
    assert not np.allclose(after[1], before[1])


def test_truncated_model_equals_model_trained_at_lower_resolution(rng):
    images = rng.uniform(0, 256, size=(32, 8, 8, 1))
    low = lowpass_to_level(images, 2)
    template = untrained_model(3)
    config = TrainConfig(learning_rate=1e-2, batch_size=8, epochs=2, seed=4)
    full, direct = template, []
    for j in range(3):
        from_full, _ = train_level(template.level_flow(j), level_dataset(images, j, n=3), None, config, level=j)
        from_low, _ = train_level(template.level_flow(j), level_dataset(low, j), None, config, level=j)
        full = full.with_level(j, from_full)
        direct.append(from_low)
    direct_model = WaveletFlowModel(n=2, channels=1, base_flow=direct[0], detail_flows=tuple(direct[1:]))

    truncated_total, truncated_terms = log_prob(truncate(full, 2), low)
    direct_total, direct_terms = log_prob(direct_model, low)
    np.testing.assert_array_equal(truncated_total, direct_total)
    for a, b in zip(truncated_terms, direct_terms):
        np.testing.assert_array_equal(a, b)
    _, full_terms = log_prob(full, images)
    np.testing.assert_allclose(truncated_total, full_terms[0] + full_terms[1] + full_terms[2], rtol=1e-12)


@pytest.mark.slow
def test_trained_model_beats_gaussian_baseline(rng):
    train_u8 = synthetic_corpus(600, 4, rng=rng)
    val_u8 = synthetic_corpus(100, 4, rng=rng)
    template = untrained_model(4, steps=2, conv_channels=8)
    model = template
    config = TrainConfig(learning_rate=2e-3, batch_size=32, epochs=5, seed=0)
    for j in range(5):
        best, _ = train_level(template.level_flow(j), quantized_level_dataset(train_u8, j), None, config, level=j)
        model = model.with_level(j, best)
    val = dequantized_images(val_u8, rng)
    baseline = gaussian_baseline_bpd(dequantized_images(train_u8, rng), val)
    assert mean_bits_per_dim(model, val) <= baseline - 1.0
