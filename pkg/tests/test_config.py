import os

import pytest
import yaml

from wavelet_flow.config import SEED_ENV, LevelConfig, RunConfig, resolve_seed
from wavelet_flow.utils import open_yml_file, resource_dir


def minimal(**model):
    return {'model': {'n': 2, 'channels': 1, **model}}


def test_scalars_are_broadcast():
    config = RunConfig.from_dict(minimal(steps=3, coupling='additive'))
    assert config.levels == [LevelConfig(steps=3, coupling='additive')] * 3
    assert config.train.batch_size == 16
    assert config.sample.sampler == 'direct'


def test_per_level_lists():
    config = RunConfig.from_dict(minimal(conv_channels=[4, 8, 16], batch_size=[64, None, 8]))
    assert [lc.conv_channels for lc in config.levels] == [4, 8, 16]
    assert config.level_batch_size(0) == 64
    assert config.level_batch_size(1) == config.train.batch_size
    assert config.level_batch_size(2) == 8


def test_wrong_list_length_names_the_key():
    with pytest.raises(ValueError, match="model.steps"):
        RunConfig.from_dict(minimal(steps=[4, 4]))


@pytest.mark.parametrize("data,key", [
    (minimal(width=3), "width"),
    ({**minimal(), 'optim': {}}, "optim"),
    ({**minimal(), 'train': {'lr': 0.1}}, "lr"),
    ({**minimal(), 'sample': {'nuts': {'depth': 3}}}, "depth"),
])
def test_unknown_keys_are_rejected(data, key):
    with pytest.raises(ValueError, match=key):
        RunConfig.from_dict(data)


def test_invalid_values():
    with pytest.raises(ValueError, match="model.n"):
        RunConfig.from_dict({'model': {'channels': 1}})
    with pytest.raises(ValueError, match="sampler"):
        RunConfig.from_dict({**minimal(), 'sample': {'sampler': 'gibbs'}})
    with pytest.raises(ValueError, match="train"):
        RunConfig.from_dict({**minimal(), 'train': {'learning_rate': -1}})


def test_nested_sampler_settings():
    config = RunConfig.from_dict({**minimal(), 'sample': {'temperature': 0.8, 'nuts': {'min_steps': 40}}})
    assert config.sample.temperature == 0.8
    assert config.sample.nuts.min_steps == 40
    assert config.sample.nuts.adapt_steps == 10


def test_to_dict_round_trip():
    config = RunConfig.from_dict(minimal(steps=[1, 2, 3]))
    again = RunConfig.from_dict(config.to_dict())
    assert again == config


def test_bundled_config_is_valid():
    with open(os.path.join(resource_dir, 'config.yml')) as f:
        config = RunConfig.from_dict(yaml.safe_load(f))
    assert config.n == 4 and len(config.levels) == 5
    assert all(lc.conv_channels == LevelConfig().conv_channels for lc in config.levels)


def test_open_yml_file_reads_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"model": {"n": 1, "channels": 3}}')
    config = RunConfig.from_dict(open_yml_file(str(path)))
    assert config.channels == 3


def test_seed_precedence(monkeypatch):
    config = RunConfig.from_dict({**minimal(), 'train': {'seed': 7}})
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert resolve_seed(None, config) == 7
    assert resolve_seed(None) == 0
    monkeypatch.setenv(SEED_ENV, '11')
    assert resolve_seed(None, config) == 11
    assert resolve_seed(3, config) == 3
    monkeypatch.setenv(SEED_ENV, 'abc')
    with pytest.raises(ValueError, match=SEED_ENV):
        resolve_seed(None, config)
