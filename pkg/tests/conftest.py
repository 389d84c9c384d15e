import numpy as np
import pytest

from gmmcomet.schemas.config_schemas import EngineConfig, ScenarioConfig
from gmmcomet.services.netcore import Architecture, init_params

TINY_CONFIG = """\
config_version: 1
seeds: [0]
experiments:
  - name: tiny
    scenario:
      kind: OPDA
      split: {shared: 2, source_private: 1, target_private: 1}
      input_dim: 4
      batch_size: 16
      batches_per_domain: 3
      domains:
        - {rotation_deg: 10}
        - {rotation_deg: 20}
      pretrain: {samples_per_class: 30, epochs: 40, target_accuracy: 0.9, min_accuracy: 0.0}
    engine:
      n_init: 2
      network: {hidden_dims: [8], feature_dim: 6, reduced_dim: 3}
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return Architecture(input_dim=3, hidden_dims=(4,), feature_dim=3, reduced_dim=2, num_classes=2)


@pytest.fixture
def tiny_params(tiny_arch, rng):
    return init_params(tiny_arch, rng)


@pytest.fixture
def small_scenario():
    return ScenarioConfig.model_validate({
        "kind": "OPDA",
        "split": {"shared": 2, "source_private": 1, "target_private": 1},
        "input_dim": 4,
        "batch_size": 16,
        "batches_per_domain": 3,
        "domains": [{"rotation_deg": 10}, {"rotation_deg": 20}],
        "pretrain": {"samples_per_class": 30, "epochs": 40, "target_accuracy": 0.9, "min_accuracy": 0.0},
    })


@pytest.fixture
def small_engine_config():
    return EngineConfig.model_validate({
        "n_init": 2,
        "network": {"hidden_dims": [8], "feature_dim": 6, "reduced_dim": 3},
    })


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return path
