import json
from pathlib import Path

import numpy as np
import pytest

from app.services.enclave import EnclaveState
from app.services.locking import generate_keys, lock_model
from app.services.transformer import ModelConfig, init_model

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def tiny_config(**overrides) -> ModelConfig:
    base = dict(num_layers=4, d_model=16, num_heads=2, d_ffn=32, seq_len=8, vocab_size=64, auth_position=2)
    base.update(overrides)
    return ModelConfig(**base)


def tokens_for(cfg: ModelConfig, count: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(count, cfg.seq_len))


def reference_configs():
    data = json.loads((CONFIGS / "reference_models.json").read_text())
    return {name: ModelConfig.from_dict(cfg) for name, cfg in data["models"].items()}


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def model(cfg):
    return init_model(cfg, seed=7)


@pytest.fixture
def keys(cfg):
    return generate_keys(cfg, seed=11)


@pytest.fixture
def locked(model, keys):
    return lock_model(model, keys, model.config.auth_position)


@pytest.fixture
def enclave(model, keys):
    return EnclaveState.provision(model, keys, model.config.auth_position, pad_seed=3, pad_count=4)


@pytest.fixture
def presets():
    return reference_configs()
