import numpy as np
import pytest
import torch

from sanr.lightfield import LightField, make_synthetic_lightfield
from sanr.model import ModelConfig, SanrModel, finalize_model
from sanr.training import TrainConfig, train


@pytest.fixture(scope="session")
def tiny_lightfield() -> LightField:
    return make_synthetic_lightfield(32, 32, 3, 3, 1.0, seed=5)


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(c_s=4, rank=2, c_l=2, u_count=3, v_count=3, height=32, width=32)


@pytest.fixture(scope="session")
def tiny_trained(tiny_lightfield, tiny_config):
    """A briefly trained desk-scale model shared by read-only tests."""
    tcfg = TrainConfig(lam=1e-3, samples_per_sai=5, max_epochs=3, seed=9, sga_epochs=0)
    model, report = train(tiny_lightfield, tiny_config, tcfg)
    return model, report


def randomized_finalized(seed: int):
    """Random desk-scale finalized model: random architecture and state."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        c_s=int(rng.integers(2, 8)),
        rank=int(rng.integers(1, 4)),
        c_l=int(rng.integers(1, 5)),
        u_count=int(rng.integers(2, 4)),
        v_count=int(rng.integers(2, 4)),
        height=int(rng.choice([16, 32, 48])),
        width=int(rng.choice([16, 32, 48])),
    )
    model = SanrModel(cfg, seed=seed)
    with torch.no_grad():
        for y in model.latents:
            y.copy_(torch.from_numpy(rng.normal(0, 3.0, size=tuple(y.shape))).float())
        for block in model.blocks:
            block.norm.running_mean.copy_(torch.from_numpy(rng.normal(0, 0.5, size=cfg.c_out)).float())
            block.norm.running_var.copy_(torch.from_numpy(rng.uniform(0.5, 2.0, size=cfg.c_out)).float())
    return finalize_model(model)
